"""Split federated learning for small keyword-spotting models.

Client devices hold the first layers of the network and a private data
shard; a server holds the rest. Activations and gradients cross the
boundary through a checksummed binary protocol, client halves are
averaged every epoch, and a single-client run reproduces centralized
training bit for bit.
"""

from .data import CLASS_NAMES, Dataset, Sample, load_features, partition, save_features, synth_dataset
from .models import MODEL_NAMES, build, split
from .training import TrainingConfig, centralized_train, evaluate, fl_train, sfl_train

__version__ = "0.1.0"

__all__ = [
    "CLASS_NAMES",
    "Dataset",
    "MODEL_NAMES",
    "Sample",
    "TrainingConfig",
    "build",
    "centralized_train",
    "evaluate",
    "fl_train",
    "load_features",
    "partition",
    "save_features",
    "sfl_train",
    "split",
    "synth_dataset",
    "__version__",
]
