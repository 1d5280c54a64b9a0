"""Training orchestration: split training, federated averaging, and the
centralized oracle.

Split training runs the client halves against a single server half. Per
epoch every client walks its own seeded permutation of its shard; per
step each client sends one activation, the server processes the clients
sequentially in client id order, replies with the activation gradient,
and applies one update to its own weights from the gradients averaged
across the step's clients. Client halves are averaged and re-synchronized
at every epoch boundary.

All message traffic goes through the wire protocol even in process, so
byte counters mean the same thing on both transports. With one client and
aggregation off, the split run is bit-identical to centralized training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import protocol
from .data import Dataset
from .models import (
    MODEL_NAMES,
    ModelSpec,
    SplitModel,
    build,
    clone_layers,
    is_mlp,
    prepare_input,
    split,
)
from .nn import (
    F32,
    SgdMomentum,
    backward_layers,
    collect_grads,
    collect_params,
    forward_layers,
    set_params,
    softmax_cross_entropy,
)

MLP_LEARNING_RATE = 0.0005
CNN_LEARNING_RATE = 0.005
DEFAULT_MOMENTUM = 0.6
DEFAULT_EPOCHS = 3
DEFAULT_VAL_SPLIT = 0.1

_ORDER_STREAM = 2

CSV_HEADER = "epoch,step,client_id,loss,train_acc,val_acc,bytes_up,bytes_down"


def default_learning_rate(model_name: str) -> float:
    return MLP_LEARNING_RATE if is_mlp(model_name) else CNN_LEARNING_RATE


@dataclass(frozen=True)
class TrainingConfig:
    model: str
    num_clients: int = 1
    epochs: int = DEFAULT_EPOCHS
    learning_rate: float | None = None  # None -> per-family default
    momentum: float = DEFAULT_MOMENTUM
    batch_size: int = 1
    seed: int = 0
    val_split: float = DEFAULT_VAL_SPLIT
    aggregate_clients: bool = True
    transport: str = "in_process"

    def __post_init__(self):
        if self.model not in MODEL_NAMES:
            raise ValueError(f"unknown model {self.model!r}; expected one of {MODEL_NAMES}")
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size != 1:
            raise ValueError("batch_size is fixed at 1; larger batches are not supported")
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in u64")
        if not 0.0 <= self.val_split < 1.0:
            raise ValueError("val_split must be in [0, 1)")
        if self.transport not in ("in_process", "tcp"):
            raise ValueError(f"unknown transport {self.transport!r}")
        if not self.aggregate_clients and self.num_clients != 1:
            raise ValueError("aggregation can only be disabled for a single client")

    @property
    def resolved_learning_rate(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return default_learning_rate(self.model)

    def snapshot(self) -> dict:
        """Config as stored in checkpoints. Transport is excluded: it must
        not affect the trained weights."""
        return {
            "model": self.model,
            "num_clients": self.num_clients,
            "epochs": self.epochs,
            "learning_rate": self.resolved_learning_rate,
            "momentum": self.momentum,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "val_split": self.val_split,
            "aggregate_clients": self.aggregate_clients,
        }


def epoch_order(seed: int, client_id: int, epoch: int, n: int) -> np.ndarray:
    """Sample order for one client and epoch; its own seeded stream."""
    rng = np.random.default_rng([int(seed), _ORDER_STREAM, int(client_id), int(epoch)])
    return rng.permutation(n)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class StepRecord:
    epoch: int
    step: int
    client_id: int
    loss: float
    train_acc: float
    val_acc: float | None = None
    bytes_up: int = 0
    bytes_down: int = 0


@dataclass
class MetricsLog:
    records: list = field(default_factory=list)
    bytes_by_type: dict = field(default_factory=dict)
    val_history: list = field(default_factory=list)  # (epoch, accuracy)
    steps_total: int = 0
    _up: dict = field(default_factory=dict)
    _down: dict = field(default_factory=dict)

    def count_bytes(self, type_tag: protocol.MessageType, nbytes: int, client_id: int, up: bool):
        name = type_tag.name
        self.bytes_by_type[name] = self.bytes_by_type.get(name, 0) + nbytes
        book = self._up if up else self._down
        book[client_id] = book.get(client_id, 0) + nbytes

    def bytes_up(self, client_id: int) -> int:
        return self._up.get(client_id, 0)

    def bytes_down(self, client_id: int) -> int:
        return self._down.get(client_id, 0)

    def add_step(self, epoch: int, step: int, client_id: int, loss: float, train_acc: float):
        self.records.append(
            StepRecord(
                epoch=epoch,
                step=step,
                client_id=client_id,
                loss=loss,
                train_acc=train_acc,
                bytes_up=self.bytes_up(client_id),
                bytes_down=self.bytes_down(client_id),
            )
        )

    def close_epoch(self, epoch: int, val_acc: float | None):
        if val_acc is None:
            return
        self.val_history.append((epoch, val_acc))
        last_step = max((r.step for r in self.records if r.epoch == epoch), default=None)
        for r in self.records:
            if r.epoch == epoch and r.step == last_step:
                r.val_acc = val_acc

    def final_val_accuracy(self) -> float | None:
        return self.val_history[-1][1] if self.val_history else None

    def summary(self) -> dict:
        """Transport-invariant run summary stored in checkpoints."""
        out = {"steps_total": self.steps_total}
        if self.records:
            last_epoch = self.records[-1].epoch
            losses = [r.loss for r in self.records if r.epoch == last_epoch]
            out["final_train_loss"] = float(np.mean(losses))
        return out

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write(CSV_HEADER + "\n")
            for r in self.records:
                val = "" if r.val_acc is None else repr(r.val_acc)
                fh.write(
                    f"{r.epoch},{r.step},{r.client_id},{r.loss!r},{r.train_acc!r},"
                    f"{val},{r.bytes_up},{r.bytes_down}\n"
                )


# ---------------------------------------------------------------------------
# aggregation


def aggregate(weight_sets: list) -> list:
    """Elementwise arithmetic mean of aligned weight-tensor lists.

    Each element is the exactly rounded float64 sum (math.fsum) divided by
    the set count, then cast to float32. Exact summation makes the mean
    independent of client order and a fixed point on identical inputs.
    """
    if not weight_sets:
        raise ValueError("nothing to aggregate")
    first = weight_sets[0]
    for ws in weight_sets[1:]:
        if len(ws) != len(first) or any(a.shape != b.shape for a, b in zip(ws, first)):
            raise ValueError("weight sets are not shape-aligned")
    m = float(len(weight_sets))
    out = []
    for tensors in zip(*weight_sets):
        flats = [np.asarray(t, dtype=np.float64).ravel().tolist() for t in tensors]
        mean = np.empty(len(flats[0]), dtype=np.float64)
        for i, column in enumerate(zip(*flats)):
            mean[i] = math.fsum(column)
        mean /= m
        out.append(mean.astype(F32).reshape(tensors[0].shape))
    return out


# ---------------------------------------------------------------------------
# the two sides of a split run


class ClientSession:
    """One client's half of the model plus its private data shard."""

    def __init__(self, client_id, model_name, layers, shard, learning_rate, momentum, seed):
        if len(shard) == 0:
            raise ValueError(f"client {client_id} has an empty shard")
        self.client_id = client_id
        self.model_name = model_name
        self.layers = layers
        self.shard = shard
        self.seed = seed
        self.optimizer = SgdMomentum(collect_params(layers), learning_rate, momentum)

    def epoch_order(self, epoch: int) -> np.ndarray:
        return epoch_order(self.seed, self.client_id, epoch, len(self.shard))

    def forward_sample(self, sample):
        x = prepare_input(self.model_name, sample.features)
        return sample.label, forward_layers(self.layers, x)

    def backward_update(self, grad_activation: np.ndarray):
        backward_layers(self.layers, grad_activation)
        self.optimizer.step(collect_grads(self.layers))

    def weights(self) -> list:
        return [p.copy() for p in collect_params(self.layers)]

    def set_weights(self, tensors: list):
        set_params(self.layers, tensors)


class ServerCore:
    """Server half: forward/backward per activation, one weight update per
    step from the gradient sum averaged over that step's clients."""

    def __init__(self, layers, learning_rate, momentum):
        self.layers = layers
        self.optimizer = SgdMomentum(collect_params(layers), learning_rate, momentum)
        self._accum = None
        self._count = 0

    def process_activation(self, activation: np.ndarray, label: int):
        logits = forward_layers(self.layers, activation)
        loss, grad_logits = softmax_cross_entropy(logits, int(label))
        grad_activation = backward_layers(self.layers, grad_logits)
        grads = collect_grads(self.layers)
        if self._accum is None:
            self._accum = [g.copy() for g in grads]
        else:
            for acc, g in zip(self._accum, grads):
                acc += g
        self._count += 1
        return loss, int(np.argmax(logits)), grad_activation

    def finish_step(self):
        if self._count == 0:
            raise RuntimeError("no activations processed this step")
        m = F32(self._count)
        self.optimizer.step([a / m for a in self._accum])
        self._accum = None
        self._count = 0


# ---------------------------------------------------------------------------
# evaluation


def evaluate(spec: ModelSpec, dataset: Dataset) -> float:
    """Fraction of samples whose argmax logit hits the label. np.argmax
    takes the lowest index on ties."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    hits = 0
    for sample in dataset:
        logits = forward_layers(spec.layers, prepare_input(spec.name, sample.features))
        hits += int(np.argmax(logits)) == sample.label
    return hits / len(dataset)


def spec_with_layers(name: str, layers: list) -> ModelSpec:
    template = build(name)
    return ModelSpec(
        name=name, layers=layers, split_index=template.split_index, input_shape=template.input_shape
    )


# ---------------------------------------------------------------------------
# split training (in-process transport)


def _validate_shards(cfg: TrainingConfig, client_datasets):
    if len(client_datasets) != cfg.num_clients:
        raise ValueError(f"expected {cfg.num_clients} client datasets, got {len(client_datasets)}")
    for i, shard in enumerate(client_datasets):
        if len(shard) == 0:
            raise ValueError(f"client {i} has an empty dataset")


def sfl_train(cfg: TrainingConfig, client_datasets, val_dataset=None, on_step=None):
    """Run split training in process; returns (SplitModel, MetricsLog).

    Frames are really encoded and decoded on every hop, so numeric results
    and byte counts match the socket transport bit for bit. `on_step`, if
    given, is called after every server step as
    on_step(epoch, step, params) with the live parameter tensors of the
    first client's half followed by the server half.
    """
    _validate_shards(cfg, client_datasets)
    lr = cfg.resolved_learning_rate
    spec = build(cfg.model, cfg.seed)
    halves = split(spec)
    server = ServerCore(halves.server, lr, cfg.momentum)
    sessions = [
        ClientSession(
            i, cfg.model, clone_layers(halves.client), shard, lr, cfg.momentum, cfg.seed
        )
        for i, shard in enumerate(client_datasets)
    ]
    links = [protocol.InProcessChannel.pair() for _ in sessions]  # (server end, client end)
    metrics = MetricsLog()

    def c2s(i, msg):
        n = links[i][1].send(msg)
        metrics.count_bytes(msg.type_tag, n, i, up=True)
        return links[i][0].receive()

    def s2c(i, msg):
        n = links[i][0].send(msg)
        metrics.count_bytes(msg.type_tag, n, i, up=False)
        return links[i][1].receive()

    steps_per_epoch = min(len(shard) for shard in client_datasets)
    wire_config = dict(cfg.snapshot(), steps_per_epoch=steps_per_epoch)
    for sess in sessions:
        c2s(sess.client_id, protocol.hello(sess.client_id, len(sess.shard)))
    for sess in sessions:
        s2c(sess.client_id, protocol.train_config_message(wire_config))

    synced_client = halves.client  # canonical aggregated half
    for epoch in range(cfg.epochs):
        orders = [sess.epoch_order(epoch) for sess in sessions]
        hits = [0] * cfg.num_clients
        for step in range(steps_per_epoch):
            # client forward, then server pass in client id order
            inbox = []
            for sess, order in zip(sessions, orders):
                label, act = sess.forward_sample(sess.shard[int(order[step])])
                inbox.append(c2s(sess.client_id, protocol.activation(epoch, sess.client_id, label, act)))
            for sess, msg in zip(sessions, inbox):
                label, act = protocol.parse_activation(msg)
                loss, predicted, grad_act = server.process_activation(act, label)
                reply = s2c(sess.client_id, protocol.gradient(epoch, sess.client_id, grad_act))
                sess.backward_update(protocol.parse_gradient(reply))
                hits[sess.client_id] += predicted == label
                metrics.add_step(
                    epoch, step, sess.client_id, loss, hits[sess.client_id] / (step + 1)
                )
            server.finish_step()
            if on_step is not None:
                on_step(epoch, step, collect_params(sessions[0].layers) + collect_params(server.layers))
        if cfg.aggregate_clients:
            uploads = []
            for sess in sessions:
                msg = c2s(sess.client_id, protocol.model_upload(epoch, sess.client_id, sess.weights()))
                uploads.append(protocol.decode_tensors(msg.payload))
            averaged = aggregate(uploads)
            set_params(synced_client, averaged)
            for sess in sessions:
                msg = s2c(sess.client_id, protocol.model_push(epoch, averaged))
                sess.set_weights(protocol.decode_tensors(msg.payload))
            eval_client = synced_client
        else:
            eval_client = sessions[0].layers
        for sess in sessions:
            s2c(sess.client_id, protocol.round_done(epoch))
        val_acc = None
        if val_dataset is not None and len(val_dataset):
            val_acc = evaluate(spec_with_layers(cfg.model, eval_client + server.layers), val_dataset)
        metrics.close_epoch(epoch, val_acc)
    for sess in sessions:
        s2c(sess.client_id, protocol.bye())
        c2s(sess.client_id, protocol.bye(sess.client_id))

    metrics.steps_total = cfg.epochs * steps_per_epoch
    final_client = synced_client if cfg.aggregate_clients else sessions[0].layers
    return SplitModel(client=final_client, server=server.layers), metrics


# ---------------------------------------------------------------------------
# baselines


def centralized_train(cfg: TrainingConfig, dataset: Dataset, val_dataset=None, on_step=None):
    """Plain single-process SGD over the unsplit model; the bit-exact
    reference for the single-client split run. Uses the client-0 sample
    order stream so the two walks see identical data."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    spec = build(cfg.model, cfg.seed)
    optimizer = SgdMomentum(collect_params(spec.layers), cfg.resolved_learning_rate, cfg.momentum)
    metrics = MetricsLog()
    for epoch in range(cfg.epochs):
        order = epoch_order(cfg.seed, 0, epoch, len(dataset))
        hits = 0
        for step, idx in enumerate(order):
            sample = dataset[int(idx)]
            logits = forward_layers(spec.layers, prepare_input(cfg.model, sample.features))
            loss, grad_logits = softmax_cross_entropy(logits, sample.label)
            backward_layers(spec.layers, grad_logits)
            optimizer.step(collect_grads(spec.layers))
            hits += int(np.argmax(logits)) == sample.label
            metrics.add_step(epoch, step, 0, loss, hits / (step + 1))
            if on_step is not None:
                on_step(epoch, step, collect_params(spec.layers))
        val_acc = None
        if val_dataset is not None and len(val_dataset):
            val_acc = evaluate(spec, val_dataset)
        metrics.close_epoch(epoch, val_acc)
    metrics.steps_total = cfg.epochs * len(dataset)
    return spec, metrics


def fl_train(cfg: TrainingConfig, client_datasets, val_dataset=None):
    """Federated averaging baseline: every client trains the whole model
    locally for an epoch, then the server averages all weights.

    Only the MLP fits this mode; the convolutional models are what the
    split exists for, since their full training footprint does not fit the
    client devices.
    """
    if not is_mlp(cfg.model):
        raise ValueError(
            "fl_train supports model1_mlp only: the convolutional models do not fit "
            "on-device training, which is the reason the split path exists"
        )
    _validate_shards(cfg, client_datasets)
    lr = cfg.resolved_learning_rate
    spec = build(cfg.model, cfg.seed)
    sessions = [
        ClientSession(i, cfg.model, clone_layers(spec.layers), shard, lr, cfg.momentum, cfg.seed)
        for i, shard in enumerate(client_datasets)
    ]
    metrics = MetricsLog()
    for epoch in range(cfg.epochs):
        for sess in sessions:
            hits = 0
            for step, idx in enumerate(sess.epoch_order(epoch)):
                sample = sess.shard[int(idx)]
                label, logits = sess.forward_sample(sample)
                loss, grad_logits = softmax_cross_entropy(logits, label)
                sess.backward_update(grad_logits)
                hits += int(np.argmax(logits)) == label
                metrics.add_step(epoch, step, sess.client_id, loss, hits / (step + 1))
        averaged = aggregate([sess.weights() for sess in sessions])
        set_params(spec.layers, averaged)
        for sess in sessions:
            sess.set_weights(averaged)
        val_acc = None
        if val_dataset is not None and len(val_dataset):
            val_acc = evaluate(spec, val_dataset)
        metrics.close_epoch(epoch, val_acc)
    metrics.steps_total = cfg.epochs * sum(len(s) for s in client_datasets)
    return spec, metrics
