"""Command-line entry point.

Subcommands: train (split, federated, or centralized), serve / client
(the same split run over TCP), eval, export, mfcc, synth. Every run is
reproducible: all randomness flows from --seed, and outputs carry no
timestamps, so a rerun writes byte-identical files.

Flag values win over environment variables, which win over built-in
defaults. SFL_PORT sets the default port, SFL_SEED the default seed.

Data sources are written as
    synth:easy[:N]   synthetic, N samples per class (default 50)
    synth:hard[:N]
    wav:DIR          Speech-Commands-style folder of 16 kHz mono WAVs
    features:PATH    SFLF feature file
"""

from __future__ import annotations

import argparse
import os
import sys
import threading

from . import data as datamod
from . import export as exportmod
from . import tcp as tcpmod
from .data import DataError, load_features, load_wav_corpus, partition, save_features, synth_dataset
from .export import FormatError
from .mfcc import mfcc_extract
from .models import MODEL_NAMES
from .protocol import ProtocolError
from .training import (
    DEFAULT_EPOCHS,
    DEFAULT_MOMENTUM,
    DEFAULT_VAL_SPLIT,
    MetricsLog,
    TrainingConfig,
    centralized_train,
    evaluate,
    fl_train,
    sfl_train,
    spec_with_layers,
)

DEFAULT_SYNTH_PER_CLASS = 50


def env_seed() -> int:
    return int(os.environ.get("SFL_SEED", "0"))


def env_port() -> int:
    return int(os.environ.get("SFL_PORT", str(tcpmod.DEFAULT_PORT)))


def load_source(source: str, seed: int) -> datamod.Dataset:
    kind, _, rest = source.partition(":")
    if kind == "synth":
        difficulty, _, count = rest.partition(":")
        per_class = int(count) if count else DEFAULT_SYNTH_PER_CLASS
        return synth_dataset(seed, per_class, difficulty)
    if kind == "wav":
        return load_wav_corpus(rest)
    if kind == "features":
        return load_features(rest)
    raise DataError(
        f"unknown data source {source!r}; use synth:easy[:N], synth:hard[:N], "
        f"wav:DIR, or features:PATH"
    )


def parse_address(value: str, default_port: int):
    host, _, port = value.partition(":")
    return host or "127.0.0.1", int(port) if port else default_port


def _add_training_flags(p: argparse.ArgumentParser):
    p.add_argument("--model", choices=MODEL_NAMES, required=True)
    p.add_argument("--seed", type=int, default=None, help="default: $SFL_SEED or 0")
    p.add_argument("--epochs", type=int, default=DEFAULT_EPOCHS)
    p.add_argument("--lr", type=float, default=None,
                   help="default: 0.0005 for the MLP, 0.005 for the CNNs")
    p.add_argument("--momentum", type=float, default=DEFAULT_MOMENTUM)
    p.add_argument("--val-split", type=float, default=DEFAULT_VAL_SPLIT)
    p.add_argument("--metrics", metavar="CSV", help="write per-step metrics here")
    p.add_argument("--out", metavar="CKPT", help="write the final checkpoint here")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splitfed",
        description="Split and federated training for the keyword-spotting models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a whole training job in one process")
    p.add_argument("--scheme", choices=("sfl", "fl", "centralized"), default="sfl")
    p.add_argument("--data", required=True)
    p.add_argument("--clients", type=int, default=1)
    _add_training_flags(p)

    p = sub.add_parser("serve", help="run the server half over TCP")
    p.add_argument("--bind", default="", help="host:port (default 127.0.0.1:$SFL_PORT)")
    p.add_argument("--clients", type=int, required=True)
    p.add_argument("--val-data", help="data source evaluated after each epoch")
    _add_training_flags(p)

    p = sub.add_parser("client", help="run one client half over TCP")
    p.add_argument("--server", default="", help="host:port (default 127.0.0.1:$SFL_PORT)")
    p.add_argument("--client-id", type=int, required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--partition", type=int, metavar="M",
                   help="use this client's share of a seeded M-way split of --data")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("eval", help="score a checkpoint or quantized model")
    p.add_argument("--model-file", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("export", help="quantize a checkpoint to int8")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--quantized", required=True)

    p = sub.add_parser("mfcc", help="extract features from one WAV file")
    p.add_argument("--wav", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--label", type=int, default=datamod.UNKNOWN_LABEL)

    p = sub.add_parser("synth", help="generate a synthetic feature dataset")
    p.add_argument("--difficulty", choices=("easy", "hard"), required=True)
    p.add_argument("--per-class", type=int, default=DEFAULT_SYNTH_PER_CLASS)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)

    return parser


def _resolved_seed(args) -> int:
    return args.seed if args.seed is not None else env_seed()


def _write_outputs(args, spec, cfg: TrainingConfig, metrics: MetricsLog):
    if args.metrics:
        metrics.to_csv(args.metrics)
        print(f"metrics written to {args.metrics}")
    if args.out:
        exportmod.save_checkpoint(args.out, spec, cfg.snapshot(), metrics.summary())
        print(f"checkpoint written to {args.out}")
    val = metrics.final_val_accuracy()
    if val is not None:
        print(f"final validation accuracy: {val:.4f}")


def cmd_train(args) -> int:
    seed = _resolved_seed(args)
    cfg = TrainingConfig(
        model=args.model,
        num_clients=args.clients,
        epochs=args.epochs,
        learning_rate=args.lr,
        momentum=args.momentum,
        seed=seed,
        val_split=args.val_split,
    )
    ds = load_source(args.data, seed)
    train_ds, val_ds = datamod.split_train_val(ds, seed, cfg.val_split)
    if args.scheme == "sfl":
        shards = partition(train_ds, cfg.num_clients, seed)
        model, metrics = sfl_train(cfg, shards, val_ds)
        spec = spec_with_layers(cfg.model, exportmod.merge(model))
    elif args.scheme == "fl":
        shards = partition(train_ds, cfg.num_clients, seed)
        spec, metrics = fl_train(cfg, shards, val_ds)
    else:
        spec, metrics = centralized_train(cfg, partition(train_ds, 1, seed)[0], val_ds)
    print(f"trained {cfg.model} ({args.scheme}) for {cfg.epochs} epochs, "
          f"{metrics.steps_total} steps")
    _write_outputs(args, spec, cfg, metrics)
    return 0


def cmd_serve(args) -> int:
    seed = _resolved_seed(args)
    cfg = TrainingConfig(
        model=args.model,
        num_clients=args.clients,
        epochs=args.epochs,
        learning_rate=args.lr,
        momentum=args.momentum,
        seed=seed,
        val_split=args.val_split,
        transport="tcp",
    )
    host, port = parse_address(args.bind, env_port())
    val_ds = load_source(args.val_data, seed) if args.val_data else None
    ready = threading.Event()
    print(f"serving {cfg.model} for {cfg.num_clients} clients on {host}:{port}")
    model, metrics = tcpmod.serve(cfg, host, port, val_dataset=val_ds, ready=ready)
    spec = spec_with_layers(cfg.model, exportmod.merge(model))
    print(f"run complete: {metrics.steps_total} steps")
    _write_outputs(args, spec, cfg, metrics)
    return 0


def cmd_client(args) -> int:
    seed = _resolved_seed(args)
    ds = load_source(args.data, seed)
    if args.partition:
        if not 0 <= args.client_id < args.partition:
            raise ValueError(f"client id {args.client_id} outside the {args.partition}-way split")
        ds = partition(ds, args.partition, seed)[args.client_id]
    host, port = parse_address(args.server, env_port())
    print(f"client {args.client_id}: {len(ds)} samples, server {host}:{port}")
    tcpmod.run_client(args.client_id, ds, host, port)
    print(f"client {args.client_id} done")
    return 0


def cmd_eval(args) -> int:
    with open(args.model_file, "rb") as fh:
        magic = fh.read(4)
    if magic == exportmod.QUANTIZED_MAGIC:
        q = exportmod.load_quantized(args.model_file)
        spec = spec_with_layers(q.model_name, q.float_layers())
    else:
        spec, _cfg, _summary = exportmod.load_checkpoint(args.model_file)
    ds = load_source(args.data, _resolved_seed(args))
    acc = evaluate(spec, ds)
    print(f"accuracy: {acc:.4f} on {len(ds)} samples")
    return 0


def cmd_export(args) -> int:
    spec, _cfg, _summary = exportmod.load_checkpoint(args.checkpoint)
    q = exportmod.quantize_int8(spec.name, spec.layers)
    exportmod.save_quantized(args.quantized, q)
    print(f"quantized model written to {args.quantized}")
    return 0


def cmd_mfcc(args) -> int:
    audio = datamod.fit_clip(datamod.read_wav(args.wav))
    features = mfcc_extract(audio)
    ds = datamod.Dataset(samples=[datamod.Sample(features=features, label=args.label)],
                         provenance="feature_file")
    save_features(args.out, ds)
    print(f"features written to {args.out}")
    return 0


def cmd_synth(args) -> int:
    ds = synth_dataset(_resolved_seed(args), args.per_class, args.difficulty)
    save_features(args.out, ds)
    print(f"{len(ds)} samples written to {args.out}")
    return 0


_COMMANDS = {
    "train": cmd_train,
    "serve": cmd_serve,
    "client": cmd_client,
    "eval": cmd_eval,
    "export": cmd_export,
    "mfcc": cmd_mfcc,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (DataError, FormatError, ProtocolError, tcpmod.TransportError,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
