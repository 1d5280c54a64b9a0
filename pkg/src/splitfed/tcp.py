"""Socket transport for split training.

The server binds, waits for exactly the configured number of HELLOs (no
late join), then drives the same lockstep conversation as the in-process
path: TRAIN_CONFIG out, then per step one ACTIVATION in and one GRADIENT
out per client, processed in client id order; per epoch MODEL_UPLOAD in,
MODEL_PUSH out, ROUND_DONE out; finally BYE both ways. Because the
numeric core is shared and clients are always visited in id order, a run
over sockets produces bit-identical weights to the in-process run.

A client that disconnects or sends a malformed frame aborts the whole
run with a diagnostic; there is no straggler tolerance.
"""

from __future__ import annotations

import socket
from contextlib import ExitStack

from . import protocol
from .models import SplitModel, build, split
from .nn import set_params
from .training import (
    ClientSession,
    MetricsLog,
    ServerCore,
    TrainingConfig,
    aggregate,
    evaluate,
    spec_with_layers,
)

DEFAULT_PORT = 7710
SOCKET_TIMEOUT = 60.0


class TransportError(Exception):
    """Connection-level failure attributed to one client."""


def _configure(sock: socket.socket):
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    sock.settimeout(SOCKET_TIMEOUT)


def _recv(conn, client_id: int, expected: protocol.MessageType, metrics=None):
    try:
        msg = protocol.read_frame(conn)
    except (protocol.ProtocolError, OSError) as exc:
        raise TransportError(f"client {client_id}: receive failed: {exc}") from exc
    if msg is None:
        raise TransportError(f"client {client_id}: connection closed mid-round")
    if msg.type_tag != expected:
        raise TransportError(
            f"client {client_id}: expected {expected.name}, got {msg.type_tag.name}"
        )
    if metrics is not None:
        metrics.count_bytes(msg.type_tag, len(protocol.encode_frame(msg)), client_id, up=True)
    return msg


def _send(conn, client_id: int, msg: protocol.WireMessage, metrics=None):
    try:
        n = protocol.send_frame(conn, msg)
    except OSError as exc:
        raise TransportError(f"client {client_id}: send failed: {exc}") from exc
    if metrics is not None:
        metrics.count_bytes(msg.type_tag, n, client_id, up=False)


def serve(cfg: TrainingConfig, host: str = "127.0.0.1", port: int = DEFAULT_PORT,
          val_dataset=None, ready=None):
    """Run the server side of one training job; returns (SplitModel, MetricsLog).

    `ready`, if given, is a threading.Event set once the socket is
    listening (its `port` attribute is set to the bound port first, useful
    with port 0).
    """
    lr = cfg.resolved_learning_rate
    spec = build(cfg.model, cfg.seed)
    halves = split(spec)
    server = ServerCore(halves.server, lr, cfg.momentum)
    metrics = MetricsLog()

    with ExitStack() as stack:
        listener = stack.enter_context(socket.socket(socket.AF_INET, socket.SOCK_STREAM))
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((host, port))
        listener.listen(cfg.num_clients)
        listener.settimeout(SOCKET_TIMEOUT)
        if ready is not None:
            ready.port = listener.getsockname()[1]
            ready.set()

        conns: dict = {}
        shard_sizes: dict = {}
        while len(conns) < cfg.num_clients:
            conn, _addr = listener.accept()
            stack.enter_context(conn)
            _configure(conn)
            msg = _recv(conn, len(conns), protocol.MessageType.HELLO)
            cid = msg.client_id
            if cid in conns or not 0 <= cid < cfg.num_clients:
                raise TransportError(f"unexpected client id {cid} in hello")
            conns[cid] = conn
            shard_sizes[cid] = protocol.parse_hello(msg)
            metrics.count_bytes(msg.type_tag, len(protocol.encode_frame(msg)), cid, up=True)

        order = sorted(conns)
        if any(shard_sizes[cid] == 0 for cid in order):
            raise TransportError("a client reported an empty shard")
        steps_per_epoch = min(shard_sizes.values())
        wire_config = dict(cfg.snapshot(), steps_per_epoch=steps_per_epoch)
        for cid in order:
            _send(conns[cid], cid, protocol.train_config_message(wire_config), metrics)

        synced_client = halves.client
        hits = {}
        for epoch in range(cfg.epochs):
            for cid in order:
                hits[cid] = 0
            for step in range(steps_per_epoch):
                for cid in order:
                    msg = _recv(conns[cid], cid, protocol.MessageType.ACTIVATION, metrics)
                    label, act = protocol.parse_activation(msg)
                    loss, predicted, grad_act = server.process_activation(act, label)
                    _send(conns[cid], cid, protocol.gradient(epoch, cid, grad_act), metrics)
                    hits[cid] += predicted == label
                    metrics.add_step(epoch, step, cid, loss, hits[cid] / (step + 1))
                server.finish_step()
            if cfg.aggregate_clients:
                uploads = []
                for cid in order:
                    msg = _recv(conns[cid], cid, protocol.MessageType.MODEL_UPLOAD, metrics)
                    uploads.append(protocol.decode_tensors(msg.payload))
                averaged = aggregate(uploads)
                set_params(synced_client, averaged)
                for cid in order:
                    _send(conns[cid], cid, protocol.model_push(epoch, averaged), metrics)
            for cid in order:
                _send(conns[cid], cid, protocol.round_done(epoch), metrics)
            val_acc = None
            if val_dataset is not None and len(val_dataset):
                val_acc = evaluate(
                    spec_with_layers(cfg.model, synced_client + server.layers), val_dataset
                )
            metrics.close_epoch(epoch, val_acc)
        for cid in order:
            _send(conns[cid], cid, protocol.bye(), metrics)
            _recv(conns[cid], cid, protocol.MessageType.BYE, metrics)

    metrics.steps_total = cfg.epochs * steps_per_epoch
    return SplitModel(client=synced_client, server=server.layers), metrics


def run_client(client_id: int, shard, host: str = "127.0.0.1", port: int = DEFAULT_PORT):
    """Run one client against a serving host; blocks until the run ends."""
    if len(shard) == 0:
        raise ValueError("client shard is empty")
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as conn:
        _configure(conn)
        try:
            conn.connect((host, port))
        except OSError as exc:
            raise TransportError(f"cannot reach server at {host}:{port}: {exc}") from exc
        _send(conn, client_id, protocol.hello(client_id, len(shard)))

        def expect(expected):
            try:
                msg = protocol.read_frame(conn)
            except (protocol.ProtocolError, OSError) as exc:
                raise TransportError(f"server link failed: {exc}") from exc
            if msg is None:
                raise TransportError("server closed the connection mid-run")
            if msg.type_tag != expected:
                raise TransportError(f"expected {expected.name}, got {msg.type_tag.name}")
            return msg

        wire_config = protocol.parse_config(expect(protocol.MessageType.TRAIN_CONFIG))
        model_name = wire_config["model"]
        seed = wire_config["seed"]
        epochs = wire_config["epochs"]
        steps_per_epoch = wire_config["steps_per_epoch"]
        aggregate_clients = wire_config["aggregate_clients"]
        client_layers = build(model_name, seed).client_layers
        sess = ClientSession(
            client_id, model_name, client_layers, shard,
            wire_config["learning_rate"], wire_config["momentum"], seed,
        )
        for epoch in range(epochs):
            order = sess.epoch_order(epoch)
            for step in range(steps_per_epoch):
                label, act = sess.forward_sample(sess.shard[int(order[step])])
                _send(conn, client_id, protocol.activation(epoch, client_id, label, act))
                grad = protocol.parse_gradient(expect(protocol.MessageType.GRADIENT))
                sess.backward_update(grad)
            if aggregate_clients:
                _send(conn, client_id, protocol.model_upload(epoch, client_id, sess.weights()))
                pushed = expect(protocol.MessageType.MODEL_PUSH)
                sess.set_weights(protocol.decode_tensors(pushed.payload))
            expect(protocol.MessageType.ROUND_DONE)
        expect(protocol.MessageType.BYE)
        _send(conn, client_id, protocol.bye(client_id))
