"""Synchronous federation with backbone-only averaging and a source-side
proximal (domain constraint) term.

Rounds: broadcast the global backbone, let every client run ``E`` SGD
iterations on its own data with its own persistent head, then average the
returned backbones with uniform weights.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Literal

import numpy as np

from .model import BackboneParams, BatchSampler, ModelParams, backbone_distance, train_steps
from .synth import LabeledDataset

__all__ = [
    "ClientState",
    "FederationConfig",
    "RoundTrace",
    "Message",
    "MessageLog",
    "make_client",
    "local_train",
    "aggregate",
    "run_federation",
    "run_partial_averaging",
    "comm_cost",
    "write_traces_csv",
]

Role = Literal["source", "target"]


@dataclass(frozen=True, eq=False)
class ClientState:
    id: str
    role: Role
    dataset: LabeledDataset
    model: ModelParams
    sampler: BatchSampler
    losses: tuple = ()
    batches: tuple = ()

    def __post_init__(self):
        if self.role not in ("source", "target"):
            raise ValueError(f"role must be 'source' or 'target', got {self.role!r}")
        if self.model.head.num_classes != self.dataset.num_identities:
            raise ValueError(
                f"client {self.id}: head has {self.model.head.num_classes} classes, "
                f"dataset has {self.dataset.num_identities} identities"
            )


def make_client(id: str, role: Role, dataset: LabeledDataset, model: ModelParams, seed: int) -> ClientState:
    return ClientState(id, role, dataset, model, BatchSampler(len(dataset), seed))


@dataclass
class FederationConfig:
    rounds: int
    local_iterations: int
    lam: float = 0.0
    lr: float = 0.05
    batch_size: int = 64
    clients: list[ClientState] = field(default_factory=list)
    aggregation: str = "uniform"

    def __post_init__(self):
        if self.rounds < 0:
            raise ValueError(f"rounds must be >= 0, got {self.rounds}")
        if self.local_iterations < 1:
            raise ValueError(f"local_iterations must be >= 1, got {self.local_iterations}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.aggregation != "uniform":
            raise ValueError("only uniform aggregation is supported")
        ids = [c.id for c in self.clients]
        if len(set(ids)) != len(ids):
            raise ValueError("client ids must be unique")

    @property
    def total_iterations(self) -> int:
        return self.rounds * self.local_iterations


@dataclass(frozen=True)
class Message:
    round: int
    direction: Literal["down", "up"]
    client: str
    payload: object
    meta: dict


class MessageLog:
    """Everything that crossed the server/client boundary."""

    def __init__(self):
        self.messages: list[Message] = []

    def send(self, round, direction, client, payload, **meta):
        self.messages.append(Message(round, direction, client, payload, meta))

    def __len__(self):
        return len(self.messages)

    def violations(self) -> list[str]:
        """Messages carrying anything besides a backbone and scalar metadata."""
        bad = []
        for m in self.messages:
            if type(m.payload) is not BackboneParams:
                bad.append(f"round {m.round} {m.direction} {m.client}: payload {type(m.payload).__name__}")
            for k, v in m.meta.items():
                if not isinstance(v, (int, float, str, bool)):
                    bad.append(f"round {m.round} {m.direction} {m.client}: non-scalar meta {k!r}")
        return bad


@dataclass
class RoundTrace:
    round: int
    losses: dict
    drift: dict
    wall_clock: float
    bytes_exchanged: int
    backbone: BackboneParams | None = None
    metrics: dict = field(default_factory=dict)


def local_train(
    client: ClientState, global_backbone: BackboneParams, E: int, lam: float, lr: float, batch_size: int
) -> ClientState:
    """Start from ``global_backbone`` and run ``E`` local SGD iterations.

    Only the source client applies the proximal term, always against the
    round-start ``global_backbone``.
    """
    if len(client.dataset) == 0:
        raise ValueError(f"client {client.id} has no data")
    if E < 1:
        raise ValueError(f"E must be >= 1, got {E}")
    prox = (lam, global_backbone) if client.role == "source" and lam > 0 else None
    model = ModelParams(global_backbone, client.model.head)
    model, sampler, losses, batches = train_steps(
        model, client.dataset.features, client.dataset.identities, E, lr, batch_size, client.sampler, prox
    )
    return replace(client, model=model, sampler=sampler, losses=tuple(losses), batches=tuple(batches))


def aggregate(backbones: list[BackboneParams]) -> BackboneParams:
    """Uniform mean, accumulated in list order."""
    if not backbones:
        raise ValueError("nothing to aggregate")
    first = backbones[0]
    for b in backbones[1:]:
        if not first.same_shape(b):
            raise ValueError("backbone shapes do not match")
    sums = [a.copy() for a in first.arrays()]
    for b in backbones[1:]:
        for acc, a in zip(sums, b.arrays()):
            acc += a
    n = len(backbones)
    return BackboneParams.from_arrays([s / n for s in sums], first.activation)


def run_federation(
    config: FederationConfig,
    initial_backbone: BackboneParams,
    message_log: MessageLog | None = None,
    on_round: Callable[[int, BackboneParams], dict] | None = None,
):
    """Run ``config.rounds`` rounds; returns ``(final_backbone, traces)``.

    ``on_round(r, backbone)`` is called after every aggregation and its dict
    is stored on that round's trace.
    """
    if not config.clients and config.rounds:
        raise ValueError("federation needs at least one client")
    clients = sorted(config.clients, key=lambda c: c.id)
    if sum(c.role == "source" for c in clients) > 1:
        raise ValueError("at most one source client is allowed")
    global_bb = initial_backbone
    msg_bytes = initial_backbone.nbytes
    traces = []
    for r in range(config.rounds):
        t0 = time.perf_counter()
        updated = []
        for c in clients:
            if message_log is not None:
                message_log.send(r, "down", c.id, global_bb, nbytes=msg_bytes)
            updated.append(
                local_train(c, global_bb, config.local_iterations, config.lam, config.lr, config.batch_size)
            )
            if message_log is not None:
                message_log.send(r, "up", c.id, updated[-1].model.backbone, nbytes=msg_bytes,
                                 iterations=config.local_iterations)
        drift = {c.id: backbone_distance(c.model.backbone, global_bb) for c in updated}
        global_bb = aggregate([c.model.backbone for c in updated])
        clients = updated
        trace = RoundTrace(
            r,
            {c.id: list(c.losses) for c in clients},
            drift,
            time.perf_counter() - t0,
            2 * len(clients) * msg_bytes,
            backbone=global_bb,
        )
        if on_round is not None:
            trace.metrics = dict(on_round(r, global_bb))
        traces.append(trace)
    return global_bb, traces


def run_partial_averaging(
    clients: list[ClientState], initial_backbone: BackboneParams, rounds: int, E: int, lr: float, batch_size: int
) -> list[BackboneParams]:
    """Plain unregularized backbone-averaging rounds, kept free of any
    proximal logic; returns the global backbone after every round."""
    clients = sorted(clients, key=lambda c: c.id)
    heads = {c.id: c.model.head for c in clients}
    samplers = {c.id: c.sampler for c in clients}
    global_bb = initial_backbone
    out = []
    for _ in range(rounds):
        locals_ = []
        for c in clients:
            model, samplers[c.id], _, _ = train_steps(
                ModelParams(global_bb, heads[c.id]),
                c.dataset.features,
                c.dataset.identities,
                E,
                lr,
                batch_size,
                samplers[c.id],
            )
            heads[c.id] = model.head
            locals_.append(model.backbone)
        global_bb = aggregate(locals_)
        out.append(global_bb)
    return out


def comm_cost(M: int, E: int, backbone_bytes: int, N: int) -> tuple[int, int]:
    """Rounds needed for ``M`` total iterations at ``E`` per round, and the bytes
    moved (one download plus one upload per client per round)."""
    if E < 1:
        raise ValueError(f"E must be >= 1, got {E}")
    rounds = math.ceil(M / E)
    return rounds, rounds * N * 2 * backbone_bytes


def write_traces_csv(path, traces: list[RoundTrace], append: bool = False) -> None:
    """One row per (round, client): mean local loss, drift and bytes moved."""
    new = not append
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["round", "client", "loss", "drift", "bytes"])
        for t in traces:
            per_client = t.bytes_exchanged // max(1, len(t.losses))
            for cid in sorted(t.losses):
                w.writerow([t.round, cid, repr(float(np.mean(t.losses[cid]))), repr(t.drift[cid]), per_client])
