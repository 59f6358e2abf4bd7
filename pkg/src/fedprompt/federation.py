"""Synchronous federated rounds over serialized prompt-model payloads.

Each round the server samples clients, ships them the current parameters as
VLPG bytes, lets every selected client run ``local_epochs`` of AdamW on its
own scenes, and replaces the global parameters by the plain mean of what
comes back. Clients never see each other's data or optimizer state.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DomainError, ProtocolError
from .losses import LossBreakdown
from .numerics import AdamWState, RngStream, adamw_step
from .promptgen import ClassEmbeddingBatch, deserialize_tensors, quantize, serialize_tensors
from .surrogate import FrozenBackbone, Scene
from .training import loss_and_grad

MIB = 2**20


@dataclass(frozen=True)
class FederationConfig:
    n_clients: int = 3
    rounds: int = 500
    local_epochs: int = 1
    participation_rate: float = 0.7
    batch_size: int = 4
    lr: float = 1e-3
    weight_decay: float = 1e-4

    def __post_init__(self):
        if not 0 < self.participation_rate <= 1:
            raise ConfigError(f"participation_rate must be in (0, 1], got {self.participation_rate}")
        if self.n_clients < 1 or self.rounds < 0 or self.local_epochs < 0 or self.batch_size < 1:
            raise ConfigError("n_clients and batch_size must be >= 1; rounds and local_epochs >= 0")

    @property
    def clients_per_round(self) -> int:
        return max(1, math.floor(self.participation_rate * self.n_clients + 0.5))


@dataclass(frozen=True)
class NetworkModel:
    bandwidth_bps: float = 100e6
    latency_s: float = 0.0

    def __post_init__(self):
        if self.bandwidth_bps <= 0:
            raise ConfigError("bandwidth must be positive")

    def transfer_seconds(self, n_bytes: int) -> float:
        return n_bytes * 8 / self.bandwidth_bps + self.latency_s


@dataclass
class Client:
    client_id: int
    class_ids: list[int]
    T: ClassEmbeddingBatch
    scenes: list[Scene]
    opt: AdamWState | None = None


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    round: int
    payload: bytes
    local_loss: LossBreakdown


@dataclass
class RoundRecord:
    round: int
    selected: list[int]
    client_losses: dict[int, LossBreakdown]
    bytes_up: int
    bytes_down: int
    sim_time: float
    global_map: float | None = None
    client_maps: dict[int, float] = field(default_factory=dict)


@dataclass
class FederationResult:
    history: list[RoundRecord]
    theta: np.ndarray


def select_clients(config: FederationConfig, round_index: int, stream: RngStream) -> list[int]:
    k = config.clients_per_round
    return sorted(stream.spawn("round", round_index).sample(config.n_clients, k))


def batches(n: int, batch_size: int, stream: RngStream) -> list[list[int]]:
    order = stream.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def local_steps(model, flat, client: Client, config: FederationConfig, backbone: FrozenBackbone,
                stream: RngStream):
    """``local_epochs`` passes of shuffled mini-batches; mutates ``client.opt``."""
    if not client.scenes:
        raise ConfigError(f"client {client.client_id} has no training scenes")
    if client.opt is None:
        client.opt = AdamWState.zeros(model.size, lr=config.lr, weight_decay=config.weight_decay)
    flat = np.array(flat, dtype=np.float64)
    losses = []
    for epoch in range(config.local_epochs):
        for idx in batches(len(client.scenes), config.batch_size, stream.spawn("epoch", epoch)):
            loss, grad = loss_and_grad(model, flat, backbone, client.T,
                                       [client.scenes[i] for i in idx], client.class_ids)
            flat, client.opt = adamw_step(client.opt, flat, grad)
            losses.append(loss)
    return flat, LossBreakdown.mean(losses)


def client_local_train(model, payload: bytes, client: Client, config: FederationConfig,
                       backbone: FrozenBackbone, stream: RngStream, round_index: int = 0
                       ) -> ClientUpdate:
    flat = model.from_tensors(deserialize_tensors(payload))
    flat, loss = local_steps(model, flat, client, config, backbone, stream)
    return ClientUpdate(client.client_id, round_index, serialize_tensors(model.tensors(flat)), loss)


def aggregate(updates: Sequence[ClientUpdate]) -> list[tuple[str, np.ndarray]]:
    """Unweighted mean of the updates, summed in ascending client order."""
    if not updates:
        raise ProtocolError("cannot aggregate zero updates")
    ordered = sorted(updates, key=lambda u: u.client_id)
    decoded = [deserialize_tensors(u.payload) for u in ordered]
    layout = [(n, a.shape) for n, a in decoded[0]]
    for u, tensors in zip(ordered, decoded):
        if [(n, a.shape) for n, a in tensors] != layout:
            raise ProtocolError(f"update from client {u.client_id} has a different tensor layout")
    out = []
    for k, (name, _) in enumerate(layout):
        acc = np.zeros_like(decoded[0][k][1])
        for tensors in decoded:
            acc = acc + tensors[k][1]
        out.append((name, acc / len(decoded)))
    return out


EvalHook = Callable[[int, np.ndarray], tuple[float, dict[int, float]]]


def run_federation(config: FederationConfig, model, backbone: FrozenBackbone,
                   clients: Sequence[Client], theta0, streams: dict[str, RngStream],
                   network: NetworkModel | None = None, eval_hook: EvalHook | None = None,
                   eval_every: int = 10) -> FederationResult:
    """Run ``config.rounds`` rounds: select, distribute, train locally, aggregate.

    ``eval_hook(round, theta)`` receives the wire-precision global parameters
    every ``eval_every`` rounds and after the last round.
    """
    if len(clients) != config.n_clients:
        raise ConfigError(f"config expects {config.n_clients} clients, got {len(clients)}")
    network = network or NetworkModel()
    theta = np.array(theta0, dtype=np.float64)
    history = []
    for r in range(config.rounds):
        selected = select_clients(config, r, streams["selection"])
        broadcast = serialize_tensors(model.tensors(theta))
        updates = [client_local_train(model, broadcast, clients[i], config, backbone,
                                      streams["batching"].spawn("client", i, "round", r), r)
                   for i in selected]
        theta = model.from_tensors(aggregate(updates))
        rec = RoundRecord(
            round=r + 1,
            selected=selected,
            client_losses={u.client_id: u.local_loss for u in updates},
            bytes_up=sum(len(u.payload) for u in updates),
            bytes_down=len(broadcast) * len(selected),
            sim_time=network.transfer_seconds(len(broadcast))
            + max(network.transfer_seconds(len(u.payload)) for u in updates),
        )
        if eval_hook is not None and ((r + 1) % eval_every == 0 or r + 1 == config.rounds):
            rec.global_map, rec.client_maps = eval_hook(r + 1, quantize(theta))
        history.append(rec)
    return FederationResult(history, theta)


@dataclass(frozen=True)
class OverheadReport:
    bytes_prompt: int
    bytes_full: int
    mb_prompt: float
    mb_full: float
    megabits_full: float
    reduction_percent: float
    seconds_per_upload_prompt: float
    seconds_per_upload_full: float


def overhead_report(param_count_prompt: int, param_count_full: int, bytes_per_param: int = 4,
                    network: NetworkModel | None = None) -> OverheadReport:
    """Payload sizes (MiB), relative saving and per-upload time for two model sizes."""
    if param_count_prompt < 1 or param_count_full < 1 or bytes_per_param < 1:
        raise DomainError("parameter counts and bytes per parameter must be >= 1")
    network = network or NetworkModel()
    bp = param_count_prompt * bytes_per_param
    bf = param_count_full * bytes_per_param
    return OverheadReport(
        bytes_prompt=bp,
        bytes_full=bf,
        mb_prompt=bp / MIB,
        mb_full=bf / MIB,
        megabits_full=bf * 8 / 1e6,
        reduction_percent=100.0 * (1.0 - bp / bf),
        seconds_per_upload_prompt=network.transfer_seconds(bp),
        seconds_per_upload_full=network.transfer_seconds(bf),
    )
