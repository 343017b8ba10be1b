"""In-process multi-client training simulator: R rounds of E local epochs
with FedAvg, FedProx or Scaffold aggregation, plus a federated
standardization round and a complete protocol transcript.

Everything is deterministic under a fixed plan seed: clients are visited in
id order, minibatch shuffling and latent draws derive from
(seed, round, client, epoch), and the transcript never carries wall-clock
time. Only parameter vectors, control variates and moment summaries appear
as payloads; raw data rows never leave a client.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import numcore as nc
from .data import MaskedMatrix
from .errors import ConfigError, ProtocolError
from .fedstd import GlobalScaler, MomentSummary, aggregate_moments, local_moments
from .miwae import MiwaeConfig, MiwaeModel, miwae_bound
from .rngutil import derive_rng


@dataclass(frozen=True)
class AggregatorKind:
    """FedAvg, FedProx(mu) or Scaffold."""

    kind: str
    mu: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("fedavg", "fedprox", "scaffold"):
            raise ConfigError(f"unknown aggregator {self.kind!r}")
        if self.mu < 0:
            raise ConfigError("FedProx mu must be nonnegative")

    @classmethod
    def fedavg(cls) -> "AggregatorKind":
        return cls("fedavg")

    @classmethod
    def fedprox(cls, mu: float) -> "AggregatorKind":
        return cls("fedprox", mu)

    @classmethod
    def scaffold(cls) -> "AggregatorKind":
        return cls("scaffold")


@dataclass(frozen=True)
class RoundPlan:
    """Federated training schedule and local-optimizer knobs."""

    rounds: int = 150
    local_epochs: int = 10
    batch_size: int = 64
    aggregator: AggregatorKind = field(default_factory=lambda: AggregatorKind.fedprox(0.1))
    seed: int = 0
    learning_rate: float = 1e-3

    def __post_init__(self) -> None:
        if self.rounds < 1 or self.local_epochs < 1:
            raise ConfigError("rounds and local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be nonnegative")
        if self.aggregator.kind == "scaffold" and self.learning_rate == 0:
            raise ConfigError("Scaffold control updates divide by the learning rate")


@dataclass
class ClientState:
    """One center: standardized local data plus persistent optimizer state."""

    client_id: str
    data: MaskedMatrix
    adam: nc.AdamState | None = None
    control: np.ndarray | None = None  # Scaffold control variate

    @property
    def n_rows(self) -> int:
        return self.data.n_rows


@dataclass
class LocalUpdate:
    params: nc.ParamVector
    n: int
    epoch_losses: list[float]
    control: np.ndarray | None = None


class Transcript:
    """Ordered event log of one protocol execution."""

    def __init__(self) -> None:
        self.events: list[dict] = []

    def append(self, **event) -> None:
        self.events.append(event)

    def count(self, name: str) -> int:
        return sum(1 for e in self.events if e["event"] == name)

    def round_metrics(self) -> list[tuple[int, str, float, int]]:
        """(round, client, mean_loss, n) rows from client updates."""
        rows = []
        for e in self.events:
            if e["event"] == "client_update":
                mean_loss = float(np.mean(e["epoch_losses"]))
                rows.append((e["round"], e["client"], mean_loss, e["n"]))
        return rows

    def write_jsonl(self, fh, context: dict | None = None) -> None:
        for e in self.events:
            rec = {**(context or {}), **e}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def write_round_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["round", "client", "mean_loss", "n"])
            writer.writerows(self.round_metrics())


def _payload(kind: str, values: np.ndarray) -> dict:
    data = np.ascontiguousarray(values, dtype="<f8").tobytes()
    return {
        "kind": kind,
        "size": int(values.size),
        "sha256": hashlib.sha256(data).hexdigest(),
    }


# ---------------------------------------------------------------------------
# Stage 1: federated standardization
# ---------------------------------------------------------------------------


def run_standardization(named_data: list[tuple[str, MaskedMatrix]],
                        transcript: Transcript) -> GlobalScaler:
    """One upload and one broadcast per client; returns the exact pooled
    scaler."""
    summaries: list[MomentSummary] = []
    for client_id, data in named_data:
        summary = local_moments(data)
        summaries.append(summary)
        transcript.append(
            event="stage1_upload", client=client_id, moments=summary.to_json_dict()
        )
    scaler = aggregate_moments(summaries)
    for client_id, _ in named_data:
        transcript.append(
            event="stage1_broadcast", client=client_id, scaler=scaler.to_json_dict()
        )
    return scaler


# ---------------------------------------------------------------------------
# Stage 2: federated bound optimization
# ---------------------------------------------------------------------------


def local_update(client: ClientState, global_params: nc.ParamVector, plan: RoundPlan,
                 config: MiwaeConfig, round_idx: int,
                 server_control: np.ndarray | None = None) -> LocalUpdate:
    """E epochs of minibatch Adam on the bound, with the aggregator's local
    modifications (FedProx proximal term, Scaffold gradient correction)."""
    if client.n_rows < 1:
        raise ConfigError(f"client {client.client_id!r} has no rows")
    n = client.n_rows
    layout = global_params.layout
    if client.adam is None:
        client.adam = nc.AdamState.fresh(len(global_params), lr=plan.learning_rate)
    scaffold = plan.aggregator.kind == "scaffold"
    if scaffold and client.control is None:
        client.control = np.zeros(len(global_params))
    prox_mu = plan.aggregator.mu if plan.aggregator.kind == "fedprox" else 0.0
    w_global = global_params.values

    params = global_params
    shell = MiwaeModel(config, params)
    steps = 0
    epoch_losses: list[float] = []
    for epoch in range(plan.local_epochs):
        rng = derive_rng(plan.seed, "local", round_idx, client.client_id, epoch)
        order = rng.permutation(n)
        batch_losses: list[float] = []
        for start in range(0, n, plan.batch_size):
            rows = order[start : start + plan.batch_size]
            batch = client.data.subset(rows)
            tape = nc.GradTape()
            w = tape.leaf(params.values)
            loss = miwae_bound(shell, batch, config.k_train, rng, params=w)
            batch_losses.append(float(loss.value))
            if prox_mu > 0.0:
                drift = nc.add(w, -w_global)
                loss = nc.add(loss, nc.mul(nc.reduce_sum(nc.square(drift)), prox_mu / 2.0))
            grad = tape.gradient(loss, w)
            if scaffold:
                grad = grad + server_control - client.control
            params = nc.adam_step(client.adam, params, nc.ParamVector(grad, layout))
            shell.params = params
            steps += 1
        epoch_losses.append(float(np.mean(batch_losses)))

    control = None
    if scaffold:
        # control update option II: c_i <- c_i - c + (w_global - w_local)/(steps * lr)
        client.control = (
            client.control
            - server_control
            + (w_global - params.values) / (steps * plan.learning_rate)
        )
        control = client.control
    return LocalUpdate(params=params, n=n, epoch_losses=epoch_losses, control=control)


def aggregate(updates: list[tuple[nc.ParamVector, int]],
              kind: AggregatorKind) -> nc.ParamVector:
    """Sample-size-weighted average of client parameters."""
    if not updates:
        raise ProtocolError("nothing to aggregate")
    layout = updates[0][0].layout
    for pv, _ in updates:
        if pv.layout != layout:
            raise ProtocolError("client update layouts differ")
    total = float(sum(n for _, n in updates))
    out = np.zeros(layout.size)
    for pv, n in updates:
        out += (n / total) * pv.values
    return nc.ParamVector(out, layout)


def _weighted_control(controls: list[np.ndarray], ns: list[int]) -> np.ndarray:
    total = float(sum(ns))
    out = np.zeros_like(controls[0])
    for c, n in zip(controls, ns):
        out += (n / total) * c
    return out


def run_training(clients: list[ClientState], plan: RoundPlan, config: MiwaeConfig,
                 transcript: Transcript | None = None,
                 init_params: nc.ParamVector | None = None
                 ) -> tuple[nc.ParamVector, Transcript]:
    """Execute broadcast -> local update x C -> aggregate, R times."""
    if not clients:
        raise ConfigError("need at least one client")
    for c in clients:
        if c.n_rows < 1:
            raise ConfigError(f"client {c.client_id!r} has no rows")
        if c.data.n_cols != config.n_features:
            raise ConfigError(
                f"client {c.client_id!r} has {c.data.n_cols} features, "
                f"model expects {config.n_features}"
            )
    ids = [c.client_id for c in clients]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate client ids: {ids}")
    transcript = transcript if transcript is not None else Transcript()
    ordered = sorted(clients, key=lambda c: c.client_id)
    if init_params is None:
        params = MiwaeModel.init(config, derive_rng(plan.seed, "init")).params
    else:
        params = init_params
    scaffold = plan.aggregator.kind == "scaffold"
    server_control = np.zeros(len(params)) if scaffold else None

    for round_idx in range(1, plan.rounds + 1):
        transcript.append(
            event="broadcast", round=round_idx, payload=_payload("params", params.values)
        )
        updates: list[tuple[nc.ParamVector, int]] = []
        controls: list[np.ndarray] = []
        for client in ordered:
            upd = local_update(client, params, plan, config, round_idx, server_control)
            record = {
                "event": "client_update",
                "round": round_idx,
                "client": client.client_id,
                "n": upd.n,
                "epoch_losses": upd.epoch_losses,
                "payload": _payload("params", upd.params.values),
            }
            if scaffold:
                record["control_payload"] = _payload("control", upd.control)
                controls.append(upd.control)
            transcript.append(**record)
            updates.append((upd.params, upd.n))
        params = aggregate(updates, plan.aggregator)
        agg_event = {
            "event": "aggregation",
            "round": round_idx,
            "payload": _payload("params", params.values),
            "weights": {c.client_id: u[1] for c, u in zip(ordered, updates)},
        }
        if scaffold:
            server_control = _weighted_control(controls, [u[1] for u in updates])
            agg_event["control_payload"] = _payload("control", server_control)
        transcript.append(**agg_event)
    return params, transcript


def run_local(client: ClientState, plan: RoundPlan, config: MiwaeConfig,
              transcript: Transcript | None = None
              ) -> tuple[nc.ParamVector, Transcript]:
    """Single-site training arm: one round of rounds*local_epochs epochs."""
    solo_plan = replace(plan, rounds=1, local_epochs=plan.rounds * plan.local_epochs)
    return run_training([client], solo_plan, config, transcript)


def run_centralized(pooled: MaskedMatrix, plan: RoundPlan, config: MiwaeConfig,
                    n_clients: int, transcript: Transcript | None = None
                    ) -> tuple[nc.ParamVector, Transcript]:
    """Benchmark arm: pooled single-site training for rounds*n_clients rounds
    of local_epochs epochs (rounds*epochs*n_clients epochs in total)."""
    if n_clients < 1:
        raise ConfigError("n_clients must be >= 1")
    pooled_plan = replace(plan, rounds=plan.rounds * n_clients)
    client = ClientState("pooled", pooled)
    return run_training([client], pooled_plan, config, transcript)
