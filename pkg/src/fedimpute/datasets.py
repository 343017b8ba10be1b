"""Synthetic data shaped like a multi-center clinical table, scenario
splitting (natural / non-IID), the repetition harness, and CSV ingestion.

The generator is a low-rank Gaussian factor model with a class mean shift:
x = center[label] + A @ u + noise, with A (p x rank) seeded N(0,1)/sqrt(rank).
Correlated features give imputers signal to exploit while keeping the
ground truth available for scoring.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .data import MaskedMatrix
from .errors import ConfigError, IngestionError
from .rngutil import derive_rng

DEFAULT_NATURAL_SIZES = (92, 104, 62, 53)
DEFAULT_NONIID_SIZES = (171, 77)


@dataclass(frozen=True)
class SyntheticSpec:
    """Shape and signal knobs of the synthetic cohort."""

    n_samples: int = 311
    n_features: int = 130
    latent_rank: int = 8
    class_proportions: tuple[int, ...] = (207, 104)
    class_shift: float = 3.0
    noise_std: float = 0.25
    seed: int = 0

    def __post_init__(self) -> None:
        if sum(self.class_proportions) != self.n_samples:
            raise ConfigError(
                f"class proportions {self.class_proportions} do not sum to "
                f"n_samples={self.n_samples}"
            )
        if not 1 <= self.latent_rank < self.n_features:
            raise ConfigError("latent_rank must lie in [1, n_features)")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be nonnegative")

    @property
    def n_classes(self) -> int:
        return len(self.class_proportions)


def gen_synthetic_full(spec: SyntheticSpec
                       ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """As gen_synthetic, but also returns the factor loadings (p x rank) and
    class centers (k x p) so tests can check the implied covariance exactly."""
    rng = derive_rng(spec.seed, "synthetic")
    p, r = spec.n_features, spec.latent_rank
    loadings = rng.standard_normal((p, r)) / math.sqrt(r)
    directions = rng.standard_normal((spec.n_classes, p))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    centers = directions * (spec.class_shift / math.sqrt(2.0))

    labels = np.repeat(np.arange(spec.n_classes), spec.class_proportions)
    labels = labels[rng.permutation(spec.n_samples)]
    u = rng.standard_normal((spec.n_samples, r))
    noise = rng.standard_normal((spec.n_samples, p)) * spec.noise_std
    values = centers[labels] + u @ loadings.T + noise
    return values, labels, loadings, centers


def gen_synthetic(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Complete data matrix and integer labels for the spec."""
    values, labels, _, _ = gen_synthetic_full(spec)
    return values, labels


@dataclass(frozen=True)
class ClientData:
    """One center's complete slice of the cohort."""

    client_id: str
    values: np.ndarray
    labels: np.ndarray
    indices: np.ndarray  # rows into the source matrix

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class ScenarioSplit:
    """Client datasets plus (for fixed-role scenarios) a held-out test set."""

    clients: tuple[ClientData, ...]
    test: ClientData | None
    scenario: str


def _take(data: np.ndarray, labels: np.ndarray, idx: np.ndarray, client_id: str) -> ClientData:
    idx = np.asarray(idx, dtype=int)
    return ClientData(client_id, data[idx], labels[idx], idx)


def split_natural(data: np.ndarray, labels: np.ndarray, sizes=DEFAULT_NATURAL_SIZES,
                  seed: int = 0) -> ScenarioSplit:
    """Stratified-by-label random partition into len(sizes) clients with the
    given exact sizes. The held-out client rotates in the fold harness, so
    no test set is designated here."""
    data = np.asarray(data, dtype=np.float64)
    labels = np.asarray(labels)
    n = data.shape[0]
    sizes = tuple(int(s) for s in sizes)
    if sum(sizes) != n:
        raise ConfigError(f"client sizes {sizes} do not sum to n={n}")
    rng = derive_rng(seed, "natural-split")
    capacity = np.array(sizes, dtype=int)
    assignments: list[list[int]] = [[] for _ in sizes]
    classes = np.unique(labels)
    for ci, cls in enumerate(classes):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(idx.size)]
        if ci < len(classes) - 1:
            # proportional floor allocation, topped up where capacity remains
            quota = np.floor(capacity * (idx.size / capacity.sum())).astype(int)
            quota = np.minimum(quota, capacity)
            while quota.sum() < idx.size:
                quota[np.argmax(capacity - quota)] += 1
        else:
            quota = capacity.copy()
        pos = 0
        for k, q in enumerate(quota):
            assignments[k].extend(idx[pos : pos + q].tolist())
            pos += q
        capacity = capacity - quota
    clients = tuple(
        _take(data, labels, np.sort(np.array(rows)), f"client_{k + 1}")
        for k, rows in enumerate(assignments)
    )
    return ScenarioSplit(clients=clients, test=None, scenario="natural")


def split_noniid(data: np.ndarray, labels: np.ndarray, sizes=DEFAULT_NONIID_SIZES,
                 seed: int = 0) -> ScenarioSplit:
    """Two single-class training clients plus a mixed held-out test set.

    Client 1 holds sizes[0] rows of class 0, client 2 holds sizes[1] rows of
    class 1; every remaining row of either class goes to the test set."""
    data = np.asarray(data, dtype=np.float64)
    labels = np.asarray(labels)
    n1, n2 = (int(s) for s in sizes)
    rng = derive_rng(seed, "noniid-split")
    idx0 = np.flatnonzero(labels == 0)
    idx1 = np.flatnonzero(labels == 1)
    if idx0.size <= n1 or idx1.size <= n2:
        raise ConfigError(
            f"non-IID split needs more than {n1} rows of class 0 and {n2} of "
            f"class 1; have {idx0.size} and {idx1.size}"
        )
    idx0 = idx0[rng.permutation(idx0.size)]
    idx1 = idx1[rng.permutation(idx1.size)]
    client1 = _take(data, labels, np.sort(idx0[:n1]), "client_1")
    client2 = _take(data, labels, np.sort(idx1[:n2]), "client_2")
    test_idx = np.sort(np.concatenate([idx0[n1:], idx1[n2:]]))
    test = _take(data, labels, test_idx, "test")
    return ScenarioSplit(clients=(client1, client2), test=test, scenario="noniid")


@dataclass(frozen=True)
class Run:
    """One train/test assignment produced by the repetition harness."""

    repetition: int
    fold: int
    train: tuple[ClientData, ...]
    test: ClientData
    seed: int


def crossval_runs(data: np.ndarray, labels: np.ndarray, scenario: str,
                  repetitions: int = 5, seed: int = 0,
                  natural_sizes=DEFAULT_NATURAL_SIZES,
                  noniid_sizes=DEFAULT_NONIID_SIZES):
    """Yield training runs for a scenario.

    natural: each repetition re-randomizes the 4-way split and rotates every
    client through the test role (repetitions x n_clients runs).
    noniid: client roles are fixed; one run per repetition.
    """
    if scenario == "natural":
        for rep in range(repetitions):
            split = split_natural(data, labels, natural_sizes,
                                  seed=int(derive_rng(seed, "split", rep).integers(2**63)))
            for fold, held_out in enumerate(split.clients):
                train = tuple(c for c in split.clients if c is not held_out)
                test = ClientData("test", held_out.values, held_out.labels,
                                  held_out.indices)
                run_seed = int(derive_rng(seed, "run", rep, fold).integers(2**63))
                yield Run(rep, fold, train, test, run_seed)
    elif scenario == "noniid":
        split = split_noniid(data, labels, noniid_sizes,
                             seed=int(derive_rng(seed, "split").integers(2**63)))
        for rep in range(repetitions):
            run_seed = int(derive_rng(seed, "run", rep).integers(2**63))
            yield Run(rep, 0, split.clients, split.test, run_seed)
    else:
        raise ConfigError(f"unknown scenario {scenario!r}")


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

DEFAULT_MISSING_TOKENS = ("", "NA")


def load_csv(path, missing_tokens=DEFAULT_MISSING_TOKENS) -> tuple[MaskedMatrix, list[str]]:
    """Read a rectangular numeric CSV with a header row into a MaskedMatrix.

    Cells equal to one of the missing tokens become missing; everything else
    must parse as a float."""
    tokens = set(missing_tokens)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        width = len(header)
        values: list[list[float]] = []
        mask: list[list[bool]] = []
        for i, row in enumerate(reader):
            if len(row) != width:
                raise IngestionError(
                    f"{path}: row {i + 2} has {len(row)} cells, header has {width}"
                )
            vrow, mrow = [], []
            for j, cell in enumerate(row):
                cell = cell.strip()
                if cell in tokens:
                    vrow.append(0.0)
                    mrow.append(False)
                else:
                    try:
                        vrow.append(float(cell))
                    except ValueError:
                        raise IngestionError(
                            f"{path}: unparseable cell at row {i + 2}, "
                            f"col {j + 1}: {cell!r}"
                        ) from None
                    mrow.append(True)
            values.append(vrow)
            mask.append(mrow)
    if not values:
        return MaskedMatrix(np.zeros((0, width)), np.zeros((0, width), dtype=bool)), header
    return MaskedMatrix(np.array(values), np.array(mask)), header


def save_csv(path, data: MaskedMatrix | np.ndarray, header: list[str] | None = None,
             missing_token: str = "") -> None:
    """Write values with 17 significant digits so a read-back is lossless."""
    if isinstance(data, np.ndarray):
        data = MaskedMatrix.complete(data)
    n, p = data.shape
    if header is None:
        header = [f"f{j}" for j in range(p)]
    if len(header) != p:
        raise IngestionError(f"header has {len(header)} names for {p} columns")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(n):
            writer.writerow(
                [f"{data.values[i, j]:.17g}" if data.mask[i, j] else missing_token
                 for j in range(p)]
            )


def save_labels(path, labels: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"])
        for v in np.asarray(labels).tolist():
            writer.writerow([int(v)])


def load_labels(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return np.array([int(row[0]) for row in reader])
