"""Experiment orchestration: config, arm execution, scoring, and report
assembly.

One experiment = repetitions x (split -> mask -> per-arm standardize/train/
impute -> score). Every artifact lands under the configured output
directory: report.json (byte-reproducible for a fixed config), delimited
tables and plot data, serialized models, the protocol transcript, and
rendered figures.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import numcore as nc
from .baselines import IceImputer, MeanImputer
from .data import MaskedMatrix
from .datasets import (ClientData, Run, SyntheticSpec, crossval_runs,
                       gen_synthetic, load_csv, load_labels)
from .errors import ConfigError, FedimputeError
from .evaluation import MiSpread, mi_uncertainty, normalized_mse
from .fedstd import (GlobalScaler, aggregate_moments, apply_scaler,
                     invert_scaler, local_moments)
from .federation import (AggregatorKind, ClientState, RoundPlan, Transcript,
                         run_centralized, run_local, run_standardization,
                         run_training)
from .miwae import MiwaeConfig, MiwaeModel, impute_dataset, impute_multiple, save_model
from .missingness import MaskSpec, generate_mask
from .rngutil import derive_rng

MIWAE_ARM_PREFIXES = ("fedprox", "fedavg", "scaffold", "local_cl", "centralized")
KNOWN_ARMS = ("fedprox", "fedprox_loc", "fedavg", "scaffold", "local",
              "centralized", "mean", "ice")


@dataclass(frozen=True)
class ModelSettings:
    """MiwaeConfig minus n_features (which comes from the data)."""

    latent_dim: int = 20
    hidden_units: int = 256
    k_train: int = 50
    l_test: int = 10_000
    decoder: str = "gaussian"

    def build(self, n_features: int) -> MiwaeConfig:
        return MiwaeConfig(n_features=n_features, **asdict(self))


@dataclass(frozen=True)
class PlanSettings:
    """RoundPlan minus the per-run seed, plus the FedProx strength."""

    rounds: int = 150
    local_epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-3
    fedprox_mu: float = 0.1

    def build(self, aggregator: AggregatorKind, seed: int) -> RoundPlan:
        return RoundPlan(
            rounds=self.rounds,
            local_epochs=self.local_epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            aggregator=aggregator,
            seed=seed,
        )


@dataclass(frozen=True)
class EvalSettings:
    normalization: str = "global"  # or "per_feature"
    mi_draws: int = 30
    baseline_scope: str = "pooled"  # or "local"
    impute_samples: int | None = None  # default: model l_test

    def __post_init__(self) -> None:
        if self.normalization not in ("global", "per_feature"):
            raise ConfigError(f"unknown normalization {self.normalization!r}")
        if self.baseline_scope not in ("pooled", "local"):
            raise ConfigError(f"unknown baseline_scope {self.baseline_scope!r}")


@dataclass(frozen=True)
class CsvScenario:
    """Complete (ground-truth) per-client CSVs; the harness applies masks."""

    clients: tuple[str, ...]
    test: str
    labels: str | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str = "noniid"
    arms: tuple[str, ...] = ("fedprox", "fedprox_loc", "local", "mean")
    repetitions: int = 5
    master_seed: int = 1234
    output_dir: str = "out"
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    mask: MaskSpec = field(default_factory=lambda: MaskSpec(mechanism="mar"))
    model: ModelSettings = field(default_factory=ModelSettings)
    plan: PlanSettings = field(default_factory=PlanSettings)
    evaluation: EvalSettings = field(default_factory=EvalSettings)
    figures: bool = True
    csv: CsvScenario | None = None
    natural_sizes: tuple[int, ...] = (92, 104, 62, 53)
    noniid_sizes: tuple[int, ...] = (171, 77)

    def __post_init__(self) -> None:
        if self.scenario not in ("natural", "noniid", "csv"):
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if not self.arms:
            raise ConfigError("configure at least one arm")
        for arm in self.arms:
            if arm not in KNOWN_ARMS:
                raise ConfigError(f"unknown arm {arm!r}; known: {KNOWN_ARMS}")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.scenario == "csv" and self.csv is None:
            raise ConfigError("csv scenario needs a csv: section with file paths")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["arms"] = list(self.arms)
        out["natural_sizes"] = list(self.natural_sizes)
        out["noniid_sizes"] = list(self.noniid_sizes)
        out["synthetic"]["class_proportions"] = list(self.synthetic.class_proportions)
        if self.csv is not None:
            out["csv"]["clients"] = list(self.csv.clients)
        return out

    def config_hash(self) -> str:
        payload = self.to_dict()
        payload.pop("output_dir")  # where results land must not change them
        blob = json.dumps(payload, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        kwargs: dict = {}
        for key in ("scenario", "repetitions", "master_seed", "output_dir", "figures"):
            if key in raw:
                kwargs[key] = raw.pop(key)
        if "arms" in raw:
            kwargs["arms"] = tuple(raw.pop("arms"))
        if "synthetic" in raw:
            syn = dict(raw.pop("synthetic"))
            if "class_proportions" in syn:
                syn["class_proportions"] = tuple(syn["class_proportions"])
            kwargs["synthetic"] = SyntheticSpec(**syn)
        if "mask" in raw:
            kwargs["mask"] = MaskSpec(**raw.pop("mask"))
        if "model" in raw:
            kwargs["model"] = ModelSettings(**raw.pop("model"))
        if "plan" in raw:
            kwargs["plan"] = PlanSettings(**raw.pop("plan"))
        if "evaluation" in raw:
            kwargs["evaluation"] = EvalSettings(**raw.pop("evaluation"))
        if raw.get("csv") is not None:
            csv_raw = dict(raw.pop("csv"))
            csv_raw["clients"] = tuple(csv_raw["clients"])
            kwargs["csv"] = CsvScenario(**csv_raw)
        else:
            raw.pop("csv", None)
        for key in ("natural_sizes", "noniid_sizes"):
            if key in raw:
                kwargs[key] = tuple(raw.pop(key))
        if raw:
            raise ConfigError(f"unknown config keys: {sorted(raw)}")
        return cls(**kwargs)

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        return cls.from_dict(raw)


# ---------------------------------------------------------------------------
# Arm execution
# ---------------------------------------------------------------------------


@dataclass
class RunData:
    """Masked view of one run: truth, masked data and ids, per dataset."""

    train_truth: list[np.ndarray]
    train_masked: list[MaskedMatrix]
    train_ids: list[str]
    test_truth: np.ndarray
    test_masked: MaskedMatrix
    eval_scaler: GlobalScaler  # federated scaler of the masked train data


@dataclass
class ArmOutput:
    completions: dict[str, np.ndarray]  # dataset id -> completed matrix (original units)
    transcript: Transcript | None = None
    model: MiwaeModel | None = None
    model_scaler: GlobalScaler | None = None
    mi: MiSpread | None = None
    mi_example: dict | None = None


def _mask_run(run: Run, mask_spec: MaskSpec, master_seed: int) -> RunData:
    train_masked, train_truth, train_ids = [], [], []
    for client in run.train:
        rng = derive_rng(master_seed, "mask", run.repetition, run.fold, client.client_id)
        mask = generate_mask(client.values, mask_spec, rng)
        train_masked.append(MaskedMatrix(client.values, mask))
        train_truth.append(client.values)
        train_ids.append(client.client_id)
    rng = derive_rng(master_seed, "mask", run.repetition, run.fold, "test")
    test_mask = generate_mask(run.test.values, mask_spec, rng)
    test_masked = MaskedMatrix(run.test.values, test_mask)
    eval_scaler = aggregate_moments([local_moments(m) for m in train_masked])
    return RunData(
        train_truth=train_truth,
        train_masked=train_masked,
        train_ids=train_ids,
        test_truth=run.test.values,
        test_masked=test_masked,
        eval_scaler=eval_scaler,
    )


def _local_scaler(data: MaskedMatrix) -> GlobalScaler:
    return aggregate_moments([local_moments(data)])


def _pooled(masked: list[MaskedMatrix]) -> MaskedMatrix:
    return MaskedMatrix(
        np.vstack([m.values for m in masked]), np.vstack([m.mask for m in masked])
    )


def _impute_all(model: MiwaeModel, rd: RunData, scalers: dict[str, GlobalScaler],
                l: int, seed_key: tuple) -> dict[str, np.ndarray]:
    """Impute every dataset in its scaler's space, then map back to
    original units."""
    out: dict[str, np.ndarray] = {}
    datasets = list(zip(rd.train_ids, rd.train_masked)) + [("test", rd.test_masked)]
    for ds_id, masked in datasets:
        scaler = scalers[ds_id]
        std = apply_scaler(masked, scaler)
        seed = int(derive_rng(*seed_key, ds_id).integers(2**63))
        completed_std = impute_dataset(model, std, l, seed)
        out[ds_id] = invert_scaler(completed_std, scaler)
    return out


def _mi_for_arm(model: MiwaeModel, rd: RunData, test_scaler: GlobalScaler,
                l: int, m: int, seed_key: tuple) -> tuple[MiSpread, dict | None]:
    std_test = apply_scaler(rd.test_masked, test_scaler)
    seed = int(derive_rng(*seed_key, "mi").integers(2**63))
    spread = mi_uncertainty(model, std_test, l, m, seed)
    example = None
    rows_with_missing = np.flatnonzero(~std_test.mask.all(axis=1))
    if rows_with_missing.size:
        i = int(rows_with_missing[0])
        draws = impute_multiple(model, std_test.values[i], std_test.mask[i], l, m,
                                derive_rng(*seed_key, "mi-example"))
        example = {
            "row": i,
            "mask": std_test.mask[i],
            "truth_std": (rd.test_truth[i] - test_scaler.mu) / test_scaler.sigma,
            "draws_std": draws.completions,
        }
    return spread, example


def _run_arm(arm: str, rd: RunData, config: ExperimentConfig, run: Run) -> ArmOutput:
    cfg = config.model.build(rd.test_masked.n_cols)
    eval_l = config.evaluation.impute_samples or cfg.l_test
    seed_key = (config.master_seed, "arm", run.repetition, run.fold, arm)
    train_seed = int(derive_rng(*seed_key, "train").integers(2**63))

    if arm in ("fedprox", "fedavg", "scaffold", "centralized"):
        aggregator = {
            "fedprox": AggregatorKind.fedprox(config.plan.fedprox_mu),
            "fedavg": AggregatorKind.fedavg(),
            "scaffold": AggregatorKind.scaffold(),
            "centralized": AggregatorKind.fedavg(),
        }[arm]
        plan = config.plan.build(aggregator, train_seed)
        transcript = Transcript()
        scaler = run_standardization(
            list(zip(rd.train_ids, rd.train_masked)), transcript
        )
        if arm == "centralized":
            pooled = apply_scaler(_pooled(rd.train_masked), scaler)
            params, transcript = run_centralized(
                pooled, plan, cfg, n_clients=len(rd.train_masked), transcript=transcript
            )
        else:
            clients = [
                ClientState(cid, apply_scaler(m, scaler))
                for cid, m in zip(rd.train_ids, rd.train_masked)
            ]
            params, transcript = run_training(clients, plan, cfg, transcript)
        model = MiwaeModel(cfg, params)
        scalers = {ds_id: scaler for ds_id in rd.train_ids + ["test"]}
        completions = _impute_all(model, rd, scalers, eval_l, seed_key)
        mi, example = _mi_for_arm(model, rd, scaler, eval_l,
                                  config.evaluation.mi_draws, seed_key)
        return ArmOutput(completions, transcript, model, scaler, mi, example)

    if arm == "fedprox_loc":
        # stage 1 skipped: every dataset is standardized with its own moments
        plan = config.plan.build(AggregatorKind.fedprox(config.plan.fedprox_mu),
                                 train_seed)
        scalers = {cid: _local_scaler(m) for cid, m in zip(rd.train_ids, rd.train_masked)}
        scalers["test"] = _local_scaler(rd.test_masked)
        clients = [
            ClientState(cid, apply_scaler(m, scalers[cid]))
            for cid, m in zip(rd.train_ids, rd.train_masked)
        ]
        params, transcript = run_training(clients, plan, cfg)
        model = MiwaeModel(cfg, params)
        completions = _impute_all(model, rd, scalers, eval_l, seed_key)
        mi, example = _mi_for_arm(model, rd, scalers["test"], eval_l,
                                  config.evaluation.mi_draws, seed_key)
        return ArmOutput(completions, transcript, model, None, mi, example)

    if arm.startswith("local_cl_"):
        cid = arm[len("local_cl_"):]
        if cid not in rd.train_ids:
            raise ConfigError(f"arm {arm!r}: no training client {cid!r} in this run")
        idx = rd.train_ids.index(cid)
        plan = config.plan.build(AggregatorKind.fedavg(), train_seed)
        scalers = {c: _local_scaler(m) for c, m in zip(rd.train_ids, rd.train_masked)}
        scalers["test"] = _local_scaler(rd.test_masked)
        client = ClientState(cid, apply_scaler(rd.train_masked[idx], scalers[cid]))
        params, transcript = run_local(client, plan, cfg)
        model = MiwaeModel(cfg, params)
        completions = _impute_all(model, rd, scalers, eval_l, seed_key)
        mi, example = _mi_for_arm(model, rd, scalers["test"], eval_l,
                                  config.evaluation.mi_draws, seed_key)
        return ArmOutput(completions, transcript, model, None, mi, example)

    if arm == "mean":
        completions = {}
        if config.evaluation.baseline_scope == "pooled":
            imputer = MeanImputer.fit(_pooled(rd.train_masked))
            for ds_id, masked in zip(rd.train_ids + ["test"],
                                     rd.train_masked + [rd.test_masked]):
                completions[ds_id] = imputer.impute(masked)
        else:
            for ds_id, masked in zip(rd.train_ids + ["test"],
                                     rd.train_masked + [rd.test_masked]):
                completions[ds_id] = MeanImputer.fit(masked).impute(masked)
        return ArmOutput(completions)

    if arm == "ice":
        completions = {}
        if config.evaluation.baseline_scope == "pooled":
            scaler = rd.eval_scaler
            pooled_std = apply_scaler(_pooled(rd.train_masked), scaler)
            imputer = IceImputer.fit(pooled_std)
            for ds_id, masked in zip(rd.train_ids + ["test"],
                                     rd.train_masked + [rd.test_masked]):
                std = apply_scaler(masked, scaler)
                completions[ds_id] = invert_scaler(imputer.impute(std), scaler)
        else:
            for ds_id, masked in zip(rd.train_ids + ["test"],
                                     rd.train_masked + [rd.test_masked]):
                scaler = _local_scaler(masked)
                std = apply_scaler(masked, scaler)
                completions[ds_id] = invert_scaler(
                    IceImputer.fit(std).impute(std), scaler
                )
        return ArmOutput(completions)

    raise ConfigError(f"unknown arm {arm!r}")


def _expand_arms(arms: tuple[str, ...], train_ids: list[str]) -> list[str]:
    out: list[str] = []
    for arm in arms:
        if arm == "local":
            out.extend(f"local_cl_{cid}" for cid in train_ids)
        else:
            out.append(arm)
    return out


# ---------------------------------------------------------------------------
# Report assembly
# ---------------------------------------------------------------------------


class ImputationReport:
    """In-memory report; serializes to a deterministic report.json."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.arms: dict[str, dict] = {}
        self.n_runs = 0

    def arm_entry(self, arm: str) -> dict:
        return self.arms.setdefault(
            arm, {"datasets": {}, "errors": [], "mi": None}
        )

    def add_score(self, arm: str, dataset: str, repetition: int, fold: int,
                  mse: float) -> None:
        cell = self.arm_entry(arm)["datasets"].setdefault(dataset, {"scores": []})
        cell["scores"].append(
            {"repetition": repetition, "fold": fold, "mse": mse}
        )

    def add_error(self, arm: str, repetition: int, fold: int, message: str) -> None:
        self.arm_entry(arm)["errors"].append(
            {"repetition": repetition, "fold": fold, "message": message}
        )

    def add_mi(self, arm: str, repetition: int, fold: int, spread: MiSpread) -> None:
        entry = self.arm_entry(arm)
        if entry["mi"] is None:
            entry["mi"] = {"runs": []}
        entry["mi"]["runs"].append(
            {
                "repetition": repetition,
                "fold": fold,
                "posterior_std_median": spread.median_posterior_std(),
                "prior_std_median": spread.median_prior_std(),
                "degenerate": spread.degenerate,
            }
        )

    @property
    def has_failures(self) -> bool:
        return any(entry["errors"] for entry in self.arms.values())

    def scores(self, arm: str, dataset: str) -> list[float]:
        cell = self.arms.get(arm, {}).get("datasets", {}).get(dataset, {})
        return [s["mse"] for s in cell.get("scores", [])]

    def to_dict(self) -> dict:
        arms_out: dict[str, dict] = {}
        for arm, entry in self.arms.items():
            datasets = {}
            for ds, cell in entry["datasets"].items():
                scores = [s["mse"] for s in cell["scores"]]
                datasets[ds] = {
                    "scores": cell["scores"],
                    "mean": float(np.mean(scores)) if scores else None,
                    "std": float(np.std(scores, ddof=1)) if len(scores) > 1 else None,
                }
            mi = entry["mi"]
            if mi is not None:
                post = [r["posterior_std_median"] for r in mi["runs"]]
                prior = [r["prior_std_median"] for r in mi["runs"]]
                mi = {
                    "runs": mi["runs"],
                    "posterior_std_median": float(np.mean(post)),
                    "prior_std_median": float(np.mean(prior)),
                }
            arms_out[arm] = {
                "status": "failed" if entry["errors"] else "ok",
                "errors": entry["errors"],
                "datasets": datasets,
                "mi": mi,
            }
        return {
            "schema_version": 1,
            "provenance": {
                "config_hash": self.config.config_hash(),
                "master_seed": self.config.master_seed,
                "package_version": __version__,
                "config": self.config.to_dict(),
            },
            "scenario": self.config.scenario,
            "n_runs": self.n_runs,
            "arms": arms_out,
            # slot for scores computed outside this package (e.g. an rf arm)
            "external_scores": {},
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)
            fh.write("\n")


# ---------------------------------------------------------------------------
# The orchestrator
# ---------------------------------------------------------------------------


def _load_scenario_data(config: ExperimentConfig):
    if config.scenario in ("natural", "noniid"):
        return gen_synthetic(config.synthetic)
    # csv scenario: fixed complete datasets; labels unused downstream
    clients = []
    for path in config.csv.clients:
        masked, _ = load_csv(path)
        if not masked.mask.all():
            raise ConfigError(f"{path}: csv scenario needs complete ground-truth data")
        clients.append(masked.values)
    test_masked, _ = load_csv(config.csv.test)
    if not test_masked.mask.all():
        raise ConfigError(f"{config.csv.test}: csv scenario needs complete ground-truth data")
    return clients, test_masked.values


def _csv_runs(config: ExperimentConfig, clients: list[np.ndarray],
              test: np.ndarray):
    train = tuple(
        ClientData(f"client_{i + 1}", values, np.zeros(len(values), dtype=int),
                   np.arange(len(values)))
        for i, values in enumerate(clients)
    )
    test_cd = ClientData("test", test, np.zeros(len(test), dtype=int),
                         np.arange(len(test)))
    for rep in range(config.repetitions):
        seed = int(derive_rng(config.master_seed, "run", rep).integers(2**63))
        yield Run(rep, 0, train, test_cd, seed)


def _iter_runs(config: ExperimentConfig):
    if config.scenario == "csv":
        clients, test = _load_scenario_data(config)
        yield from _csv_runs(config, clients, test)
        return
    data, labels = _load_scenario_data(config)
    yield from crossval_runs(
        data, labels, config.scenario, repetitions=config.repetitions,
        seed=config.master_seed, natural_sizes=config.natural_sizes,
        noniid_sizes=config.noniid_sizes,
    )


def run_experiment(config: ExperimentConfig, progress=None) -> ImputationReport:
    """Execute every configured arm over every run and write all artifacts.

    Arm failures are recorded per cell and do not stop the experiment."""
    nc.enable_malloc_reuse()
    outdir = Path(config.output_dir)
    for sub in ("tables", "plotdata", "models", "figures"):
        (outdir / sub).mkdir(parents=True, exist_ok=True)

    report = ImputationReport(config)
    mode = config.evaluation.normalization
    round_rows: list[tuple] = []
    mi_cell_rows: list[tuple] = []
    mi_example = None

    with open(outdir / "transcript.jsonl", "w") as transcript_fh:
        for run in _iter_runs(config):
            report.n_runs += 1
            rd = _mask_run(run, config.mask, config.master_seed)
            arms = _expand_arms(config.arms, rd.train_ids)
            mu, sigma = rd.eval_scaler.mu, rd.eval_scaler.sigma
            datasets = {
                ds_id: (truth, masked)
                for ds_id, truth, masked in zip(
                    rd.train_ids + ["test"],
                    rd.train_truth + [rd.test_truth],
                    rd.train_masked + [rd.test_masked],
                )
            }
            for arm in arms:
                if progress is not None:
                    progress(f"rep {run.repetition} fold {run.fold}: {arm}")
                try:
                    output = _run_arm(arm, rd, config, run)
                except FedimputeError as exc:
                    report.add_error(arm, run.repetition, run.fold, str(exc))
                    continue
                for ds_id, (truth, masked) in datasets.items():
                    eval_mask = ~masked.mask
                    score = normalized_mse(
                        (output.completions[ds_id] - mu) / sigma,
                        (truth - mu) / sigma,
                        eval_mask,
                        mode=mode,
                    )
                    report.add_score(arm, ds_id, run.repetition, run.fold, score)
                if output.transcript is not None:
                    context = {"arm": arm, "repetition": run.repetition,
                               "fold": run.fold}
                    output.transcript.write_jsonl(transcript_fh, context)
                    for rnd, client, loss, n in output.transcript.round_metrics():
                        round_rows.append(
                            (arm, run.repetition, run.fold, rnd, client, loss, n)
                        )
                if output.model is not None:
                    save_model(
                        output.model,
                        outdir / "models" /
                        f"{arm}_rep{run.repetition}_fold{run.fold}.bin",
                        scaler=output.model_scaler,
                    )
                if output.mi is not None:
                    report.add_mi(arm, run.repetition, run.fold, output.mi)
                    spread = output.mi
                    for r, f_, po, pr in zip(spread.cell_rows, spread.cell_features,
                                             spread.posterior_std, spread.prior_std):
                        mi_cell_rows.append(
                            (arm, run.repetition, run.fold, int(r), int(f_),
                             float(po), float(pr))
                        )
                if mi_example is None and output.mi_example is not None:
                    mi_example = {"arm": arm, **output.mi_example}

    report.write_json(outdir / "report.json")
    _write_tables(report, outdir)
    _write_plotdata(report, outdir, round_rows, mi_cell_rows, mi_example)
    if config.figures:
        from . import plots

        plots.render_report_figures(report, outdir, round_rows, mi_cell_rows,
                                    mi_example)
    return report


def _write_tables(report: ImputationReport, outdir: Path) -> None:
    data = report.to_dict()
    with open(outdir / "tables" / "mse_summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scenario", "arm", "dataset", "n_runs", "mse_mean", "mse_std"])
        for arm in sorted(data["arms"]):
            for ds in sorted(data["arms"][arm]["datasets"]):
                cell = data["arms"][arm]["datasets"][ds]
                writer.writerow([
                    data["scenario"], arm, ds, len(cell["scores"]),
                    _fmt(cell["mean"]), _fmt(cell["std"]),
                ])
    with open(outdir / "tables" / "mse_runs.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["arm", "dataset", "repetition", "fold", "mse"])
        for arm in sorted(data["arms"]):
            for ds in sorted(data["arms"][arm]["datasets"]):
                for s in data["arms"][arm]["datasets"][ds]["scores"]:
                    writer.writerow([arm, ds, s["repetition"], s["fold"],
                                     _fmt(s["mse"])])
    with open(outdir / "tables" / "mi_summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["arm", "repetition", "fold", "posterior_std_median",
                         "prior_std_median"])
        for arm in sorted(data["arms"]):
            mi = data["arms"][arm]["mi"]
            if mi is None:
                continue
            for r in mi["runs"]:
                writer.writerow([arm, r["repetition"], r["fold"],
                                 _fmt(r["posterior_std_median"]),
                                 _fmt(r["prior_std_median"])])


def _write_plotdata(report: ImputationReport, outdir: Path, round_rows,
                    mi_cell_rows, mi_example) -> None:
    data = report.to_dict()
    with open(outdir / "plotdata" / "mse_distribution.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["arm", "dataset", "repetition", "fold", "mse"])
        for arm in sorted(data["arms"]):
            for ds in sorted(data["arms"][arm]["datasets"]):
                for s in data["arms"][arm]["datasets"][ds]["scores"]:
                    writer.writerow([arm, ds, s["repetition"], s["fold"],
                                     _fmt(s["mse"])])
    with open(outdir / "plotdata" / "round_losses.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["arm", "repetition", "fold", "round", "client",
                         "mean_loss", "n"])
        for row in round_rows:
            writer.writerow([row[0], row[1], row[2], row[3], row[4],
                             _fmt(row[5]), row[6]])
    with open(outdir / "plotdata" / "mi_spread_hist.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["arm", "repetition", "fold", "row", "feature",
                         "posterior_std", "prior_std"])
        for row in mi_cell_rows:
            writer.writerow([row[0], row[1], row[2], row[3], row[4],
                             _fmt(row[5]), _fmt(row[6])])
    if mi_example is not None:
        with open(outdir / "plotdata" / "mi_example.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["feature", "observed", "truth_std"]
                            + [f"draw_{i}" for i in
                               range(mi_example["draws_std"].shape[0])])
            p = mi_example["draws_std"].shape[1]
            for j in range(p):
                writer.writerow(
                    [j, int(mi_example["mask"][j]), _fmt(mi_example["truth_std"][j])]
                    + [_fmt(v) for v in mi_example["draws_std"][:, j]]
                )


def _fmt(x) -> str:
    return "" if x is None else f"{x:.10g}"
