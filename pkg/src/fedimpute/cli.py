"""Command-line interface.

Subcommands:
  run     execute an experiment from a YAML config
  impute  complete a CSV with a trained model file
  gen     generate a synthetic scenario (data, masks, manifest)
  score   normalized MSE of an imputed CSV against ground truth
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import numcore as nc
from .data import MaskedMatrix
from .datasets import (SyntheticSpec, gen_synthetic, load_csv, save_csv,
                       save_labels, split_natural, split_noniid)
from .errors import FedimputeError
from .evaluation import normalized_mse
from .experiment import ExperimentConfig, run_experiment
from .fedstd import apply_scaler, invert_scaler
from .miwae import impute_dataset, impute_multiple, load_model
from .missingness import MaskSpec, generate_mask, load_mask, save_mask
from .rngutil import derive_rng

SEED_ENV_VAR = "FEDIMPUTE_SEED"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedimpute",
        description="Federated standardization, imputation and evaluation "
                    "for incomplete tabular data.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment from a YAML config")
    p_run.add_argument("--config", required=True, help="experiment config (YAML)")
    p_run.add_argument("--output", help="override the config's output directory")
    p_run.add_argument("--seed", type=int, help="override the master seed")
    p_run.add_argument("--no-figures", action="store_true",
                       help="skip figure rendering")
    p_run.add_argument("--quiet", action="store_true", help="no progress output")

    p_imp = sub.add_parser("impute", help="complete a CSV with a trained model")
    p_imp.add_argument("--model", required=True, help="model file (.bin)")
    p_imp.add_argument("--data", required=True, help="input CSV with missing cells")
    p_imp.add_argument("--out", required=True, help="output CSV")
    p_imp.add_argument("--multiple", type=int, metavar="M",
                       help="write M posterior draws per row (long format with a "
                            "draw column) instead of one completion")
    p_imp.add_argument("--samples", type=int,
                       help="importance samples per row (default: model l_test)")
    p_imp.add_argument("--seed", type=int, default=0)

    p_gen = sub.add_parser("gen", help="generate a synthetic scenario")
    p_gen.add_argument("--spec", required=True, help="generator spec (YAML)")
    p_gen.add_argument("--out", help="output directory (overrides spec)")

    p_sc = sub.add_parser("score", help="score an imputed CSV")
    p_sc.add_argument("--truth", required=True, help="complete ground-truth CSV")
    p_sc.add_argument("--imputed", required=True, help="completed CSV")
    p_sc.add_argument("--mask", required=True,
                      help="0/1 observedness CSV; cells with 0 are scored")
    p_sc.add_argument("--per-feature", action="store_true",
                      help="per-feature normalization instead of global")
    return parser


def _cmd_run(args) -> int:
    config = ExperimentConfig.from_yaml(args.config)
    if args.output:
        config = replace(config, output_dir=args.output)
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        config = replace(config, master_seed=int(env_seed))
    if args.seed is not None:
        config = replace(config, master_seed=args.seed)
    if args.no_figures:
        config = replace(config, figures=False)
    progress = None if args.quiet else lambda msg: print(f"[fedimpute] {msg}", flush=True)
    report = run_experiment(config, progress=progress)
    outdir = Path(config.output_dir)
    print(f"report: {outdir / 'report.json'}")
    if report.has_failures:
        failed = [a for a, e in report.arms.items() if e["errors"]]
        print(f"FAILED arms: {', '.join(sorted(failed))}", file=sys.stderr)
        return 1
    return 0


def _cmd_impute(args) -> int:
    model, scaler = load_model(args.model)
    masked, header = load_csv(args.data)
    if masked.n_cols != model.config.n_features:
        print(
            f"error: data has {masked.n_cols} columns, model expects "
            f"{model.config.n_features}", file=sys.stderr,
        )
        return 2
    samples = args.samples or model.config.l_test
    work = apply_scaler(masked, scaler) if scaler is not None else masked
    if args.multiple is None:
        completed = impute_dataset(model, work, samples, args.seed)
        if scaler is not None:
            completed = invert_scaler(completed, scaler)
        save_csv(args.out, completed, header)
    else:
        m = args.multiple
        draws = np.empty((m, masked.n_rows, masked.n_cols))
        for i in range(work.n_rows):
            if work.mask[i].all():
                draws[:, i, :] = work.values[i]
                continue
            rng = derive_rng(args.seed, "impute-row", i)
            d = impute_multiple(model, work.values[i], work.mask[i], samples, m, rng)
            draws[:, i, :] = d.completions
        if scaler is not None:
            draws = invert_scaler(draws.reshape(-1, masked.n_cols), scaler).reshape(draws.shape)
        _write_draws_csv(args.out, draws, header)
    print(f"wrote {args.out}")
    return 0


def _write_draws_csv(path, draws: np.ndarray, header: list[str]) -> None:
    import csv as _csv

    with open(path, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["draw"] + header)
        m, n, p = draws.shape
        for k in range(m):
            for i in range(n):
                writer.writerow([k] + [f"{v:.17g}" for v in draws[k, i]])


def _cmd_gen(args) -> int:
    with open(args.spec) as fh:
        raw = yaml.safe_load(fh) or {}
    outdir = Path(args.out or raw.get("out", "generated"))
    outdir.mkdir(parents=True, exist_ok=True)
    syn = raw.get("synthetic", {})
    if "class_proportions" in syn:
        syn["class_proportions"] = tuple(syn["class_proportions"])
    spec = SyntheticSpec(**syn)
    mask_spec = MaskSpec(**raw.get("mask", {})) if "mask" in raw else None
    scenario = raw.get("scenario", "none")
    seed = int(raw.get("seed", 0))

    values, labels = gen_synthetic(spec)
    save_csv(outdir / "truth.csv", values)
    save_labels(outdir / "labels.csv", labels)
    manifest: dict = {
        "scenario": scenario,
        "seed": seed,
        "truth": "truth.csv",
        "labels": "labels.csv",
        "datasets": [],
    }

    if scenario == "natural":
        split = split_natural(values, labels, seed=seed)
        groups = [(c.client_id, "client", c) for c in split.clients]
    elif scenario == "noniid":
        split = split_noniid(values, labels, seed=seed)
        groups = [(c.client_id, "client", c) for c in split.clients]
        groups.append((split.test.client_id, "test", split.test))
    else:
        from .datasets import ClientData

        groups = [("data", "dataset",
                   ClientData("data", values, labels, np.arange(len(labels))))]

    for name, role, group in groups:
        entry = {"name": name, "role": role, "rows": int(group.n_rows),
                 "data": f"{name}.csv"}
        if mask_spec is not None:
            rng = derive_rng(seed, "gen-mask", name)
            mask = generate_mask(group.values, mask_spec, rng)
            save_csv(outdir / f"{name}.csv", MaskedMatrix(group.values, mask))
            save_mask(outdir / f"{name}.mask.csv", mask)
            entry["mask"] = f"{name}.mask.csv"
        else:
            save_csv(outdir / f"{name}.csv", group.values)
        manifest["datasets"].append(entry)

    with open(outdir / "manifest.yaml", "w") as fh:
        yaml.safe_dump(manifest, fh, sort_keys=False)
    print(f"wrote scenario to {outdir}")
    return 0


def _cmd_score(args) -> int:
    truth, _ = load_csv(args.truth)
    imputed, _ = load_csv(args.imputed)
    mask = load_mask(args.mask)
    mode = "per_feature" if args.per_feature else "global"
    score = normalized_mse(imputed.values, truth.values, ~mask, mode=mode)
    print(f"normalized_mse {score:.10g}")
    return 0


def main(argv=None) -> int:
    nc.enable_malloc_reuse()
    args = build_parser().parse_args(argv)
    handlers = {
        "run": _cmd_run,
        "impute": _cmd_impute,
        "gen": _cmd_gen,
        "score": _cmd_score,
    }
    try:
        return handlers[args.command](args)
    except FedimputeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
