"""Figure rendering for experiment reports.

Every figure is written next to the delimited output of the same data, so
the PNGs are a convenience view and the CSVs remain the source of truth.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_ARM_ORDER = ["fedprox", "fedprox_loc", "fedavg", "scaffold", "centralized",
              "mean", "ice"]


def _sorted_arms(arms) -> list[str]:
    known = [a for a in _ARM_ORDER if a in arms]
    locals_ = sorted(a for a in arms if a.startswith("local_cl_"))
    rest = sorted(a for a in arms if a not in known and not a.startswith("local_cl_"))
    return known + locals_ + rest


def render_report_figures(report, outdir: Path, round_rows, mi_cell_rows,
                          mi_example) -> list[Path]:
    outdir = Path(outdir)
    figdir = outdir / "figures"
    figdir.mkdir(parents=True, exist_ok=True)
    data = report.to_dict()
    written = []
    written.append(_fig_mse_test(data, figdir / "mse_test.png"))
    written.append(_fig_mse_datasets(data, figdir / "mse_datasets.png"))
    if round_rows:
        written.append(_fig_round_losses(round_rows, figdir / "round_losses.png"))
    if mi_cell_rows:
        written.append(_fig_mi_spread(mi_cell_rows, figdir / "mi_spread.png"))
    if mi_example is not None:
        written.append(_fig_mi_example(mi_example, figdir / "mi_example.png"))
    return [p for p in written if p is not None]


def _fig_mse_test(data: dict, path: Path) -> Path | None:
    arms = _sorted_arms(data["arms"])
    series = []
    labels = []
    for arm in arms:
        cell = data["arms"][arm]["datasets"].get("test")
        if cell and cell["scores"]:
            series.append([s["mse"] for s in cell["scores"]])
            labels.append(arm)
    if not series:
        return None
    fig, ax = plt.subplots(figsize=(1.2 * len(series) + 2.5, 4))
    ax.boxplot(series, tick_labels=labels)
    for i, ys in enumerate(series):
        ax.plot(np.full(len(ys), i + 1), ys, "o", color="k", ms=3, alpha=0.5)
    ax.set_ylabel("normalized MSE (test)")
    ax.set_title(f"held-out imputation error, {data['scenario']} scenario")
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def _fig_mse_datasets(data: dict, path: Path) -> Path | None:
    arms = _sorted_arms(data["arms"])
    datasets = sorted({ds for a in arms for ds in data["arms"][a]["datasets"]})
    if not datasets:
        return None
    width = 0.8 / max(len(arms), 1)
    fig, ax = plt.subplots(figsize=(1.6 * len(datasets) + 3, 4))
    x = np.arange(len(datasets))
    for i, arm in enumerate(arms):
        means, stds = [], []
        for ds in datasets:
            cell = data["arms"][arm]["datasets"].get(ds)
            means.append(cell["mean"] if cell and cell["mean"] is not None else np.nan)
            stds.append(cell["std"] if cell and cell["std"] is not None else 0.0)
        ax.bar(x + i * width, means, width, yerr=stds, capsize=2, label=arm)
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels(datasets)
    ax.set_ylabel("normalized MSE")
    ax.set_title("imputation error per dataset")
    ax.legend(fontsize=8, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def _fig_round_losses(round_rows, path: Path) -> Path:
    # rows: (arm, repetition, fold, round, client, mean_loss, n)
    by_arm: dict[str, dict[int, list[float]]] = {}
    for arm, _rep, _fold, rnd, _client, loss, _n in round_rows:
        by_arm.setdefault(arm, {}).setdefault(rnd, []).append(loss)
    fig, ax = plt.subplots(figsize=(6, 4))
    for arm in _sorted_arms(by_arm):
        rounds = sorted(by_arm[arm])
        ax.plot(rounds, [np.mean(by_arm[arm][r]) for r in rounds], label=arm, lw=1.2)
    ax.set_xlabel("round")
    ax.set_ylabel("mean local training loss")
    ax.set_title("per-round training loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def _fig_mi_spread(mi_cell_rows, path: Path) -> Path:
    # rows: (arm, repetition, fold, row, feature, posterior_std, prior_std)
    by_arm: dict[str, tuple[list[float], list[float]]] = {}
    for arm, *_rest, post, prior in mi_cell_rows:
        by_arm.setdefault(arm, ([], []))
        by_arm[arm][0].append(post)
        by_arm[arm][1].append(prior)
    arms = _sorted_arms(by_arm)
    fig, ax = plt.subplots(figsize=(1.8 * len(arms) + 2.5, 4))
    series, labels, colors = [], [], []
    for arm in arms:
        series.extend([by_arm[arm][0], by_arm[arm][1]])
        labels.extend([f"{arm}\nposterior", f"{arm}\nprior"])
        colors.extend(["tab:blue", "tab:orange"])
    boxes = ax.boxplot(series, tick_labels=labels, patch_artist=True,
                       showfliers=False)
    for patch, color in zip(boxes["boxes"], colors):
        patch.set_facecolor(color)
        patch.set_alpha(0.5)
    ax.set_ylabel("per-cell std over draws")
    ax.set_title("imputation spread: posterior vs prior predictive")
    ax.tick_params(axis="x", labelsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def _fig_mi_example(mi_example: dict, path: Path) -> Path:
    mask = np.asarray(mi_example["mask"], dtype=bool)
    truth = np.asarray(mi_example["truth_std"])
    draws = np.asarray(mi_example["draws_std"])
    missing = np.flatnonzero(~mask)[:15]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.5 * missing.size + 2), 4))
    for pos, j in enumerate(missing):
        ax.plot(np.full(draws.shape[0], pos), draws[:, j], "o", color="tab:blue",
                ms=3, alpha=0.4)
        ax.plot([pos], [truth[j]], "D", color="tab:red", ms=5)
    ax.set_xticks(range(missing.size))
    ax.set_xticklabels([str(j) for j in missing], fontsize=7)
    ax.set_xlabel("missing feature index")
    ax.set_ylabel("standardized value")
    ax.set_title(
        f"multiple imputation, one test row ({mi_example['arm']}); "
        "red = true value"
    )
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
