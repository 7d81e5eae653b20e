"""Artifact rendering: delimited tables plus figures for every run kind.

Every ``write_*_artifacts`` function drops both the machine-readable files
(JSON, CSV) and the rendered figures (SVG and PNG) into one directory and
returns the paths it wrote.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from . import evaluation as ev  # noqa: E402

FIGURE_FORMATS = ("svg", "png")
_CYCLE = plt.rcParams["axes.prop_cycle"].by_key()["color"]


def _color(index: int) -> str:
    return _CYCLE[index % len(_CYCLE)]


def save_figure(fig, out_dir, name: str) -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    for fmt in FIGURE_FORMATS:
        path = out_dir / f"{name}.{fmt}"
        fig.savefig(path, format=fmt, bbox_inches="tight")
        paths.append(path)
    plt.close(fig)
    return paths


def _write_text(out_dir, name: str, text: str) -> Path:
    path = Path(out_dir) / name
    path.write_text(text, encoding="utf-8")
    return path


# --- figures ----------------------------------------------------------------

def figure_accuracy(report: ev.EvalReport):
    """Grouped bars: per-stage mean accuracy per model, std over folds."""
    models = sorted({c.model for c in report.cells})
    stages = list(dict.fromkeys(c.stage for c in report.cells))
    fig, ax = plt.subplots(figsize=(1.6 + 1.4 * len(stages), 4.0))
    width = 0.8 / max(1, len(models))
    x = np.arange(len(stages), dtype=float)
    for i, model in enumerate(models):
        means, stds = [], []
        for stage in stages:
            accs = [c.metrics.accuracy for c in report.cells
                    if c.model == model and c.stage == stage]
            means.append(float(np.mean(accs)) if accs else np.nan)
            stds.append(float(np.std(accs)) if len(accs) > 1 else 0.0)
        ax.bar(x + (i - (len(models) - 1) / 2) * width, means, width,
               yerr=stds, capsize=3, label=model, color=_color(i))
    ax.set_xticks(x)
    ax.set_xticklabels(stages)
    ax.set_ylim(0.0, 1.05)
    ax.set_xlabel("stage")
    ax.set_ylabel("accuracy (mean over folds)")
    ax.legend(loc="lower right", fontsize="small")
    ax.set_title("classification accuracy by model and stage")
    return fig


def figure_roc(report: ev.EvalReport):
    """All per-cell ROC curves, one color per model, with mean AUC."""
    models = sorted({c.model for c in report.cells})
    fig, ax = plt.subplots(figsize=(5.0, 4.6))
    for i, model in enumerate(models):
        aucs = []
        first = True
        for c in report.cells:
            if c.model != model or not c.metrics.roc_points:
                continue
            pts = np.asarray(c.metrics.roc_points)
            ax.plot(pts[:, 0], pts[:, 1], color=_color(i), alpha=0.35,
                    linewidth=1.0,
                    label=model if first else None)
            first = False
            if c.metrics.auc is not None:
                aucs.append(c.metrics.auc)
        if aucs:
            ax.plot([], [], color=_color(i),
                    label=f"{model} mean AUC {np.mean(aucs):.3f}")
    ax.plot([0, 1], [0, 1], linestyle=":", color="grey", linewidth=1.0)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title("per-fold ROC curves")
    ax.legend(loc="lower right", fontsize="x-small")
    return fig


def figure_sweep(rows: list):
    """Mean accuracy (std over folds) against visible-label fraction."""
    fractions = sorted({r["fraction"] for r in rows})
    means, stds = [], []
    for f in fractions:
        accs = [r["accuracy"] for r in rows if r["fraction"] == f]
        means.append(float(np.mean(accs)))
        stds.append(float(np.std(accs)) if len(accs) > 1 else 0.0)
    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    ax.errorbar(fractions, means, yerr=stds, marker="o", capsize=3,
                color=_color(0))
    ax.set_xlabel("visible label fraction")
    ax.set_ylabel("accuracy (mean over folds)")
    ax.set_ylim(0.0, 1.05)
    ax.set_title("label-fraction sweep")
    return fig


def figure_tsne(coordinates: np.ndarray, labels):
    coordinates = np.asarray(coordinates)
    labels = list(labels)
    fig, ax = plt.subplots(figsize=(5.0, 4.6))
    for i, name in enumerate(sorted(set(labels))):
        keep = [j for j, lab in enumerate(labels) if lab == name]
        ax.scatter(coordinates[keep, 0], coordinates[keep, 1], s=12,
                   alpha=0.8, color=_color(i), label=str(name))
    ax.set_xlabel("t-SNE 1")
    ax.set_ylabel("t-SNE 2")
    ax.set_title("embedding map")
    ax.legend(loc="best", fontsize="small")
    return fig


def figure_kl(kl_history: list):
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    ax.plot(np.arange(1, len(kl_history) + 1), kl_history, color=_color(0))
    ax.set_xlabel("iteration")
    ax.set_ylabel("KL divergence")
    ax.set_title("t-SNE objective")
    return fig


def figure_ablation(named_groups: dict):
    names = list(named_groups)
    fig, ax = plt.subplots(figsize=(1.8 + 1.2 * len(names), 4.0))
    for i, name in enumerate(names):
        values = np.asarray(named_groups[name], dtype=float)
        jitter = (np.arange(len(values)) - (len(values) - 1) / 2) * 0.04
        ax.scatter(np.full(len(values), float(i)) + jitter, values, s=18,
                   color=_color(i), alpha=0.85)
        ax.hlines(values.mean(), i - 0.25, i + 0.25, color=_color(i),
                  linewidth=2.0)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=15, ha="right")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.05)
    ax.set_title("ablation comparison (per-seed accuracy, bar = mean)")
    return fig


def figure_history(history: list, loss_keys: tuple):
    fig, ax = plt.subplots(figsize=(5.4, 3.6))
    epochs = [row["epoch"] for row in history]
    for i, key in enumerate(loss_keys):
        if not history or key not in history[0]:
            continue
        values = [row[key] for row in history]
        if any(v is None for v in values):
            continue
        ax.plot(epochs, values, label=key, color=_color(i))
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize="small")
    ax.set_title("training curves")
    return fig


# --- bundles ----------------------------------------------------------------

def write_eval_artifacts(out_dir, report: ev.EvalReport) -> list[Path]:
    """Report JSON + flat CSVs + figures, all in one directory."""
    out_dir = Path(out_dir)
    paths = [
        _write_text(out_dir, "report.json", ev.report_json(report)),
        _write_text(out_dir, "report.csv", ev.report_csv(report)),
        _write_text(out_dir, "roc.csv", ev.roc_csv(report)),
    ]
    paths += save_figure(figure_accuracy(report), out_dir, "accuracy")
    if any(c.metrics.roc_points for c in report.cells):
        paths += save_figure(figure_roc(report), out_dir, "roc")
    return paths


def sweep_csv(rows: list) -> str:
    lines = ["fraction,fold,accuracy,macro_f1"]
    for r in rows:
        lines.append(f"{r['fraction']!r},{r['fold']},{r['accuracy']!r},"
                     f"{r['macro_f1']!r}")
    return "\n".join(lines) + "\n"


def write_sweep_artifacts(out_dir, rows: list) -> list[Path]:
    summary = ev.sweep_summary(rows)
    fractions = sorted(summary)
    means = [summary[f] for f in fractions]
    doc = {
        "rows": rows,
        "mean_accuracy": {repr(f): summary[f] for f in fractions},
        "spearman_fraction_vs_accuracy":
            ev.spearman(fractions, means) if len(fractions) > 1 else None,
    }
    out_dir = Path(out_dir)
    paths = [
        _write_text(out_dir, "sweep.json",
                    json.dumps(doc, indent=1, sort_keys=True)),
        _write_text(out_dir, "sweep.csv", sweep_csv(rows)),
    ]
    paths += save_figure(figure_sweep(rows), out_dir, "sweep")
    return paths


def write_tsne_artifacts(out_dir, coordinates: np.ndarray, labels,
                         kl_history: list) -> list[Path]:
    out_dir = Path(out_dir)
    kl_lines = ["iteration,kl"] + [f"{i + 1},{v!r}"
                                   for i, v in enumerate(kl_history)]
    paths = [
        _write_text(out_dir, "tsne.csv", ev.tsne_csv(coordinates, labels)),
        _write_text(out_dir, "tsne_kl.csv", "\n".join(kl_lines) + "\n"),
    ]
    paths += save_figure(figure_tsne(coordinates, labels), out_dir, "tsne")
    paths += save_figure(figure_kl(kl_history), out_dir, "tsne_kl")
    return paths


def write_ablation_artifacts(out_dir, named_groups: dict,
                             comparison: dict) -> list[Path]:
    doc = {"per_seed_accuracy": {k: list(map(float, v))
                                 for k, v in named_groups.items()},
           "comparison": comparison}
    out_dir = Path(out_dir)
    paths = [_write_text(out_dir, "ablation.json",
                         json.dumps(doc, indent=1, sort_keys=True))]
    lines = ["variant,seed_index,accuracy"]
    for name, values in named_groups.items():
        for i, v in enumerate(values):
            lines.append(f"{name},{i},{float(v)!r}")
    paths.append(_write_text(out_dir, "ablation.csv",
                             "\n".join(lines) + "\n"))
    paths += save_figure(figure_ablation(named_groups), out_dir, "ablation")
    return paths


def write_history_artifacts(out_dir, history: list, history_text: str,
                            loss_keys: tuple) -> list[Path]:
    out_dir = Path(out_dir)
    paths = [_write_text(out_dir, "history.csv", history_text)]
    if history:
        paths += save_figure(figure_history(history, loss_keys), out_dir,
                             "history")
    return paths
