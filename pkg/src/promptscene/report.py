"""Figure rendering for the report paths: loss curves, metric bars, ablation tables."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def plot_loss_curve(curve, path):
    fig, ax = plt.subplots(figsize=(7, 4))
    steps = [r["step"] for r in curve]
    ax.plot(steps, [r["total"] for r in curve], label="total", lw=1.5)
    for comp, style in (("mask", "--"), ("grd", ":"), ("gen", "-.")):
        ys = [r.get(comp, 0.0) for r in curve]
        if any(ys):
            ax.plot(steps, ys, style, label=comp, lw=1.0)
    stage2 = next((r["step"] for r in curve if r["stage"] == 2), None)
    if stage2 is not None and stage2 > 0:
        ax.axvline(stage2, color="gray", lw=0.8, alpha=0.7)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _flatten_metrics(report_dict):
    flat = {}
    for group, vals in sorted(report_dict["metrics"].items()):
        for key, value in sorted(vals.items()):
            flat[f"{group}.{key}"] = value
    return flat


def plot_metrics(report_dict, path):
    flat = _flatten_metrics(report_dict)
    fig, ax = plt.subplots(figsize=(max(5, 1.2 * len(flat)), 4))
    names = list(flat)
    ax.bar(range(len(names)), [flat[n] for n in names], color="#4878a8")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=40, ha="right", fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("metric")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_ablation(rows, variant_key, metric_keys, path):
    """Grouped bars: one cluster per variant, one bar per metric."""
    fig, ax = plt.subplots(figsize=(max(5, 1.6 * len(rows)), 4))
    width = 0.8 / max(1, len(metric_keys))
    for mi, mk in enumerate(metric_keys):
        xs = [i + mi * width for i in range(len(rows))]
        ax.bar(xs, [row.get(mk, 0.0) for row in rows], width=width, label=mk)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(rows))])
    ax.set_xticklabels([str(row[variant_key]) for row in rows])
    ax.set_ylim(0, 1.05)
    ax.set_xlabel(variant_key)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def write_table(rows, cols, path):
    """Tab-delimited table alongside each figure."""
    with open(path, "w") as fh:
        fh.write("\t".join(cols) + "\n")
        for row in rows:
            cells = []
            for c in cols:
                v = row.get(c, "")
                cells.append(repr(v) if isinstance(v, float) else str(v))
            fh.write("\t".join(cells) + "\n")
