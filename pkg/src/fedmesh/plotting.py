"""Optional figures rendered next to the CSV outputs.

The CSVs are the contract; these PNGs are a convenience for eyeballing a
sweep. matplotlib is imported lazily and always with the Agg backend.
"""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 10,
    "legend.frameon": False,
}


def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _series(agg: list, label: str, x: str):
    rows = sorted((r for r in agg if r["label"] == label), key=lambda r: r[x])
    return ([r[x] for r in rows], [100 * r["accuracy_mean"] for r in rows],
            [100 * r["accuracy_std"] for r in rows])


def render_figures(agg: list, sweep, out_dir) -> dict:
    plt = _plt()
    out = Path(out_dir)
    paths = {}
    with plt.rc_context(STYLE):
        exp = sweep.experiment if sweep is not None else None
        if exp == 1:
            fig, ax = plt.subplots()
            xs, ys, es = _series(agg, "async", "faults")
            ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3, label="async, crash faults")
            p1 = [r for r in agg if r["label"] == "phase1"]
            if p1:
                ax.axhline(100 * p1[0]["accuracy_mean"], ls="--", color="grey", label="sync, fault-free")
            if sweep.isolated:
                iso = sum(a for *_, a in sweep.isolated) / len(sweep.isolated)
                ax.axhline(100 * iso, ls=":", color="tab:red", label="isolated client")
            n = agg[0]["n_clients"]
            ax.set_xlabel(f"crashed clients out of {n}")
            ax.set_ylabel("accuracy (%)")
            ax.legend()
            paths["fig_degradation"] = out / "degradation.png"
        elif exp == 2:
            fig, ax = plt.subplots()
            xs, ys, es = _series(agg, "async", "n_clients")
            ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3, label="n/3 crashes")
            bx, by, be = _series(agg, "baseline", "n_clients")
            ax.errorbar([x * 3 // 2 for x in bx], by, yerr=be, marker="s", capsize=3,
                        label="fault-free, 2n/3 clients")
            ax.set_xlabel("clients")
            ax.set_ylabel("accuracy (%)")
            ax.legend()
            paths["fig_proportional"] = out / "proportional.png"
        elif exp == 3:
            fig, ax = plt.subplots()
            by_n = defaultdict(lambda: ([], []))
            for n, _, _, s, h in sweep.survivors:
                by_n[n][0].append(100 * s)
                by_n[n][1].append(100 * h)
            ns = sorted(by_n)
            ax.plot(ns, [sum(by_n[n][0]) / len(by_n[n][0]) for n in ns], marker="o", label="survivor")
            ax.plot(ns, [sum(by_n[n][1]) / len(by_n[n][1]) for n in ns], marker="s",
                    label="same client alone")
            ax.set_xlabel("clients (all but one crash)")
            ax.set_ylabel("accuracy (%)")
            ax.legend()
            paths["fig_survivor"] = out / "survivor.png"
        else:
            fig, ax = plt.subplots()
            for label in sorted({r["label"] for r in agg}):
                xs, ys, es = _series(agg, label, "n_clients")
                ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3, label=label)
            ax.set_xlabel("clients")
            ax.set_ylabel("accuracy (%)")
            ax.legend()
            paths["fig_accuracy"] = out / "accuracy.png"
        for p in paths.values():
            fig.savefig(p, dpi=120, bbox_inches="tight")
        plt.close(fig)
    return paths
