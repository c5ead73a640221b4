"""Metrics CSVs, per-cell aggregates and the plain-text run summary."""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from pathlib import Path
from typing import Iterable

import numpy as np

from .harness import CAUSES, ExperimentResult, SweepResult, mean_std

METRICS_COLUMNS = ["n_clients", "faults", "seed", "client_id", "rounds", "accuracy",
                   "virtual_ms", "cause"]
AGGREGATE_COLUMNS = ["label", "n_clients", "faults", "runs", "failed", "accuracy_mean",
                     "accuracy_std", "rounds_mean", "rounds_std"]

# collaboration must beat isolation by this many accuracy points
COLLAB_MARGIN = 0.10
# fault-free async must stay this close to the sync baseline
PHASE1_TOLERANCE = 0.03


def write_metrics(results: Iterable[ExperimentResult], path) -> int:
    n = 0
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS)
        w.writeheader()
        for r in results:
            for row in r.rows():
                if row["cause"] not in CAUSES:
                    raise ValueError(f"bad cause {row['cause']!r}")
                w.writerow(row)
                n += 1
    return n


def read_metrics(path) -> list:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def run_accuracy(r: ExperimentResult) -> float:
    """A run's accuracy: mean final accuracy over clients that did not crash."""
    return r.mean_live_accuracy()


def aggregate_runs(results: Iterable[ExperimentResult]) -> list:
    cells = defaultdict(list)
    for r in results:
        cells[(r.label, r.n_clients, r.faults)].append(r)
    out = []
    for (label, n, faults), runs in sorted(cells.items()):
        acc = [run_accuracy(r) for r in runs if not math.isnan(run_accuracy(r))]
        rounds = [float(np.mean([r.rounds[i] for i in r.live_clients()]))
                  for r in runs if r.live_clients()]
        am, asd = mean_std(acc)
        rm, rsd = mean_std(rounds)
        out.append({"label": label, "n_clients": n, "faults": faults, "runs": len(runs),
                    "failed": sum(r.failed for r in runs), "accuracy_mean": am,
                    "accuracy_std": asd, "rounds_mean": rm, "rounds_std": rsd})
    return out


def write_aggregate(rows: list, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=AGGREGATE_COLUMNS)
        w.writeheader()
        w.writerows(rows)


def _check(name: str, ok: bool, detail: str) -> str:
    return f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"


def ordering_checks(sweep: SweepResult) -> list:
    """The qualitative comparisons that apply to this sweep, as summary lines."""
    lines = []
    asyncs = sweep.by_label("async")
    if sweep.experiment == 1 and asyncs:
        n = asyncs[0].n_clients
        by_faults = defaultdict(list)
        for r in asyncs:
            by_faults[r.faults].append(run_accuracy(r))
        iso = defaultdict(list)
        for (_, seed, _, a) in sweep.isolated:
            iso[seed].append(a)
        if 0 in by_faults and iso:
            fed = {r.seed: run_accuracy(r) for r in asyncs if r.faults == 0}
            gaps = [fed[s] - float(np.mean(iso[s])) for s in sorted(fed) if s in iso]
            lines.append(_check(
                "collaboration beats isolation", all(g >= COLLAB_MARGIN for g in gaps),
                f"min gap {min(gaps) * 100:.1f} pts over {len(gaps)} seeds "
                f"(need >= {COLLAB_MARGIN * 100:.0f})"))
        top = max(by_faults)
        if 0 in by_faults and top > 0:
            a0, atop = float(np.mean(by_faults[0])), float(np.mean(by_faults[top]))
            phase1 = [run_accuracy(r) for r in sweep.by_label("phase1")]
            p1 = float(np.mean(phase1)) if phase1 else math.nan
            ok = atop < a0 and abs(a0 - p1) <= PHASE1_TOLERANCE
            lines.append(_check(
                "graceful degradation", ok,
                f"n={n}: {a0 * 100:.1f}% at 0 faults, {atop * 100:.1f}% at {top} faults, "
                f"phase-1 {p1 * 100:.1f}%"))
    if sweep.experiment == 3 and sweep.survivors:
        wins = sum(s >= h for (_, _, _, s, h) in sweep.survivors)
        total = len(sweep.survivors)
        lines.append(_check(
            "survivor beats hermit", wins >= math.ceil(0.8 * total),
            f"{wins}/{total} survivors at or above their isolated baseline"))
    if sweep.experiment == 2:
        base = {(r.seed, r.n_clients): run_accuracy(r) for r in sweep.by_label("baseline")}
        ns = sorted({r.n_clients for r in asyncs})
        for n in ns:
            fa = [run_accuracy(r) for r in asyncs if r.n_clients == n]
            ba = [a for (s, k), a in base.items() if k == max(1, 2 * n // 3)]
            lines.append(f"[INFO] n={n}: proportional faults {np.mean(fa) * 100:.1f}% vs "
                         f"fault-free {max(1, 2 * n // 3)}-client baseline {np.mean(ba) * 100:.1f}%")
    return lines


def summary_text(results: list, sweep: SweepResult | None = None) -> str:
    lines = []
    for r in results:
        causes = defaultdict(int)
        for c in r.causes:
            causes[c] += 1
        cause_txt = ", ".join(f"{k}={v}" for k, v in sorted(causes.items()))
        acc = run_accuracy(r)
        lines.append(f"{r.label} n={r.n_clients} faults={r.faults} seed={r.seed}: "
                     f"accuracy {acc * 100:.2f}% rounds {max(r.rounds)} "
                     f"[{cause_txt}]{' FAILED' if r.failed else ''}")
    if sweep is not None:
        lines.extend(ordering_checks(sweep))
    return "\n".join(lines) + "\n"


def emit_report(results, out_dir, figures: bool = False) -> dict:
    """Write metrics CSV(s), the aggregate CSV and summary.txt; return their paths.

    ``results`` is a list of ExperimentResult or a SweepResult. Each run
    label gets its own metrics file (``metrics.csv`` for the main arm).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sweep = results if isinstance(results, SweepResult) else None
    runs = sweep.runs if sweep else list(results)
    if not runs:
        raise ValueError("nothing to report")
    paths = {}
    labels = sorted({r.label for r in runs})
    main = "async" if "async" in labels else labels[0]
    for label in labels:
        name = "metrics.csv" if label == main else f"metrics_{label}.csv"
        write_metrics([r for r in runs if r.label == label], out / name)
        paths[label] = out / name
    agg = aggregate_runs(runs)
    write_aggregate(agg, out / "aggregate.csv")
    paths["aggregate"] = out / "aggregate.csv"
    if sweep and sweep.isolated:
        with (out / "isolated.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n_clients", "seed", "client_id", "accuracy"])
            w.writerows(sweep.isolated)
        paths["isolated"] = out / "isolated.csv"
    text = summary_text(runs, sweep)
    (out / "summary.txt").write_text(text)
    paths["summary"] = out / "summary.txt"
    if figures:
        from .plotting import render_figures
        paths.update(render_figures(agg, sweep, out))
    return paths
