"""Command line entry point: ``fedmesh run|sweep|peer``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .faults import CrashSchedule, load_schedule, make_preset, parse_preset
from .transport.sim import DelayModel

DEFAULT_CONV_THRESHOLD = 0.05


def _int_list(text: str) -> list:
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    return out


def _delay(text: str) -> DelayModel:
    parts = [float(v) for v in text.split(",")]
    if len(parts) == 1:
        return DelayModel.fixed(parts[0])
    if len(parts) == 2:
        return DelayModel.uniform(*parts)
    raise argparse.ArgumentTypeError("delay is MS or LO,HI")


def _add_protocol_args(p: argparse.ArgumentParser):
    p.add_argument("--mode", choices=["sync", "async"], default="async")
    p.add_argument("--timeout-ms", type=float, default=1000.0)
    p.add_argument("--min-rounds", type=int, default=10)
    p.add_argument("--count-threshold", type=int, default=3)
    p.add_argument("--conv-threshold", type=float, default=DEFAULT_CONV_THRESHOLD)
    p.add_argument("--epochs-per-round", type=int, default=1)
    p.add_argument("--max-rounds", type=int, default=60)
    p.add_argument("--alpha", type=float, default=0.6)
    p.add_argument("--iid", action="store_true", help="IID instead of Dirichlet partitioning")
    p.add_argument("--delay", type=_delay, default=DelayModel.uniform(5, 50),
                   help="simulated link delay in ms: D (fixed) or LO,HI (uniform)")
    p.add_argument("--train-ms", type=float, default=100.0,
                   help="training time per local epoch (virtual in sim, minimum over TCP)")
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=32)


def _base_kwargs(args) -> dict:
    from .harness import LearnSpec
    return dict(
        timeout_ms=args.timeout_ms, minimum_rounds=args.min_rounds,
        count_threshold=args.count_threshold, conv_threshold=args.conv_threshold,
        epochs_per_round=args.epochs_per_round, r_prime=args.max_rounds,
        alpha=args.alpha, partition_mode="iid" if args.iid else "noniid",
        delay=args.delay, train_ms_per_epoch=args.train_ms,
        learn=LearnSpec(args.lr, args.batch_size),
    )


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedmesh", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="one run on the simulator or a localhost TCP mesh")
    _add_protocol_args(run)
    run.add_argument("--transport", choices=["sim", "tcp"], default="sim")
    run.add_argument("--clients", type=int, default=4)
    run.add_argument("--seed", type=int, default=0)
    faults = run.add_mutually_exclusive_group()
    faults.add_argument("--crash-schedule", type=Path)
    faults.add_argument("--preset", help="variable:K, proportional or maximum")
    run.add_argument("--manifest", type=Path, help="replay a saved manifest (other options ignored)")
    run.add_argument("--out", type=Path, required=True)
    run.add_argument("--figures", action="store_true", help="also render PNG figures")

    sw = sub.add_parser("sweep", help="fault experiment sweep on the simulator")
    _add_protocol_args(sw)
    sw.add_argument("--experiment", type=int, choices=[1, 2, 3], required=True)
    sw.add_argument("--clients", type=_int_list, default=None,
                    help="client counts, e.g. 8 or 4,6,8,10,12")
    sw.add_argument("--faults", type=_int_list, default=None,
                    help="fault levels for experiment 1, e.g. 0-7; empty string for none")
    sw.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3, 4])
    sw.add_argument("--workers", type=int, default=1)
    sw.add_argument("--out", type=Path, required=True)
    sw.add_argument("--figures", action="store_true", help="also render PNG figures")

    peer = sub.add_parser("peer", help="run one client process of a TCP mesh")
    peer.add_argument("--id", type=int, required=True)
    peer.add_argument("--listen", required=True, help="HOST:PORT")
    peer.add_argument("--peers", type=Path, required=True, help="file of '<id> <host>:<port>' lines")
    peer.add_argument("--manifest", type=Path, help="run manifest JSON (defaults otherwise)")
    peer.add_argument("--out", type=Path, default=Path("."))
    peer.add_argument("--grace", type=float, default=10.0, help="seconds to wait for the mesh")
    peer.add_argument("--rejoin", action="store_true", help="restart after a transient crash")
    return ap


def cmd_run(args) -> int:
    from .harness import RunManifest, make_manifest, run_experiment
    from .report import emit_report

    if args.manifest:
        m = RunManifest.load(args.manifest)
        m.out_dir = str(args.out)
    else:
        n = args.clients
        kw = _base_kwargs(args)
        if args.crash_schedule:
            schedule = load_schedule(args.crash_schedule, n)
        elif args.preset:
            kind, k = parse_preset(args.preset)
            schedule = make_preset(kind, n, args.seed, k=k, minimum_rounds=args.min_rounds,
                                   r_prime=args.max_rounds)
        else:
            schedule = CrashSchedule()
        m = make_manifest(n_clients=n, mode=args.mode, seed=args.seed, schedule=schedule,
                          out_dir=str(args.out), **kw)
        m.transport = args.transport
    args.out.mkdir(parents=True, exist_ok=True)
    m.save(args.out / "manifest.json")
    res = run_experiment(m)
    paths = emit_report([res], args.out, figures=args.figures)
    sys.stdout.write(paths["summary"].read_text())
    return 1 if res.failed else 0


def cmd_sweep(args) -> int:
    from .harness import sweep
    from .report import emit_report

    if args.clients is None:
        args.clients = [8] if args.experiment == 1 else [4, 6, 8, 10, 12]
    if args.faults is None:
        args.faults = list(range(args.clients[0])) if args.experiment == 1 else [1]
    base = _base_kwargs(args)
    res = sweep(args.experiment, args.clients, args.faults, args.seeds, base=base,
                workers=args.workers)
    paths = emit_report(res, args.out, figures=args.figures)
    sys.stdout.write(paths["summary"].read_text())
    return 1 if any(r.failed for r in res.runs) else 0


def cmd_peer(args) -> int:
    from .harness import RunManifest, make_manifest
    from .peer import run_peer
    from .transport.tcp import load_peers, parse_address

    peers = load_peers(args.peers)
    if peers.get(args.id) != parse_address(args.listen):
        peers[args.id] = parse_address(args.listen)
    if args.manifest:
        m = RunManifest.load(args.manifest)
    else:
        m = make_manifest(n_clients=len(peers), transport="tcp", timeout_ms=500.0)
    res = run_peer(m, args.id, peers, args.out, grace_s=args.grace, rejoin=args.rejoin)
    print(f"client {res['id']}: {res['cause']} after {res['rounds']} rounds, "
          f"accuracy {res['accuracy'] * 100:.2f}%")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("FEDMESH_LOG", "WARNING").upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    return {"run": cmd_run, "sweep": cmd_sweep, "peer": cmd_peer}[args.command](args)


if __name__ == "__main__":
    raise SystemExit(main())
