"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` or directly with
``python3 tests/test_acceptance.py``.
"""
import json
import math
import shutil
import sys
import tempfile
from collections import defaultdict
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fedmesh import protocol as P                                  # noqa: E402
from fedmesh.faults import (                                        # noqa: E402
    CrashEntry, CrashSchedule, at_round, at_time, make_preset, parse_schedule, survivor,
)
from fedmesh.harness import (                                       # noqa: E402
    DataSpec, make_manifest, run_experiment, run_sim, run_tcp, sweep,
)
from fedmesh.protocol import PeerMessage                            # noqa: E402
from fedmesh.transport.sim import DelayModel                        # noqa: E402
from fedmesh.transport.wire import FramingError, decode_frame, encode_frame  # noqa: E402

from oracles import counter_trace, sequential_reference             # noqa: E402

pytestmark = pytest.mark.acceptance

SEEDS = [0, 1, 2, 3, 4]
SMALL_DATA = DataSpec(classes=4, features=6, samples_per_class=40)


def verdict(num, ok, detail, capsys=None):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {num}: {detail}"
    if capsys is not None:
        with capsys.disabled():
            print("\n" + line)
    else:
        print(line)
    assert ok, line


def events_by_client(lines):
    out = defaultdict(list)
    for line in lines:
        e = json.loads(line)
        out[e["client"]].append(e)
    return out


def crash_intervals(events):
    """client -> list of [start, end) virtual-time intervals spent crashed."""
    spans = defaultdict(list)
    for e in events:
        if e["event"] == "crash":
            spans[e["client"]].append([e["t"], math.inf])
        elif e["event"] == "recover":
            spans[e["client"]][-1][1] = e["t"]
    return spans


# -- 1 -------------------------------------------------------------------------

def test_1_sync_matches_sequential_reference(capsys):
    details = []
    ok = True
    for n in (1, 2, 4):
        m = make_manifest(n_clients=n, mode="sync", seed=11)
        res = run_sim(m, keep_weights=True)
        ref_w, ref_rounds, _ = sequential_reference(m)
        same_clients = all(np.array_equal(w, res.final_weights[0]) for w in res.final_weights)
        same_ref = np.array_equal(res.final_weights[0], ref_w)
        same_rounds = set(res.rounds) == {ref_rounds}
        ok &= same_clients and same_ref and same_rounds
        details.append(f"N={n} rounds={ref_rounds} bit-exact={same_clients and same_ref}")
    verdict(1, ok, "sync == sequential reference; " + ", ".join(details), capsys)


# -- 2 -------------------------------------------------------------------------

def random_schedule(rng, n, r_prime):
    k = int(rng.integers(0, n - 1))          # at most n-2 victims
    victims = rng.permutation(n)[:k]
    entries = []
    for v in victims:
        v = int(v)
        if rng.random() < 0.5:
            trig = at_round(int(rng.integers(1, r_prime)))
        else:
            trig = at_time(float(rng.integers(200, 20_000)))
        rec = None
        if rng.random() < 0.4:
            if trig.kind == "round":
                rec = at_round(int(trig.value) + int(rng.integers(1, 6)))
            else:
                rec = at_time(trig.value + float(rng.integers(100, 5_000)))
        entries.append(CrashEntry(v, trig, rec))
    return CrashSchedule(entries)


def propagation_violations(res):
    evs = [json.loads(line) for line in res.events]
    flagged = [e for e in evs if e["event"] == "broadcast" and e["detail"]["terminate"]]
    if not flagged:
        return ["nobody ever broadcast terminate"]
    t_first = flagged[0]["t"]
    spans = crash_intervals(evs)
    by = events_by_client(res.events)
    bad = []
    for c in range(res.n_clients):
        crashed_later_for_good = any(s >= t_first and math.isinf(e) for s, e in spans[c])
        if crashed_later_for_good:
            continue   # a client that dies cannot be asked to halt
        if any(s < t_first and math.isinf(e) for s, e in spans[c]):
            continue   # already gone when termination started
        halts = [e for e in by[c] if e["event"] == "halt"]
        if not halts:
            bad.append(f"client {c} never halted")
            continue
        h = halts[0]
        own = [e for e in by[c] if e["event"] == "broadcast" and e["detail"]["terminate"]
               and e["t"] <= h["t"]]
        if not own:
            bad.append(f"client {c} halted without a flagged broadcast")
        flag_rx = [e for e in by[c] if e["event"] == "terminate_flag"]
        if h["detail"]["cause"] == "Responsive":
            if not flag_rx:
                bad.append(f"client {c} Responsive without receiving a flag")
            elif h["detail"]["round"] > flag_rx[0]["detail"]["round"] + 1:
                bad.append(f"client {c} took {h['detail']['round'] - flag_rx[0]['detail']['round']}"
                           " rounds to halt")
    return bad


def test_2_termination_propagation(capsys):
    rng = np.random.default_rng(2024)
    failures = []
    for run in range(200):
        n = int(rng.integers(3, 9))
        lo = float(rng.integers(1, 60))
        hi = lo + float(rng.integers(0, 200))
        r_prime = int(rng.integers(15, 40))
        m = make_manifest(
            n_clients=n, seed=run, delay=DelayModel.uniform(lo, hi),
            timeout_ms=float(rng.choice([300.0, 500.0, 1000.0])),
            minimum_rounds=int(rng.integers(2, 8)), r_prime=r_prime,
            conv_threshold=float(rng.choice([0.02, 0.05, 0.2])),
            schedule=random_schedule(rng, n, r_prime), data=SMALL_DATA,
        )
        res = run_sim(m)
        bad = (["watchdog fired"] if res.failed else []) + propagation_violations(res)
        if bad:
            failures.append((run, bad))
    verdict(2, not failures,
            f"200 random async runs, violations in {len(failures)}"
            + (f"; first: {failures[0]}" if failures else ""), capsys)


# -- 3 -------------------------------------------------------------------------

def protocol_counter_trace(deltas, crashes, threshold, k):
    """Drive a real async client through rounds and read its counter notes.

    A crash round silences one currently-Alive peer, so each flagged round
    is a new crash; the peer silenced last time speaks again and revives.
    """
    cfg = P.RunConfig(n_clients=4, mode="async", r_prime=len(deltas) + 1, minimum_rounds=0,
                      count_threshold=k, conv_threshold=threshold)
    s = P.new_client_state(0, cfg, np.zeros(2))
    acts = P.start(s)
    x = 0.0
    trace = []
    silent = None
    for d, crash in zip(deltas, crashes):
        x += d
        w = np.array([x, 0.0])
        acts = P.step(s, P.TrainingDone(w, acts[0].token))
        silent = next(j for j in (1, 2, 3) if j != silent) if crash else None
        for j in (1, 2, 3):
            if j != silent:
                # peers agree with us, so the mean is exactly w
                P.step(s, P.MessageArrived(PeerMessage(j, s.current_round, w, False)))
        acts = P.step(s, P.TimeoutExpired(s.incarnation))
        trace += [det["counter"] for ev, det in s.log if ev == "round_end"]
        s.log.clear()
        if s.halted:
            break
    return trace


def test_3_counter_oracle(capsys):
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(1000):
        length = int(rng.integers(1, 40))
        k = int(rng.integers(1, 6))
        # keep deltas well clear of the threshold so float rounding cannot matter
        small = rng.random(length) < 0.7
        deltas = np.where(small, rng.uniform(0.0, 0.04, length), rng.uniform(0.06, 0.5, length))
        crashes = rng.random(length) < 0.1
        expected, _ = counter_trace(list(deltas), list(crashes), 0.05, k)
        if protocol_counter_trace(list(deltas), list(crashes), 0.05, k) != expected:
            mismatches += 1
    verdict(3, mismatches == 0, f"1000 random (delta, crash) sequences, {mismatches} mismatches",
            capsys)


# -- 4 -------------------------------------------------------------------------

def detection_violations(res, m):
    """Check crash marks against the ground-truth crash intervals.

    A victim crashed at time s would have broadcast at s + training time,
    arriving by A = s + training + max delay. Each observer must mark it by
    the end of its first round that begins after A: the round containing A
    may legitimately still hold the victim's previous message.
    """
    cfg = m.config
    train = cfg.epochs_per_round * m.train_ms_per_epoch
    period = cfg.timeout_ms + train
    max_delay = m.net.delay.max_delay
    evs = [json.loads(line) for line in res.events]
    spans = crash_intervals(evs)
    halted_at = {e["client"]: e["t"] for e in evs if e["event"] == "halt"}
    round_ends = defaultdict(list)
    for e in evs:
        if e["event"] == "round_end":
            round_ends[e["client"]].append(e["t"])
    marks = [e for e in evs if e["event"] == "crash_marked"]
    alive_again = [e for e in evs if e["event"] == "peer_alive"]

    def down_at(c, t):
        return any(s <= t < e for s, e in spans.get(c, ()))

    def up_through(c, t0, t1):
        return not any(s < t1 and e > t0 for s, e in spans.get(c, ()))

    bad = []
    # soundness: every mark is explained by a real crash of that peer
    for mk in marks:
        v = mk["detail"]["peer"]
        if not any(s <= mk["t"] and e > mk["t"] - 2 * period - max_delay
                   for s, e in spans.get(v, ())):
            bad.append(f"client {mk['client']} falsely marked {v} at t={mk['t']}")
    # completeness: permanent victims are marked by every observer that stays up
    for v, sp in list(spans.items()):
        for s, e in sp:
            if not math.isinf(e):
                continue
            arrival = s + train + max_delay
            for o in range(res.n_clients):
                if o == v:
                    continue
                later = [t for t in round_ends[o] if t >= arrival]
                if len(later) < 2:
                    continue   # observer stopped before a full window elapsed
                deadline = later[1]
                if not up_through(o, s, deadline) or halted_at.get(o, math.inf) < deadline:
                    continue
                if not any(mk["client"] == o and mk["detail"]["peer"] == v and s <= mk["t"] <= deadline
                           for mk in marks):
                    bad.append(f"client {o} did not mark {v} by t={deadline} (crash at {s})")
    # transient victims flip back to Alive for observers that marked them
    for v, sp in list(spans.items()):
        for s, e in sp:
            if math.isinf(e):
                continue
            settle = e + 2 * period + max_delay
            for mk in marks:
                o = mk["client"]
                if mk["detail"]["peer"] != v or not s <= mk["t"] <= settle:
                    continue
                if min(halted_at.get(o, math.inf), halted_at.get(v, math.inf)) < settle:
                    continue
                if down_at(o, settle) or down_at(v, settle):
                    continue
                if not any(a["client"] == o and a["detail"]["peer"] == v and a["t"] > mk["t"]
                           for a in alive_again):
                    bad.append(f"client {o} never saw {v} alive again after recovery at {e}")
    return bad


def test_4_crash_detection(capsys):
    rng = np.random.default_rng(4)
    kinds = ["variable", "proportional", "maximum"]
    failures = []
    marks_seen = 0
    flips_seen = 0
    for run in range(50):
        n = int(rng.integers(4, 13))
        kind = kinds[run % 3]
        k = int(rng.integers(0, n)) if kind == "variable" else None
        preset = make_preset(kind, n, run, k=k)
        entries = list(preset.entries)
        alive = survivor(preset, n)
        if len(alive) > 1:
            # add one transient outage on a client the preset leaves alone
            v = int(rng.choice(alive))
            t = float(rng.integers(1_000, 15_000))
            entries.append(CrashEntry(v, at_time(t), at_time(t + float(rng.integers(1_500, 6_000)))))
        m = make_manifest(n_clients=n, seed=run, schedule=CrashSchedule(entries),
                          delay=DelayModel.fixed(float(rng.integers(5, 50))))
        res = run_sim(m)
        marks_seen += sum('"crash_marked"' in line for line in res.events)
        flips_seen += sum('"peer_alive"' in line for line in res.events)
        bad = (["watchdog fired"] if res.failed else []) + detection_violations(res, m)
        if bad:
            failures.append((run, bad[:3]))
    verdict(4, not failures,
            f"50 preset runs, {marks_seen} crash marks, {flips_seen} Alive flips, "
            f"{len(failures)} runs with violations" + (f"; first: {failures[0]}" if failures else ""),
            capsys)


# -- 5, 6 ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def exp1():
    return sweep(1, [8], range(8), SEEDS, workers=1)


def _mean_acc(runs):
    return float(np.mean([r.mean_live_accuracy() for r in runs]))


def test_5_collaboration_beats_isolation(exp1, capsys):
    gaps = []
    for seed in SEEDS:
        fed = [r for r in exp1.by_label("async") if r.seed == seed and r.faults == 0]
        iso = [a for n, s, _, a in exp1.isolated if s == seed]
        gaps.append(_mean_acc(fed) - float(np.mean(iso)))
    ok = all(g >= 0.10 for g in gaps)
    verdict(5, ok, "federated minus isolated accuracy per seed: "
            + ", ".join(f"{100 * g:.1f}" for g in gaps) + " pts (need >= 10)", capsys)


def test_6_graceful_degradation(exp1, capsys):
    asyncs = exp1.by_label("async")
    acc0 = _mean_acc([r for r in asyncs if r.faults == 0])
    acc7 = _mean_acc([r for r in asyncs if r.faults == 7])
    p1 = _mean_acc(exp1.by_label("phase1"))
    ok = acc7 < acc0 and abs(acc0 - p1) <= 0.03
    verdict(6, ok, f"0 faults {100 * acc0:.2f}%, 7 faults {100 * acc7:.2f}%, "
            f"phase-1 {100 * p1:.2f}%", capsys)


# -- 7 -------------------------------------------------------------------------

def test_7_survivor_beats_hermit(capsys):
    res = sweep(3, [4, 8, 12], [1], SEEDS)
    per_n = defaultdict(int)
    for n, seed, _, s_acc, h_acc in res.survivors:
        per_n[n] += s_acc >= h_acc
    lonely = all(len(r.live_clients()) == 1 for r in res.runs)
    ok = lonely and all(per_n[n] >= 4 for n in (4, 8, 12))
    verdict(7, ok, "survivor >= hermit: " + ", ".join(f"n={n} {per_n[n]}/5" for n in (4, 8, 12)),
            capsys)


# -- 8 -------------------------------------------------------------------------

def test_8_replay_is_byte_identical(tmp_path, capsys):
    manifests = [
        make_manifest(n_clients=4, mode="sync", seed=1),
        make_manifest(n_clients=6, seed=2, schedule=make_preset("proportional", 6, 2)),
        make_manifest(n_clients=5, seed=3, schedule=parse_schedule(
            "crash 1 at-time 2500 recover at-time 6000\ncrash 4 at-round 12")),
        make_manifest(n_clients=8, seed=4, schedule=make_preset("maximum", 8, 4)),
    ]
    same = 0
    for i, m in enumerate(manifests):
        path = tmp_path / f"m{i}.json"
        m.save(path)
        logs = []
        for rep in range(2):
            from fedmesh.harness import RunManifest
            mm = RunManifest.load(path)
            mm.out_dir = str(tmp_path / f"run{i}_{rep}")
            logs.append(Path(run_experiment(mm).event_log_path).read_bytes())
        same += logs[0] == logs[1] and len(logs[0]) > 0
    verdict(8, same == len(manifests), f"{same}/{len(manifests)} manifests replay byte-identically",
            capsys)


# -- 9 -------------------------------------------------------------------------

def mutate(frame: bytes, rng) -> bytes:
    b = bytearray(frame)
    kind = int(rng.integers(0, 6))
    if kind == 0:
        b[int(rng.integers(0, 4))] ^= int(rng.integers(1, 256))
    elif kind == 1:
        b[4] = int(rng.choice([v for v in range(256) if v != 1]))
    elif kind == 2:
        b[11] |= int(rng.integers(1, 128)) << 1
    elif kind == 3:
        return bytes(b[: int(rng.integers(0, len(b)))])
    elif kind == 4:
        return bytes(b) + rng.bytes(int(rng.integers(1, 16)))
    else:
        dim = int.from_bytes(b[12:16], "big")
        new = dim
        while new == dim:
            new = int(rng.integers(0, 1 << 20))
        b[12:16] = new.to_bytes(4, "big")
    return bytes(b)


def test_9_wire_roundtrip_and_rejection(capsys):
    rng = np.random.default_rng(9)
    ok_rt = 0
    frames = []
    for _ in range(10_000):
        dim = int(rng.integers(1, 300))
        w = rng.standard_normal(dim) * 10.0 ** float(rng.integers(-300, 300))
        w[~np.isfinite(w)] = 0.0
        msg = PeerMessage(int(rng.integers(0, 65536)), int(rng.integers(0, 2**32)), w,
                          bool(rng.integers(0, 2)))
        f = encode_frame(msg)
        back = decode_frame(f)
        ok_rt += back == msg and back.weights.tobytes() == w.tobytes()
        frames.append(f)
    rejected = 0
    for i in range(1000):
        try:
            decode_frame(mutate(frames[i], rng))
        except FramingError:
            rejected += 1
    verdict(9, ok_rt == 10_000 and rejected == 1000,
            f"{ok_rt}/10000 round-trips exact, {rejected}/1000 mutated frames rejected", capsys)


# -- 10 ------------------------------------------------------------------------

@pytest.mark.slow
def test_10_tcp_kill_one_of_four(capsys):
    passes = []
    for attempt in range(3):
        out = Path(tempfile.mkdtemp(prefix="fedmesh-accept-"))
        try:
            m = make_manifest(n_clients=4, seed=attempt, timeout_ms=300.0, r_prime=25,
                              train_ms_per_epoch=50.0, out_dir=str(out),
                              schedule=parse_schedule("crash 2 at-time 1500"))
            m.transport = "tcp"
            res = run_tcp(m)
            by = events_by_client(res.events)
            ok = not res.failed and res.causes[2] == "Crashed"
            for c in (0, 1, 3):
                marked = [e for e in by[c] if e["event"] == "crash_marked" and e["detail"]["peer"] == 2]
                ok &= bool(marked) and res.causes[c] in ("Converged", "Responsive", "MaxRounds")
                ok &= bool(marked) and res.rounds[c] > marked[0]["detail"]["round"] + 1
            passes.append(ok)
        finally:
            shutil.rmtree(out, ignore_errors=True)
    verdict(10, all(passes), f"consecutive passes {sum(passes)}/3", capsys)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
