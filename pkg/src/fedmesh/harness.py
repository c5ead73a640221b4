"""Run manifests, the simulated-run driver, the TCP launcher and sweeps."""
from __future__ import annotations

import json
import logging
import math
import os
import signal
import socket
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import protocol as P
from .datagen import Dataset, Partition, PartitionSpec, generate_synthetic, partition
from .faults import CrashSchedule, make_preset
from .learning import LinearClassifier, train_local
from .transport.sim import DelayModel, SimNetConfig, SimNetwork

log = logging.getLogger(__name__)

CAUSES = tuple(c.value for c in P.Cause)


@dataclass
class DataSpec:
    classes: int = 10
    features: int = 16
    samples_per_class: int = 250   # 2,000 training samples after the 20% test split
    seed: Optional[int] = None     # defaults to the run seed

    def to_dict(self):
        return {"classes": self.classes, "features": self.features,
                "samples_per_class": self.samples_per_class, "seed": self.seed}


@dataclass
class LearnSpec:
    lr: float = 0.1
    batch_size: int = 32

    def to_dict(self):
        return {"lr": self.lr, "batch_size": self.batch_size}


@dataclass
class RunManifest:
    config: P.RunConfig
    partition: PartitionSpec
    schedule: CrashSchedule = field(default_factory=CrashSchedule)
    transport: str = "sim"
    net: SimNetConfig = field(default_factory=SimNetConfig)
    data: DataSpec = field(default_factory=DataSpec)
    learn: LearnSpec = field(default_factory=LearnSpec)
    # training time per local epoch: virtual in the simulator, a floor over TCP
    train_ms_per_epoch: float = 100.0
    out_dir: Optional[str] = None
    host: str = "127.0.0.1"

    def __post_init__(self):
        if self.partition.n_clients != self.config.n_clients:
            raise ValueError("partition and config disagree on the client count")
        if self.transport not in ("sim", "tcp"):
            raise ValueError(f"unknown transport {self.transport!r}")
        self.schedule.validate(self.config.n_clients)

    @property
    def data_seed(self) -> int:
        return self.config.seed if self.data.seed is None else self.data.seed

    @property
    def watchdog_ms(self) -> float:
        return 10.0 * self.config.r_prime * self.config.timeout_ms

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "partition": self.partition.to_dict(),
            "schedule": self.schedule.to_list(),
            "transport": self.transport,
            "net": self.net.to_dict(),
            "data": self.data.to_dict(),
            "learn": self.learn.to_dict(),
            "train_ms_per_epoch": self.train_ms_per_epoch,
            "out_dir": self.out_dir,
            "host": self.host,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(
            config=P.RunConfig.from_dict(d["config"]),
            partition=PartitionSpec.from_dict(d["partition"]),
            schedule=CrashSchedule.from_list(d.get("schedule", [])),
            transport=d.get("transport", "sim"),
            net=SimNetConfig.from_dict(d["net"]) if "net" in d else SimNetConfig(),
            data=DataSpec(**d.get("data", {})),
            learn=LearnSpec(**d.get("learn", {})),
            train_ms_per_epoch=d.get("train_ms_per_epoch", 100.0),
            out_dir=d.get("out_dir"),
            host=d.get("host", "127.0.0.1"),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def make_manifest(n_clients=4, mode="async", seed=0, alpha=0.6, partition_mode="noniid",
                  schedule=None, delay=None, **overrides) -> RunManifest:
    """Convenience constructor; keyword overrides go to RunConfig or the manifest."""
    cfg_fields = set(P.RunConfig.__dataclass_fields__)
    cfg_kw = {k: overrides.pop(k) for k in list(overrides) if k in cfg_fields}
    cfg = P.RunConfig(n_clients=n_clients, mode=mode, seed=seed, **cfg_kw)
    net = overrides.pop("net", None) or SimNetConfig(seed=seed, delay=delay or DelayModel.uniform(5, 50))
    return RunManifest(
        config=cfg,
        partition=PartitionSpec(n_clients, alpha=alpha, seed=seed, mode=partition_mode),
        schedule=schedule or CrashSchedule(),
        net=net,
        **overrides,
    )


@dataclass
class Environment:
    dataset: Dataset
    part: Partition
    X_test: np.ndarray
    y_test: np.ndarray
    shards: list   # (X, y) per client

    @property
    def dim(self) -> int:
        return self.dataset.class_count * self.dataset.features.shape[1] + self.dataset.class_count

    def new_model(self) -> LinearClassifier:
        return LinearClassifier(self.dataset.features.shape[1], self.dataset.class_count)


def build_environment(m: RunManifest) -> Environment:
    ds = generate_synthetic(m.data.classes, m.data.features, m.data.samples_per_class, m.data_seed)
    part = partition(ds, m.partition)
    shards = [(ds.features[s], ds.labels[s]) for s in part.shards]
    return Environment(ds, part, ds.features[part.test], ds.labels[part.test], shards)


def client_rng(seed: int, client: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, client])


@dataclass
class ExperimentResult:
    n_clients: int
    faults: int
    seed: int
    accuracy: list
    rounds: list
    causes: list
    virtual_ms: list
    failed: bool = False
    label: str = "run"
    events: list = field(default_factory=list, repr=False)
    event_log_path: Optional[str] = None
    final_weights: list = field(default_factory=list, repr=False)
    end_ms: float = 0.0

    def live_clients(self) -> list:
        return [i for i, c in enumerate(self.causes) if c != P.Cause.CRASHED.value]

    def mean_live_accuracy(self) -> float:
        live = self.live_clients()
        if not live:
            return float("nan")
        return float(np.mean([self.accuracy[i] for i in live]))

    def rows(self) -> list:
        return [
            {"n_clients": self.n_clients, "faults": self.faults, "seed": self.seed,
             "client_id": i, "rounds": self.rounds[i], "accuracy": self.accuracy[i],
             "virtual_ms": self.virtual_ms[i], "cause": self.causes[i]}
            for i in range(self.n_clients)
        ]


def _event_line(t, client, event, detail) -> str:
    return json.dumps({"t": t, "client": client, "event": event, "detail": detail},
                      sort_keys=True, separators=(",", ":"))


class _SimRun:
    """Drives N protocol state machines through one simulated network."""

    def __init__(self, m: RunManifest, keep_weights: bool = False):
        self.m = m
        self.cfg = m.config
        self.n = self.cfg.n_clients
        self.env = build_environment(m)
        self.net = SimNetwork(m.net, self.n)
        init = np.zeros(self.env.dim)
        self.states = [P.new_client_state(i, self.cfg, init) for i in range(self.n)]
        self.model = self.env.new_model()
        self.rngs = [client_rng(self.cfg.seed, i) for i in range(self.n)]
        self.accuracy = [self._evaluate(init)] * self.n
        self.end_ms = [None] * self.n
        self.lines = []
        self.keep_weights = keep_weights
        self.round_crashes = {}       # victim -> [entry, ...] with round triggers
        self.round_recoveries = []    # (victim, round)
        self.fired = set()
        for idx, e in enumerate(m.schedule):
            if e.trigger.kind == "round":
                self.round_crashes.setdefault(e.victim, []).append((idx, e))
            else:
                self._arm_time_crash(e)

    def _arm_time_crash(self, e):
        at = e.trigger.value
        if e.recovery is None:
            self.net.crash(e.victim, at, transient=False)
        elif e.recovery.kind == "time":
            self.net.crash(e.victim, at, recover_at=max(e.recovery.value, at + 1e-9))
        else:
            self.net.crash(e.victim, at, transient=True)
            self.round_recoveries.append((e.victim, int(e.recovery.value)))

    def _evaluate(self, w) -> float:
        self.model.set_weights(w)
        return self.model.evaluate(self.env.X_test, self.env.y_test)

    def emit(self, client, event, **detail):
        self.lines.append(_event_line(round(self.net.now, 6), client, event, detail))

    # -- action handling ----------------------------------------------------------

    def handle(self, i: int, actions: list):
        state = self.states[i]
        groups = {}
        for a in actions:
            if isinstance(a, P.Broadcast):
                groups.setdefault(id(a.msg), (a.msg, []))[1].append(a.to)
                self.net.send(i, a.to, a.msg)
            elif isinstance(a, P.StartTraining):
                self._flush_broadcasts(i, groups)
                self._start_training(i, a)
            elif isinstance(a, P.ArmTimeout):
                self.net.after(a.duration_ms, "timer", i, a.token)
            elif isinstance(a, P.Halt):
                self._flush_broadcasts(i, groups)
                self.end_ms[i] = self.net.now
        self._flush_broadcasts(i, groups)
        self._drain_notes(i)
        if state.halted and state.cause is not None and self.end_ms[i] is None:
            self.end_ms[i] = self.net.now

    def _flush_broadcasts(self, i, groups):
        for msg, to in groups.values():
            self.emit(i, "broadcast", round=msg.round, terminate=msg.terminate, to=to)
        groups.clear()

    def _start_training(self, i: int, a: P.StartTraining):
        for idx, e in self.round_crashes.get(i, []):
            if idx not in self.fired and a.round >= e.trigger.value:
                self.fired.add(idx)
                self._crash_by_round(i, e)
                return
        state = self.states[i]
        X, y = self.env.shards[i]
        w = train_local(self.model, state.weights, X, y, self.cfg.epochs_per_round,
                        self.m.learn.lr, self.m.learn.batch_size, self.rngs[i])
        self.net.after(self.cfg.epochs_per_round * self.m.train_ms_per_epoch,
                       "trained", i, (w, a.token))

    def _crash_by_round(self, i, e):
        now = self.net.now
        if e.recovery is None:
            self.net.crash(i, now, transient=False)
        else:
            self.net.crash(i, now, transient=True)
            if e.recovery.kind == "time":
                self.net.recover(i, max(now, e.recovery.value))
            else:
                self.round_recoveries.append((i, int(e.recovery.value)))

    def _drain_notes(self, i: int):
        state = self.states[i]
        advanced = False
        for event, detail in state.log:
            if event == "round_end":
                acc = self._evaluate(state.weights)
                self.accuracy[i] = acc
                detail = dict(detail, accuracy=acc)
                advanced = True
            self.emit(i, event, **detail)
        state.log.clear()
        if advanced and self.round_recoveries:
            self._check_round_recoveries()

    def _check_round_recoveries(self):
        top = max((s.current_round for s in self.states
                   if s.phase in (P.Phase.TRAINING, P.Phase.WAITING)), default=-1)
        keep = []
        for victim, r in self.round_recoveries:
            if top >= r:
                self.net.recover(victim, self.net.now)
            else:
                keep.append((victim, r))
        self.round_recoveries = keep

    # -- main loop -----------------------------------------------------------------

    def _pending_recover(self, i: int) -> bool:
        if any(v == i for v, _ in self.round_recoveries):
            # only live clients can advance the round that triggers it
            return any(not s.halted and s.phase is not P.Phase.CRASHED for s in self.states)
        return any(ev.kind == "recover" and ev.client == i for _, _, ev in self.net._queue)

    def _active(self, i: int) -> bool:
        s = self.states[i]
        if s.halted:
            return False
        if s.phase is P.Phase.CRASHED:
            return self._pending_recover(i)
        return True

    def run(self, label="run") -> ExperimentResult:
        for i in range(self.n):
            self.emit(i, "start", round=0)
            self.handle(i, P.start(self.states[i]))
        failed = False
        while any(self._active(i) for i in range(self.n)):
            t = self.net.peek_time()
            if t is None:
                failed = True
                self.emit(-1, "deadlock", pending=0)
                break
            if t > self.m.watchdog_ms:
                failed = True
                self.emit(-1, "watchdog", limit_ms=self.m.watchdog_ms)
                break
            ev = self.net.pop()
            if ev is not None:
                self._dispatch(ev)
        return self._result(label, failed)

    def _dispatch(self, ev):
        i = ev.client
        state = self.states[i]
        if ev.kind == "deliver":
            if state.halted:
                return
            self.handle(i, P.step(state, P.MessageArrived(ev.data)))
        elif ev.kind == "timer":
            self.handle(i, P.step(state, P.TimeoutExpired(ev.data)))
        elif ev.kind == "trained":
            w, token = ev.data
            if state.halted:
                return
            self.handle(i, P.step(state, P.TrainingDone(w, token)))
        elif ev.kind == "crash":
            if state.halted:
                return
            self.end_ms[i] = self.net.now
            self.emit(i, "crash", round=state.current_round, permanent=not ev.data)
            self.handle(i, P.step(state, P.CrashNow()))
        elif ev.kind == "recover":
            if state.halted:
                return
            self.end_ms[i] = None
            self.emit(i, "recover", round=state.current_round)
            self.handle(i, P.step(state, P.RecoverNow()))

    def _result(self, label, failed) -> ExperimentResult:
        causes, end = [], []
        for i, s in enumerate(self.states):
            if s.halted and s.cause is not None:
                causes.append(s.cause.value)
            else:
                causes.append(P.Cause.CRASHED.value)
                if s.phase is not P.Phase.CRASHED and not failed:
                    failed = True
            end.append(self.end_ms[i] if self.end_ms[i] is not None else self.net.now)
        for i, s in enumerate(self.states):
            self.emit(i, "final", cause=causes[i], rounds=s.rounds_completed,
                      accuracy=self.accuracy[i])
        res = ExperimentResult(
            n_clients=self.n, faults=len(self.m.schedule), seed=self.cfg.seed,
            accuracy=list(self.accuracy), rounds=[s.rounds_completed for s in self.states],
            causes=causes, virtual_ms=end, failed=failed, label=label,
            events=self.lines, end_ms=self.net.now,
        )
        if self.keep_weights:
            res.final_weights = [s.weights.copy() for s in self.states]
        return res


def run_sim(m: RunManifest, label: str = "run", keep_weights: bool = False) -> ExperimentResult:
    return _SimRun(m, keep_weights).run(label)


def write_event_log(lines: list, path) -> None:
    Path(path).write_text("".join(line + "\n" for line in lines))


def run_experiment(m: RunManifest, label: str = "run", keep_weights: bool = False) -> ExperimentResult:
    """Run one manifest to completion and write its event log if ``out_dir`` is set."""
    if m.transport == "tcp":
        res = run_tcp(m, label)
    else:
        res = run_sim(m, label, keep_weights)
    if m.out_dir and m.transport == "sim":
        out = Path(m.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "events.jsonl"
        write_event_log(res.events, path)
        res.event_log_path = str(path)
    if res.failed:
        log.warning("run %s (n=%d seed=%d) failed", label, m.config.n_clients, m.config.seed)
    return res


# -- isolated baselines -----------------------------------------------------------

def isolated_accuracy(m: RunManifest, env: Optional[Environment] = None,
                      epochs: Optional[int] = None) -> list:
    """Each client trained alone on its own shard, evaluated on the shared test set."""
    env = env or build_environment(m)
    if epochs is None:
        epochs = m.config.r_prime * m.config.epochs_per_round
    model = env.new_model()
    out = []
    for i, (X, y) in enumerate(env.shards):
        w = train_local(model, np.zeros(env.dim), X, y, epochs, m.learn.lr,
                        m.learn.batch_size, client_rng(m.config.seed, i))
        model.set_weights(w)
        out.append(model.evaluate(env.X_test, env.y_test))
    return out


# -- TCP launcher -----------------------------------------------------------------

def free_ports(n: int, host: str = "127.0.0.1") -> list:
    socks, ports = [], []
    for _ in range(n):
        s = socket.socket()
        s.bind((host, 0))
        socks.append(s)
        ports.append(s.getsockname()[1])
    for s in socks:
        s.close()
    return ports


def _peer_cmd(i, addr, peers_file, manifest_file, out, extra=()):
    return [sys.executable, "-m", "fedmesh", "peer", "--id", str(i), "--listen", addr,
            "--peers", str(peers_file), "--manifest", str(manifest_file), "--out", str(out),
            *extra]


def run_tcp(m: RunManifest, label: str = "run", grace_s: float = 10.0) -> ExperimentResult:
    """Launch one OS process per client on localhost and collect their results.

    ``at-time`` crashes are delivered by the launcher as SIGKILL; a matching
    ``at-time`` recovery restarts the process. ``at-round`` crashes are
    carried out by the peer itself.
    """
    from .transport.tcp import write_peers

    n = m.config.n_clients
    out = Path(m.out_dir or f"fedmesh-tcp-{os.getpid()}-{time.time_ns()}")
    out.mkdir(parents=True, exist_ok=True)
    ports = free_ports(n, m.host)
    peers = {i: (m.host, ports[i]) for i in range(n)}
    peers_file = out / "peers.txt"
    write_peers(peers_file, peers)
    manifest_file = out / "manifest.json"
    m.save(manifest_file)
    for stale in list(out.glob("client_*.json")) + list(out.glob("events_*.jsonl")):
        stale.unlink()

    actions = []   # (wall ms, kind, victim)
    for e in m.schedule:
        if e.trigger.kind == "time":
            actions.append((e.trigger.value, "kill", e.victim))
            if e.recovery is not None:
                if e.recovery.kind != "time":
                    raise ValueError("TCP runs support only at-time recovery")
                actions.append((e.recovery.value, "restart", e.victim))
    actions.sort()

    env = dict(os.environ)
    src = str(Path(__file__).resolve().parents[1])
    env["PYTHONPATH"] = src + os.pathsep + env.get("PYTHONPATH", "")
    procs = {}
    for i in range(n):
        procs[i] = subprocess.Popen(
            _peer_cmd(i, f"{m.host}:{ports[i]}", peers_file, manifest_file, out,
                      ("--grace", str(grace_s))), env=env)
    # timers are measured from the moment the protocol starts (mesh up)
    start_file = out / "started_0"
    t_launch = time.monotonic()
    while not start_file.exists() and time.monotonic() - t_launch < grace_s + 30:
        if all(p.poll() is not None for p in procs.values()):
            break
        time.sleep(0.01)
    t0 = time.monotonic()
    deadline = t0 + m.watchdog_ms / 1000.0
    failed = False
    pending = list(actions)
    while True:
        now_ms = (time.monotonic() - t0) * 1000.0
        while pending and pending[0][0] <= now_ms:
            _, kind, victim = pending.pop(0)
            if kind == "kill":
                p = procs[victim]
                if p.poll() is None:
                    p.send_signal(signal.SIGKILL)
                    p.wait()
                    (out / f"killed_{victim}").write_text(f"{now_ms:.1f}\n")
            else:
                procs[victim] = subprocess.Popen(
                    _peer_cmd(victim, f"{m.host}:{ports[victim]}", peers_file, manifest_file,
                              out, ("--rejoin", "--grace", "1.0")), env=env)
        if all(p.poll() is not None for p in procs.values()) and not any(
                k == "restart" for _, k, _ in pending):
            break
        if time.monotonic() > deadline:
            failed = True
            for p in procs.values():
                if p.poll() is None:
                    p.kill()
                    p.wait()
            break
        time.sleep(0.01)
    return collect_tcp_results(out, m, label, failed)


def collect_tcp_results(out: Path, m: RunManifest, label: str, failed: bool) -> ExperimentResult:
    n = m.config.n_clients
    acc, rounds, causes, ms = [0.0] * n, [0] * n, [P.Cause.CRASHED.value] * n, [0.0] * n
    lines = []
    for i in range(n):
        ev_path = out / f"events_{i}.jsonl"
        if ev_path.exists():
            for line in ev_path.read_text().splitlines():
                if not line.strip():
                    continue
                lines.append(line)
                rec = json.loads(line)
                if rec["event"] == "round_end":
                    acc[i] = rec["detail"]["accuracy"]
                    rounds[i] = max(rounds[i], rec["detail"]["round"] + 1)
                    ms[i] = rec["t"]
        res_path = out / f"client_{i}.json"
        if res_path.exists():
            r = json.loads(res_path.read_text())
            acc[i], rounds[i], causes[i], ms[i] = r["accuracy"], r["rounds"], r["cause"], r["ms"]
    lines.sort(key=lambda s: (json.loads(s)["t"], json.loads(s)["client"]))
    merged = out / "events.jsonl"
    write_event_log(lines, merged)
    return ExperimentResult(n, len(m.schedule), m.config.seed, acc, rounds, causes, ms,
                            failed=failed, label=label, events=lines,
                            event_log_path=str(merged), end_ms=max(ms) if ms else 0.0)


# -- sweeps -----------------------------------------------------------------------

@dataclass
class SweepResult:
    experiment: int
    runs: list                       # ExperimentResult, label distinguishes the arm
    isolated: list = field(default_factory=list)   # (n, seed, client, accuracy)
    survivors: list = field(default_factory=list)  # (n, seed, client, survivor acc, hermit acc)

    def by_label(self, label: str) -> list:
        return [r for r in self.runs if r.label == label]


def _run_job(job):
    m, label = job
    return run_sim(m, label)


def _map(jobs, workers):
    if workers and workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as ex:
            return list(ex.map(_run_job, jobs))
    return [_run_job(j) for j in jobs]


def sweep(experiment: int, n_values, fault_levels, seeds, base: Optional[dict] = None,
          workers: int = 1, with_isolated: bool = True) -> SweepResult:
    """Cross product of runs for one of the three fault experiments.

    experiment 1: fixed n, variable(k) crashes for k in ``fault_levels``,
      plus the fault-free sync (phase-1) run per seed.
    experiment 2: floor(n/3) crashes for each n, plus a fault-free sync run
      with floor(2n/3) clients.
    experiment 3: n-1 crashes for each n; the survivor is compared with
      the same client trained alone.
    An empty ``fault_levels`` gives a plain phase-1 baseline sweep.
    """
    base = dict(base or {})
    jobs = []

    def manifest(n, seed, mode="async", schedule=None):
        return make_manifest(n_clients=n, mode=mode, seed=seed, schedule=schedule, **base)

    cfg_probe = manifest(max(n_values), seeds[0]).config
    lo_kw = {"minimum_rounds": cfg_probe.minimum_rounds, "r_prime": cfg_probe.r_prime}
    fault_levels = list(fault_levels)
    for n in n_values:
        for seed in seeds:
            if not fault_levels:
                jobs.append((manifest(n, seed, mode="sync"), "phase1"))
                continue
            if experiment == 1:
                jobs.append((manifest(n, seed, mode="sync"), "phase1"))
                for k in fault_levels:
                    sch = make_preset("variable", n, seed, k=k, **lo_kw)
                    jobs.append((manifest(n, seed, schedule=sch), "async"))
            elif experiment == 2:
                sch = make_preset("proportional", n, seed, **lo_kw)
                jobs.append((manifest(n, seed, schedule=sch), "async"))
                jobs.append((manifest(max(1, (2 * n) // 3), seed, mode="sync"), "baseline"))
            elif experiment == 3:
                sch = make_preset("maximum", n, seed, **lo_kw)
                jobs.append((manifest(n, seed, schedule=sch), "async"))
            else:
                raise ValueError(f"unknown experiment {experiment}")
    runs = _map(jobs, workers)
    result = SweepResult(experiment, runs)
    if with_isolated:
        seen = set()
        for (m, label), r in zip(jobs, runs):
            key = (m.config.n_clients, m.config.seed)
            if label != "async" or key in seen:
                continue
            seen.add(key)
            iso = isolated_accuracy(m)
            result.isolated += [(key[0], key[1], i, a) for i, a in enumerate(iso)]
            if experiment == 3:
                for i in r.live_clients():
                    result.survivors.append((key[0], key[1], i, r.accuracy[i], iso[i]))
    return result


def mean_std(values) -> tuple:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0
