"""One client as an OS process talking to its peers over TCP."""
from __future__ import annotations

import json
import logging
import os
import queue
import time
from pathlib import Path

import numpy as np

from . import protocol as P
from .harness import RunManifest, build_environment, client_rng
from .learning import train_local
from .transport.tcp import TcpTransport

log = logging.getLogger(__name__)


class PeerRuntime:
    def __init__(self, m: RunManifest, client_id: int, peers: dict, out_dir,
                 grace_s: float = 10.0, rejoin: bool = False):
        self.m = m
        self.cfg = m.config
        self.id = client_id
        self.peers = peers
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.grace_s = grace_s
        self.rejoin = rejoin
        self.env = build_environment(m)
        self.model = self.env.new_model()
        self.rng = client_rng(self.cfg.seed, client_id)
        self.events = queue.Queue()
        self.state = P.new_client_state(client_id, self.cfg, np.zeros(self.env.dim))
        self.accuracy = self._evaluate(self.state.weights)
        self.transport = TcpTransport(client_id, peers,
                                      lambda msg: self.events.put(P.MessageArrived(msg)),
                                      dim=self.env.dim)
        mode = "a" if rejoin else "w"
        self._log = (self.out / f"events_{client_id}.jsonl").open(mode)
        self.t0 = None
        self.deadline = None
        self.crash_rounds = [] if rejoin else sorted(
            int(e.trigger.value) for e in m.schedule
            if e.victim == client_id and e.trigger.kind == "round")

    def _evaluate(self, w) -> float:
        self.model.set_weights(w)
        return self.model.evaluate(self.env.X_test, self.env.y_test)

    def _now_ms(self) -> float:
        return (time.monotonic() - self.t0) * 1000.0 if self.t0 else 0.0

    def emit(self, event, **detail):
        self._log.write(json.dumps({"t": round(self._now_ms(), 3), "client": self.id,
                                    "event": event, "detail": detail},
                                   sort_keys=True, separators=(",", ":")) + "\n")
        self._log.flush()

    def _drain_notes(self):
        for event, detail in self.state.log:
            if event == "round_end":
                self.accuracy = self._evaluate(self.state.weights)
                detail = dict(detail, accuracy=self.accuracy)
            self.emit(event, **detail)
        self.state.log.clear()

    def _handle(self, actions) -> bool:
        """Carry out actions; returns False once the client halted."""
        sent = {}
        for a in actions:
            if isinstance(a, P.Broadcast):
                self.transport.send(a.to, a.msg)
                sent.setdefault(id(a.msg), (a.msg, []))[1].append(a.to)
            elif isinstance(a, P.StartTraining):
                if self.crash_rounds and a.round >= self.crash_rounds[0]:
                    self.emit("crash", round=a.round, permanent=True)
                    self._log.close()
                    os._exit(17)
                X, y = self.env.shards[self.id]
                t_train = time.monotonic()
                w = train_local(self.model, self.state.weights, X, y, self.cfg.epochs_per_round,
                                self.m.learn.lr, self.m.learn.batch_size, self.rng)
                # pad to the manifest's training time so broadcasts land mid-window,
                # not on the peers' round boundaries
                pad = (self.cfg.epochs_per_round * self.m.train_ms_per_epoch / 1000.0
                       - (time.monotonic() - t_train))
                if pad > 0:
                    time.sleep(pad)
                self.events.put(P.TrainingDone(w, a.token))
            elif isinstance(a, P.ArmTimeout):
                self.deadline = (time.monotonic() + a.duration_ms / 1000.0, a.token)
        for msg, to in sent.values():
            self.emit("broadcast", round=msg.round, terminate=msg.terminate, to=to)
        self._drain_notes()
        return not self.state.halted

    def _await_first_model(self):
        # a restarted process has lost its model; borrow the mesh's instead
        limit = time.monotonic() + 2 * self.cfg.timeout_ms / 1000.0
        while time.monotonic() < limit:
            try:
                ev = self.events.get(timeout=max(0.0, limit - time.monotonic()))
            except queue.Empty:
                break
            return ev.msg
        return None

    def run(self) -> dict:
        self.transport.start()
        have = self.transport.wait_connected(self.grace_s)
        self.t0 = time.monotonic()
        if self.id == 0 and not self.rejoin:
            (self.out / "started_0").write_text("1\n")
        self.emit("start", round=0, connected=sorted(have), rejoin=self.rejoin)
        watchdog = time.monotonic() + self.m.watchdog_ms / 1000.0
        first = self._await_first_model() if self.rejoin else None
        if first is not None:
            self.emit("resume", sender=first.sender, round=first.round)
            running = self._handle(P.resume_from(self.state, first))
            self.events.put(P.MessageArrived(first))
        else:
            running = self._handle(P.start(self.state))
        while running:
            if time.monotonic() > watchdog:
                self.emit("watchdog")
                break
            wait = 0.5
            if self.deadline is not None:
                wait = max(0.0, self.deadline[0] - time.monotonic())
            try:
                ev = self.events.get(timeout=wait)
            except queue.Empty:
                if self.deadline is None or time.monotonic() < self.deadline[0]:
                    continue
                ev = P.TimeoutExpired(self.deadline[1])
                self.deadline = None
            running = self._handle(P.step(self.state, ev))
        # let the flagged broadcast drain before tearing the sockets down
        time.sleep(0.05)
        self.transport.close()
        result = {
            "id": self.id,
            "cause": self.state.cause.value if self.state.cause else P.Cause.CRASHED.value,
            "rounds": self.state.rounds_completed,
            "accuracy": self.accuracy,
            "ms": self._now_ms(),
        }
        self.emit("final", **{k: v for k, v in result.items() if k != "id"})
        self._log.close()
        (self.out / f"client_{self.id}.json").write_text(json.dumps(result, sort_keys=True) + "\n")
        return result


def run_peer(m: RunManifest, client_id: int, peers: dict, out_dir, grace_s: float = 10.0,
             rejoin: bool = False) -> dict:
    return PeerRuntime(m, client_id, peers, out_dir, grace_s, rejoin).run()
