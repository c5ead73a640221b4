"""Seeded discrete-event network simulator.

All events (deliveries, timers, training completions, crashes and
recoveries) live in one priority queue ordered by (virtual time, sequence
number). Sequence numbers are assigned at scheduling time, which gives a
total order and makes every run a pure function of seed and inputs.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from ..protocol import PeerMessage


@dataclass
class DelayModel:
    kind: str = "uniform"          # "fixed", "uniform" or "matrix"
    lo: float = 5.0
    hi: float = 50.0
    matrix: Optional[list] = None  # matrix[from][to] in ms

    def __post_init__(self):
        if self.kind not in ("fixed", "uniform", "matrix"):
            raise ValueError(f"unknown delay model {self.kind!r}")
        if self.kind == "matrix":
            if self.matrix is None:
                raise ValueError("matrix delay model needs a matrix")
            if np.min(self.matrix) < 0:
                raise ValueError("delays must be non-negative")
        elif self.lo < 0 or self.hi < self.lo:
            raise ValueError("need 0 <= lo <= hi")

    @classmethod
    def fixed(cls, d: float) -> "DelayModel":
        return cls("fixed", d, d)

    @classmethod
    def uniform(cls, lo: float, hi: float) -> "DelayModel":
        return cls("uniform", lo, hi)

    @classmethod
    def per_link(cls, matrix) -> "DelayModel":
        return cls("matrix", matrix=[list(map(float, row)) for row in matrix])

    @property
    def max_delay(self) -> float:
        if self.kind == "matrix":
            return float(np.max(self.matrix))
        return self.hi

    def draw(self, frm: int, to: int, rng: np.random.Generator) -> float:
        if self.kind == "fixed":
            return self.lo
        if self.kind == "uniform":
            return float(rng.uniform(self.lo, self.hi))
        return self.matrix[frm][to]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "lo": self.lo, "hi": self.hi, "matrix": self.matrix}

    @classmethod
    def from_dict(cls, d: dict) -> "DelayModel":
        return cls(**d)


@dataclass
class SimNetConfig:
    seed: int = 0
    delay: DelayModel = field(default_factory=DelayModel)
    # off by default: the protocol assumes reliable links
    drop_prob: float = 0.0

    def to_dict(self) -> dict:
        return {"seed": self.seed, "delay": self.delay.to_dict(), "drop_prob": self.drop_prob}

    @classmethod
    def from_dict(cls, d: dict) -> "SimNetConfig":
        d = dict(d)
        d["delay"] = DelayModel.from_dict(d["delay"])
        return cls(**d)


@dataclass(frozen=True)
class SimEvent:
    time: float
    seq: int
    kind: str
    client: int
    data: Any = None


class SimNetwork:
    """Virtual clock, event queue and link model for one simulated run."""

    def __init__(self, config: SimNetConfig, n_clients: int):
        self.config = config
        self.n = n_clients
        self.now = 0.0
        self._queue = []
        self._seq = 0
        self._rng = np.random.default_rng([config.seed, 0x5E7])
        self._last_arrival = {}
        self.crashed = {}            # victim -> transient?
        self._held = {}              # transient victim -> held deliveries
        self.dropped_from_crashed = 0
        self.dropped_random = 0

    # -- clock and queue -------------------------------------------------------

    def schedule(self, at: float, kind: str, client: int, data=None) -> SimEvent:
        if at < self.now:
            raise ValueError(f"cannot schedule in the past ({at} < {self.now})")
        ev = SimEvent(float(at), self._seq, kind, client, data)
        self._seq += 1
        heapq.heappush(self._queue, (ev.time, ev.seq, ev))
        return ev

    def after(self, delay: float, kind: str, client: int, data=None) -> SimEvent:
        return self.schedule(self.now + delay, kind, client, data)

    def __len__(self):
        return len(self._queue)

    def peek_time(self) -> Optional[float]:
        return self._queue[0][0] if self._queue else None

    def pop(self) -> Optional[SimEvent]:
        """Next event for the driver; link-level bookkeeping is handled here."""
        while self._queue:
            t, _, ev = heapq.heappop(self._queue)
            assert t >= self.now, "virtual time went backwards"
            self.now = t
            if ev.kind == "deliver" and ev.client in self.crashed:
                if self.crashed[ev.client]:
                    self._held.setdefault(ev.client, []).append(ev.data)
                continue
            if ev.kind == "crash":
                if ev.client in self.crashed:
                    continue
                self.crashed[ev.client] = bool(ev.data)
            elif ev.kind == "recover":
                if ev.client not in self.crashed:
                    continue
                del self.crashed[ev.client]
                # the client steps RecoverNow first, then sees its backlog
                for msg in self._held.pop(ev.client, []):
                    self.schedule(self.now, "deliver", ev.client, msg)
            return ev
        return None

    # -- links -----------------------------------------------------------------

    def send(self, frm: int, to: int, msg: PeerMessage) -> Optional[SimEvent]:
        """Schedule delivery of ``msg`` at now + delay(frm, to); FIFO per link."""
        if frm == to:
            raise ValueError("cannot send to self")
        if frm in self.crashed:
            self.dropped_from_crashed += 1
            return None
        delay = self.config.delay.draw(frm, to, self._rng)
        if self.config.drop_prob and self._rng.random() < self.config.drop_prob:
            self.dropped_random += 1
            return None
        at = max(self.now + delay, self._last_arrival.get((frm, to), 0.0))
        self._last_arrival[(frm, to)] = at
        return self.schedule(at, "deliver", to, msg)

    def crash(self, victim: int, at: float, recover_at: Optional[float] = None,
              transient: Optional[bool] = None):
        """Stop ``victim`` from sending in [at, recover_at).

        Messages already in flight from the victim are still delivered.
        Messages to a transiently crashed victim are held and delivered on
        recovery; to a permanently crashed one they are discarded.
        """
        if recover_at is not None and recover_at <= at:
            raise ValueError("recovery must come after the crash")
        if transient is None:
            transient = recover_at is not None
        self.schedule(at, "crash", victim, transient)
        if recover_at is not None:
            self.schedule(recover_at, "recover", victim)

    def recover(self, victim: int, at: float):
        self.schedule(at, "recover", victim)


# Function-style aliases matching the operation names used in the docs.
def sim_schedule(net: SimNetwork, frm: int, to: int, msg: PeerMessage, now: float | None = None):
    if now is not None and now != net.now:
        raise ValueError("the simulator only sends at the current virtual time")
    return net.send(frm, to, msg)


def sim_crash(net: SimNetwork, victim: int, at: float, recover_at: Optional[float] = None):
    net.crash(victim, at, recover_at)
