"""Crash schedules: file format, validation and the experiment presets.

Schedule files hold one directive per line::

    # comment
    crash 3 at-round 5
    crash 2 at-time 1500 recover at-time 3000
    crash 1 at-round 4 recover at-round 9

An ``at-round`` crash fires when the victim itself reaches that round, so it
still sends its previous round's broadcast. An ``at-round`` recovery fires
once any live client reaches the given round. ``at-time`` triggers are
milliseconds of virtual time in the simulator and of wall time under TCP.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class Trigger:
    kind: str      # "round" or "time"
    value: float

    def __post_init__(self):
        if self.kind not in ("round", "time"):
            raise ValueError(f"unknown trigger kind {self.kind!r}")
        if self.value < 0:
            raise ValueError("trigger value must be non-negative")

    def __str__(self):
        if self.kind == "round":
            return f"at-round {int(self.value)}"
        return f"at-time {self.value:g}"


def at_round(r: int) -> Trigger:
    return Trigger("round", int(r))


def at_time(ms: float) -> Trigger:
    return Trigger("time", float(ms))


@dataclass(frozen=True)
class CrashEntry:
    victim: int
    trigger: Trigger
    recovery: Optional[Trigger] = None

    @property
    def permanent(self) -> bool:
        return self.recovery is None

    def __str__(self):
        s = f"crash {self.victim} {self.trigger}"
        if self.recovery is not None:
            s += f" recover {self.recovery}"
        return s


@dataclass(frozen=True)
class CrashSchedule:
    entries: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def victims(self) -> list:
        return [e.victim for e in self.entries]

    def validate(self, n_clients: int) -> "CrashSchedule":
        permanent = set()
        for e in self.entries:
            if not 0 <= e.victim < n_clients:
                raise ScheduleError(f"unknown client {e.victim}")
            if e.recovery is not None:
                _check_recovery(e.trigger, e.recovery)
            elif e.victim in permanent:
                raise ScheduleError(f"duplicate permanent crash for client {e.victim}")
            else:
                permanent.add(e.victim)
        return self

    def to_text(self) -> str:
        return "".join(f"{e}\n" for e in self.entries)

    def to_list(self) -> list:
        return [str(e) for e in self.entries]

    @classmethod
    def from_list(cls, lines: list) -> "CrashSchedule":
        return parse_schedule("\n".join(lines))


def _check_recovery(crash: Trigger, rec: Trigger):
    if crash.kind == rec.kind and rec.value <= crash.value:
        raise ScheduleError(f"recovery {rec} is not after crash {crash}")


_TRIGGER = r"at-(round|time)\s+(\d+(?:\.\d+)?)"
_LINE = re.compile(rf"^crash\s+(-?\d+)\s+{_TRIGGER}(?:\s+recover\s+{_TRIGGER})?$")


def _trigger(kind: str, value: str) -> Trigger:
    if kind == "round":
        if "." in value:
            raise ValueError("round must be an integer")
        return at_round(int(value))
    return at_time(float(value))


def parse_schedule(text: str, n_clients: Optional[int] = None) -> CrashSchedule:
    """Parse schedule text; errors name the offending line."""
    entries = []
    permanent = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _LINE.match(line)
        if not m:
            raise ScheduleError(f"line {lineno}: cannot parse {raw.strip()!r}")
        victim = int(m.group(1))
        try:
            trig = _trigger(m.group(2), m.group(3))
            rec = _trigger(m.group(4), m.group(5)) if m.group(4) else None
        except ValueError as exc:
            raise ScheduleError(f"line {lineno}: {exc}") from None
        if victim < 0 or (n_clients is not None and victim >= n_clients):
            raise ScheduleError(f"line {lineno}: unknown client {victim}")
        if rec is not None:
            try:
                _check_recovery(trig, rec)
            except ScheduleError as exc:
                raise ScheduleError(f"line {lineno}: {exc}") from None
        elif victim in permanent:
            raise ScheduleError(
                f"line {lineno}: duplicate permanent crash for client {victim} "
                f"(first on line {permanent[victim]})")
        else:
            permanent[victim] = lineno
        entries.append(CrashEntry(victim, trig, rec))
    return CrashSchedule(entries)


def load_schedule(path, n_clients: Optional[int] = None) -> CrashSchedule:
    with open(path) as fh:
        return parse_schedule(fh.read(), n_clients)


def parse_preset(text: str):
    """``variable:K``, ``proportional`` or ``maximum`` -> (kind, k)."""
    kind, _, arg = text.partition(":")
    kind = kind.strip().lower()
    if kind == "variable":
        if not arg:
            raise ValueError("variable preset needs a count, e.g. variable:3")
        return kind, int(arg)
    if kind in ("proportional", "maximum") and not arg:
        return kind, None
    raise ValueError(f"unknown preset {text!r}")


def make_preset(kind: str, n: int, seed: int, k: Optional[int] = None,
                minimum_rounds: int = 10, r_prime: int = 60) -> CrashSchedule:
    """Permanent-crash schedules for the three fault experiments.

    variable(k): k seeded victims; a victim's crash round depends only on
    its position in the seeded order, so variable(k) is a prefix of
    variable(k+1). Rounds are drawn from [minimum_rounds/2, r_prime/2].

    proportional: floor(n/3) victims at evenly spaced rounds over the same
    interval.

    maximum: every client but one seeded survivor, crashing at staggered
    rounds in [minimum_rounds/2, minimum_rounds) so that the survivor is
    alone before any termination check runs.
    """
    rng = np.random.default_rng([seed, 0xFA17])
    order = [int(v) for v in rng.permutation(n)]
    lo = max(1, minimum_rounds // 2)
    hi = max(lo, r_prime // 2)
    draws = [int(r) for r in rng.integers(lo, hi + 1, size=n)]

    if kind == "variable":
        if k is None or not 0 <= k <= n - 1:
            raise ValueError(f"variable preset needs 0 <= k <= {n - 1}")
        victims, rounds = order[:k], draws[:k]
    elif kind == "proportional":
        victims = order[: n // 3]
        rounds = [int(round(r)) for r in np.linspace(lo, hi, len(victims) + 2)[1:-1]]
    elif kind == "maximum":
        victims = order[: n - 1]
        top = max(lo, minimum_rounds - 1)
        rounds = [int(round(r)) for r in np.linspace(lo, top, len(victims))] if victims else []
    else:
        raise ValueError(f"unknown preset kind {kind!r}")
    entries = [CrashEntry(v, at_round(r)) for v, r in zip(victims, rounds)]
    return CrashSchedule(entries).validate(n)


def survivor(schedule: CrashSchedule, n: int) -> list:
    """Clients never permanently crashed by ``schedule``."""
    gone = {e.victim for e in schedule if e.permanent}
    return [i for i in range(n) if i not in gone]
