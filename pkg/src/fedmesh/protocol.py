"""Per-client protocol state machine.

One :class:`ClientState` holds everything a client knows. The module-level
functions implement the individual protocol operations and :func:`step`
dispatches injected events to them, returning the actions the driver must
carry out (send messages, train, arm a timer, halt). Nothing here blocks or
touches the network, so the same machine runs under the simulator and TCP.

Sync mode gates every round on having a round-tagged model from each other
client. Async mode waits one TIMEOUT window per round, marks silent peers as
crashed, averages whatever arrived and decides locally when to terminate.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

import numpy as np

log = logging.getLogger(__name__)


class ProtocolFault(RuntimeError):
    """Unrecoverable protocol misuse; the run must abort."""


class Mode(str, enum.Enum):
    SYNC = "sync"
    ASYNC = "async"


class Status(str, enum.Enum):
    ALIVE = "Alive"
    CRASHED = "Crashed"
    TERMINATED = "Terminated"


class Phase(str, enum.Enum):
    TRAINING = "training"
    WAITING = "waiting"
    HALTED = "halted"
    CRASHED = "crashed"


class Cause(str, enum.Enum):
    CONVERGED = "Converged"
    RESPONSIVE = "Responsive"
    MAX_ROUNDS = "MaxRounds"
    CRASHED = "Crashed"


class Decision(str, enum.Enum):
    CONTINUE = "Continue"
    INITIATE_TERMINATE = "InitiateTerminate"


@dataclass
class RunConfig:
    n_clients: int = 4
    mode: Mode = Mode.ASYNC
    r_prime: int = 60
    epochs_per_round: int = 1
    timeout_ms: float = 1000.0
    minimum_rounds: int = 10
    count_threshold: int = 3
    conv_threshold: float = 0.05
    seed: int = 0
    # "l2" or "linf"
    delta_norm: str = "l2"

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if self.n_clients < 1:
            raise ValueError("n_clients must be positive")
        if self.epochs_per_round < 1:
            raise ValueError("epochs_per_round must be positive")
        if self.timeout_ms <= 0:
            raise ValueError("timeout must be positive")
        if self.count_threshold < 1:
            raise ValueError("count_threshold must be >= 1")
        if not 0 <= self.minimum_rounds <= self.r_prime:
            raise ValueError("need 0 <= minimum_rounds <= r_prime")
        if self.conv_threshold < 0:
            raise ValueError("conv_threshold must be non-negative")
        if self.delta_norm not in ("l2", "linf"):
            raise ValueError(f"unknown delta norm {self.delta_norm!r}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")

    def to_dict(self) -> dict:
        return {
            "n_clients": self.n_clients,
            "mode": self.mode.value,
            "r_prime": self.r_prime,
            "epochs_per_round": self.epochs_per_round,
            "timeout_ms": self.timeout_ms,
            "minimum_rounds": self.minimum_rounds,
            "count_threshold": self.count_threshold,
            "conv_threshold": self.conv_threshold,
            "seed": self.seed,
            "delta_norm": self.delta_norm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(**d)


class PeerMessage:
    """A model broadcast: who sent it, its round tag, weights and terminate flag."""

    __slots__ = ("sender", "round", "weights", "terminate")

    def __init__(self, sender: int, round: int, weights, terminate: bool = False):
        self.sender = int(sender)
        self.round = int(round)
        self.weights = np.asarray(weights, dtype=np.float64)
        self.terminate = bool(terminate)

    def __eq__(self, other):
        if not isinstance(other, PeerMessage):
            return NotImplemented
        # bitwise comparison so -0.0 / NaN payloads are not conflated
        return (
            self.sender == other.sender
            and self.round == other.round
            and self.terminate == other.terminate
            and self.weights.shape == other.weights.shape
            and self.weights.tobytes() == other.weights.tobytes()
        )

    __hash__ = None

    def __repr__(self):
        return (
            f"PeerMessage(sender={self.sender}, round={self.round}, "
            f"dim={self.weights.size}, terminate={self.terminate})"
        )


@dataclass
class PeerInfo:
    status: Status = Status.ALIVE
    last_heard_round: int = -1


@dataclass
class ClientState:
    id: int
    config: RunConfig
    weights: np.ndarray
    prev_round_weights: np.ndarray
    peers: dict = field(default_factory=dict)
    current_round: int = 0
    previous_round: int = 0
    # async: latest message per sender in this round; sync: current-round messages
    inbox_buffer: dict = field(default_factory=dict)
    # sync only: messages tagged for a later round, keyed by (sender, round)
    future_buffer: dict = field(default_factory=dict)
    received_count: int = 0
    rounds_completed: int = 0
    convergence_counter: int = 0
    terminate_flag: bool = False
    recent_crashes: bool = False
    phase: Phase = Phase.TRAINING
    # bumped on crash/recovery so stale timers and training results are ignored
    incarnation: int = 0
    cause: Optional[Cause] = None
    last_delta: Optional[float] = None
    # structured protocol events drained by the driver
    log: list = field(default_factory=list)

    @property
    def mode(self) -> Mode:
        return self.config.mode

    @property
    def dim(self) -> int:
        return self.weights.size

    @property
    def halted(self) -> bool:
        return self.phase is Phase.HALTED


def new_client_state(client_id: int, config: RunConfig, weights) -> ClientState:
    if not 0 <= client_id < config.n_clients:
        raise ValueError(f"client id {client_id} outside [0, {config.n_clients})")
    w = np.array(weights, dtype=np.float64).ravel()
    peers = {j: PeerInfo() for j in range(config.n_clients) if j != client_id}
    return ClientState(id=client_id, config=config, weights=w,
                       prev_round_weights=w.copy(), peers=peers)


# --- actions emitted by step -------------------------------------------------

@dataclass(frozen=True)
class Broadcast:
    to: int
    msg: PeerMessage


@dataclass(frozen=True)
class StartTraining:
    token: int
    round: int


@dataclass(frozen=True)
class ArmTimeout:
    duration_ms: float
    token: int


@dataclass(frozen=True)
class Halt:
    reason: Cause


Action = Union[Broadcast, StartTraining, ArmTimeout, Halt]


# --- events consumed by step -------------------------------------------------

@dataclass(frozen=True)
class TrainingDone:
    weights: np.ndarray
    token: Optional[int] = None


@dataclass(frozen=True)
class MessageArrived:
    msg: PeerMessage


@dataclass(frozen=True)
class TimeoutExpired:
    token: Optional[int] = None


@dataclass(frozen=True)
class CrashNow:
    pass


@dataclass(frozen=True)
class RecoverNow:
    pass


Event = Union[TrainingDone, MessageArrived, TimeoutExpired, CrashNow, RecoverNow]


# --- aggregation ---------------------------------------------------------------

def mean_weights(vectors: Iterable[np.ndarray]) -> np.ndarray:
    """Element-wise mean, summed left to right in the order given."""
    it = iter(vectors)
    try:
        first = next(it)
    except StopIteration:
        raise ValueError("mean of no vectors") from None
    total = np.array(first, dtype=np.float64, copy=True)
    k = 1
    for v in it:
        if v.shape != total.shape:
            raise ProtocolFault(f"dimension mismatch: {v.shape} vs {total.shape}")
        total += v
        k += 1
    total /= k
    return total


def aggregate(own: np.ndarray, received: list) -> np.ndarray:
    """Mean of the client's own weights and every received weight vector."""
    if not received:
        return np.array(own, dtype=np.float64, copy=True)
    return mean_weights([own, *received])


def _canonical_mean(state: ClientState, contributions: dict) -> np.ndarray:
    # sum in sender-id order (own id included) so every client performs the
    # same floating point operations on the same inputs
    vecs = dict(contributions)
    vecs[state.id] = state.weights
    return mean_weights(vecs[k] for k in sorted(vecs))


def model_delta(curr: np.ndarray, prev: np.ndarray, norm: str = "l2") -> float:
    if curr.shape != prev.shape:
        raise ProtocolFault(f"dimension mismatch: {curr.shape} vs {prev.shape}")
    diff = curr - prev
    if norm == "linf":
        return float(np.max(np.abs(diff))) if diff.size else 0.0
    return float(np.linalg.norm(diff))


# --- individual operations ----------------------------------------------------

def _note(state: ClientState, event: str, **detail):
    state.log.append((event, detail))


def _broadcast(state: ClientState, weights: np.ndarray, terminate: bool) -> list:
    msg = PeerMessage(state.id, state.current_round, weights.copy(), terminate)
    return [Broadcast(j, msg) for j in sorted(state.peers)]


def _check_dim(state: ClientState, w: np.ndarray):
    if w.ndim != 1 or w.size != state.dim:
        raise ProtocolFault(
            f"client {state.id}: expected {state.dim} weights, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ProtocolFault(f"client {state.id}: non-finite weights")


def run_round_sync(state: ClientState, trained) -> list:
    """Adopt freshly trained weights and fan them out tagged with the round."""
    if state.mode is not Mode.SYNC:
        raise ProtocolFault("run_round_sync called in async mode")
    trained = np.asarray(trained, dtype=np.float64)
    _check_dim(state, trained)
    if state.current_round == state.previous_round and state.current_round != 0:
        raise ProtocolFault(f"round {state.current_round} already broadcast")
    state.weights = trained.copy()
    return _broadcast(state, state.weights, state.terminate_flag)


def on_message_sync(state: ClientState, msg: PeerMessage) -> ClientState:
    if state.mode is not Mode.SYNC:
        raise ProtocolFault("on_message_sync called in async mode")
    if msg.sender not in state.peers:
        log.warning("client %d: dropping message from unknown sender %d", state.id, msg.sender)
        return state
    if msg.terminate:
        _set_terminate(state, msg)
    if msg.round == state.current_round:
        if msg.sender in state.inbox_buffer:
            return state
        state.inbox_buffer[msg.sender] = msg
        state.received_count += 1
    elif msg.round > state.current_round:
        state.future_buffer.setdefault((msg.sender, msg.round), msg)
    return state


def sync_round_complete(state: ClientState) -> bool:
    if state.mode is not Mode.SYNC:
        raise ProtocolFault("sync_round_complete called in async mode")
    return state.received_count == state.config.n_clients - 1


def _set_terminate(state: ClientState, msg: PeerMessage):
    if not state.terminate_flag:
        _note(state, "terminate_flag", sender=msg.sender, round=state.current_round)
    state.terminate_flag = True
    state.peers[msg.sender].status = Status.TERMINATED


def _accept_async(state: ClientState, msg: PeerMessage):
    if msg.sender not in state.peers:
        log.warning("client %d: dropping message from unknown sender %d", state.id, msg.sender)
        return
    if msg.weights.size != state.dim:
        raise ProtocolFault(
            f"client {state.id}: message from {msg.sender} has dim {msg.weights.size}")
    peer = state.peers[msg.sender]
    if msg.terminate:
        _set_terminate(state, msg)
    elif peer.status is Status.CRASHED:
        peer.status = Status.ALIVE
        _note(state, "peer_alive", peer=msg.sender, round=state.current_round)
    peer.last_heard_round = max(peer.last_heard_round, msg.round)
    state.inbox_buffer[msg.sender] = msg


def async_collect(state: ClientState, elapsed: float, arrivals: Iterable[PeerMessage]) -> ClientState:
    """Fold one TIMEOUT window's arrivals into the inbox (latest per sender wins)."""
    if state.mode is not Mode.ASYNC:
        raise ProtocolFault("async_collect called in sync mode")
    if elapsed < 0:
        raise ProtocolFault("negative window length")
    for msg in arrivals:
        _accept_async(state, msg)
    return state


def detect_crashes(state: ClientState) -> list:
    """Mark every Alive peer that stayed silent this window as Crashed."""
    newly = []
    for j in sorted(state.peers):
        peer = state.peers[j]
        if peer.status is Status.ALIVE and j not in state.inbox_buffer:
            peer.status = Status.CRASHED
            newly.append(j)
            _note(state, "crash_marked", peer=j, round=state.current_round)
            log.info("client %d: marked peer %d crashed in round %d", state.id, j, state.current_round)
    state.recent_crashes = bool(newly)
    return newly


def check_termination(state: ClientState, curr: np.ndarray, prev: np.ndarray) -> Decision:
    """Client-confident convergence test, run once per round after aggregation."""
    delta = model_delta(curr, prev, state.config.delta_norm)
    state.last_delta = delta
    if delta < state.config.conv_threshold and not state.recent_crashes:
        state.convergence_counter += 1
    else:
        state.convergence_counter = 0
    if state.convergence_counter >= state.config.count_threshold:
        return Decision.INITIATE_TERMINATE
    return Decision.CONTINUE


def on_terminate_decision(state: ClientState, cause: Cause = Cause.CONVERGED) -> list:
    """Flagged broadcast to every peer (crash-marked ones included), then halt."""
    actions = []
    if cause is Cause.MAX_ROUNDS:
        actions += _broadcast(state, state.weights, False)
    state.terminate_flag = True
    actions += _broadcast(state, state.weights, True)
    state.phase = Phase.HALTED
    state.cause = cause
    _note(state, "halt", cause=cause.value, round=state.current_round)
    actions.append(Halt(cause))
    return actions


# --- round bookkeeping ----------------------------------------------------------

def _start_training(state: ClientState) -> list:
    state.phase = Phase.TRAINING
    return [StartTraining(state.incarnation, state.current_round)]


def _finish_round(state: ClientState) -> list:
    """Aggregate the buffer, run the termination test and advance the round."""
    contributions = {j: m.weights for j, m in state.inbox_buffer.items()}
    agg = _canonical_mean(state, contributions)
    state.weights = agg
    state.rounds_completed += 1
    decision = Decision.CONTINUE
    checked = state.current_round >= state.config.minimum_rounds
    if checked:
        decision = check_termination(state, agg, state.prev_round_weights)
    _note(state, "round_end", round=state.current_round,
          arrivals=sorted(contributions), delta=state.last_delta if checked else None,
          counter=state.convergence_counter)
    if decision is Decision.INITIATE_TERMINATE:
        return on_terminate_decision(state, Cause.CONVERGED)

    state.prev_round_weights = agg.copy()
    state.previous_round = state.current_round
    state.current_round += 1
    state.inbox_buffer = {}
    state.received_count = 0
    state.recent_crashes = False
    if state.mode is Mode.SYNC:
        for key in sorted(k for k in state.future_buffer if k[1] == state.current_round):
            msg = state.future_buffer.pop(key)
            state.inbox_buffer[msg.sender] = msg
            state.received_count += 1
    if state.current_round >= state.config.r_prime:
        return on_terminate_decision(state, Cause.MAX_ROUNDS)
    return _start_training(state)


def _try_complete_sync(state: ClientState) -> list:
    if state.phase is not Phase.WAITING:
        return []
    if sync_round_complete(state):
        return _finish_round(state)
    if state.terminate_flag and any(
            p.status is Status.TERMINATED and j not in state.inbox_buffer
            for j, p in state.peers.items()):
        # a halted peer will never send this round's model
        return on_terminate_decision(state, Cause.RESPONSIVE)
    return []


def start(state: ClientState) -> list:
    """Initial actions for a fresh client."""
    if state.phase is not Phase.TRAINING or state.current_round != 0:
        raise ProtocolFault("start() on a client that already ran")
    return [StartTraining(state.incarnation, state.current_round)]


def resume_from(state: ClientState, msg: PeerMessage) -> list:
    """Start a restarted client from a peer's model instead of from scratch.

    Used when a process lost its memory in a crash: it adopts the first
    model it hears and joins at that sender's round. The message itself is
    not consumed; the caller should still feed it to ``step``.
    """
    if state.phase is not Phase.TRAINING or state.current_round != 0:
        raise ProtocolFault("resume_from() on a client that already ran")
    w = np.asarray(msg.weights, dtype=np.float64)
    _check_dim(state, w)
    state.weights = w.copy()
    state.prev_round_weights = w.copy()
    state.current_round = min(msg.round, state.config.r_prime - 1)
    state.previous_round = max(state.current_round - 1, 0)
    state.rounds_completed = state.current_round
    return [StartTraining(state.incarnation, state.current_round)]


def step(state: ClientState, event: Event) -> list:
    """Apply one event to the client and return the resulting actions."""
    if state.phase is Phase.HALTED:
        if isinstance(event, (MessageArrived, TimeoutExpired)):
            return []
        raise ProtocolFault(f"client {state.id}: {type(event).__name__} while halted")

    if state.phase is Phase.CRASHED:
        if isinstance(event, RecoverNow):
            state.incarnation += 1
            state.inbox_buffer = {}
            state.received_count = 0
            _note(state, "recovered", round=state.current_round)
            return _start_training(state)
        # a crashed process observes nothing
        return []

    if isinstance(event, CrashNow):
        state.phase = Phase.CRASHED
        state.incarnation += 1
        state.inbox_buffer = {}
        state.received_count = 0
        _note(state, "crashed", round=state.current_round)
        return []
    if isinstance(event, RecoverNow):
        raise ProtocolFault(f"client {state.id}: RecoverNow while not crashed")

    if isinstance(event, MessageArrived):
        if state.mode is Mode.SYNC:
            on_message_sync(state, event.msg)
            return _try_complete_sync(state)
        _accept_async(state, event.msg)
        return []

    if isinstance(event, TrainingDone):
        if event.token is not None and event.token != state.incarnation:
            return []
        if state.phase is not Phase.TRAINING:
            raise ProtocolFault(f"client {state.id}: TrainingDone in phase {state.phase.value}")
        trained = np.asarray(event.weights, dtype=np.float64)
        _check_dim(state, trained)
        if state.terminate_flag:
            state.weights = trained.copy()
            return on_terminate_decision(state, Cause.RESPONSIVE)
        if state.mode is Mode.SYNC:
            actions = run_round_sync(state, trained)
            state.phase = Phase.WAITING
            return actions + _try_complete_sync(state)
        state.weights = trained.copy()
        actions = _broadcast(state, state.weights, False)
        state.phase = Phase.WAITING
        actions.append(ArmTimeout(state.config.timeout_ms, state.incarnation))
        return actions

    if isinstance(event, TimeoutExpired):
        if event.token is not None and event.token != state.incarnation:
            return []
        if state.mode is Mode.SYNC:
            raise ProtocolFault(f"client {state.id}: TimeoutExpired in sync mode")
        if state.phase is not Phase.WAITING:
            raise ProtocolFault(f"client {state.id}: TimeoutExpired in phase {state.phase.value}")
        detect_crashes(state)
        return _finish_round(state)

    raise ProtocolFault(f"unknown event {event!r}")
