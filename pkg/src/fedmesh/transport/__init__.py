"""Message delivery backends: a seeded simulator and a TCP mesh."""
from .sim import DelayModel, SimEvent, SimNetConfig, SimNetwork, sim_crash, sim_schedule
from .wire import FramingError, decode_frame, encode_frame

__all__ = [
    "DelayModel", "SimEvent", "SimNetConfig", "SimNetwork", "sim_crash", "sim_schedule",
    "FramingError", "decode_frame", "encode_frame",
]
