from .communicator import NO_FUSION, CommCounters, Communicator, FusionBuffer, FusionConfig
from .transport import InprocHub, InprocTransport, SocketTransport, free_ports
from .wire import Envelope

__all__ = [
    "CommCounters",
    "Communicator",
    "Envelope",
    "FusionBuffer",
    "FusionConfig",
    "InprocHub",
    "InprocTransport",
    "NO_FUSION",
    "SocketTransport",
    "free_ports",
]
