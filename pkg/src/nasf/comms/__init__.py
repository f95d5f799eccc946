"""Environment layer: rank setup, collectives and teardown over TCP or in-process channels."""

from nasf.comms.environment import (
    DEFAULT_TIMEOUT, Environment, EnvironmentConfig, init, init_master, init_worker,
    run_threads,
)
from nasf.comms.protocol import (
    ClosedEnvironmentError, CommError, Envelope, InitError, MsgType, ProtocolError, fnv1a_64,
)

__all__ = [
    "DEFAULT_TIMEOUT", "Environment", "EnvironmentConfig", "init", "init_master", "init_worker",
    "run_threads", "ClosedEnvironmentError", "CommError", "Envelope", "InitError", "MsgType",
    "ProtocolError", "fnv1a_64",
]
