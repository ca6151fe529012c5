"""Split transformer inference with a binary activation protocol."""

from .client import LocalEngine, SplitClient, SplitConfig, connect
from .decoding import (JacobiConfig, LookaheadConfig, decode_jacobi, decode_lookahead,
                       decode_sequential)
from .errors import SplitError
from .server import ServerConfig, SplitServer
from .tinyformer import ModelConfig, Weights, generate_monolithic, init_weights

__all__ = [
    "JacobiConfig", "LocalEngine", "LookaheadConfig", "ModelConfig", "ServerConfig", "SplitClient",
    "SplitConfig", "SplitError", "SplitServer", "Weights", "connect", "decode_jacobi",
    "decode_lookahead", "decode_sequential", "generate_monolithic", "init_weights",
]
