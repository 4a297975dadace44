"""Backend adapters: HTTP clients, the symbolic mock world and fault injection."""

from .faults import Fault, FaultPlan, with_faults
from .http import (
    BackendEndpoint,
    HttpEmbedder,
    HttpPlanner,
    HttpSynthesisBackend,
    HttpVlm,
    chat_complete,
    generate_video,
)
from .mock import (
    ConstantVerifier,
    MockPlanner,
    MockSynthesisBackend,
    MockVerifier,
    MockWorld,
    ScriptedPlanner,
    ScriptedVerifier,
    StochasticVerifier,
    SymbolicVlm,
    keyword_digest,
    mock_synthesize,
    mock_verify,
)

__all__ = [
    "ConstantVerifier",
    "BackendEndpoint",
    "Fault",
    "FaultPlan",
    "HttpEmbedder",
    "HttpPlanner",
    "HttpSynthesisBackend",
    "HttpVlm",
    "MockPlanner",
    "MockSynthesisBackend",
    "MockVerifier",
    "MockWorld",
    "ScriptedPlanner",
    "ScriptedVerifier",
    "StochasticVerifier",
    "SymbolicVlm",
    "chat_complete",
    "generate_video",
    "keyword_digest",
    "mock_synthesize",
    "mock_verify",
    "with_faults",
]
