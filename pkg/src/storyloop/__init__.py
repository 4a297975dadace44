"""Closed-loop multi-shot video generation: plan, synthesize, verify, edit."""

from .errors import (
    BackendError,
    JournalCorrupt,
    PlanParseError,
    ShotPhaseError,
    StoryloopError,
)
from .pipeline import RunConfig, RunManifest, compute_stats, resume, run
from .storyboard import Idea, ShotSpec, StoryboardPlan, parse_plan_json, validate_plan
from .synthesis import DEFAULT_MODE_PARAMS, ModeParams, SynthesisMode

__version__ = "0.1.0"

__all__ = [
    "BackendError",
    "DEFAULT_MODE_PARAMS",
    "Idea",
    "JournalCorrupt",
    "ModeParams",
    "PlanParseError",
    "RunConfig",
    "RunManifest",
    "ShotPhaseError",
    "ShotSpec",
    "StoryboardPlan",
    "StoryloopError",
    "SynthesisMode",
    "compute_stats",
    "parse_plan_json",
    "resume",
    "run",
    "validate_plan",
]
