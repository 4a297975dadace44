"""Scripted fault injection for backend clients."""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Any, Callable, Sequence

from ..errors import BackendError, GenerationTimeout

BEHAVIORS = ("timeout", "malformed", "verdict")


@dataclass(frozen=True)
class Fault:
    """``method`` names the intercepted client method (``*`` matches any)."""

    method: str
    behavior: str
    text: str | None = None
    when: Callable[..., bool] | None = None

    def __post_init__(self):
        if self.behavior not in BEHAVIORS:
            raise ValueError(f"unknown fault behavior {self.behavior!r}")
        if self.behavior == "verdict" and self.text is None:
            raise ValueError("verdict faults need reply text")

    def matches(self, method: str, args: tuple, kwargs: dict) -> bool:
        if self.method not in ("*", method):
            return False
        return self.when is None or bool(self.when(*args, **kwargs))


class FaultPlan:
    """Faults are consumed strictly in order; once exhausted, calls pass through."""

    def __init__(self, faults: Sequence[Fault] = ()):
        self.pending = list(faults)
        self.fired: list[tuple[str, Fault]] = []
        self._lock = threading.Lock()

    def take(self, method: str, args: tuple = (), kwargs: dict | None = None) -> Fault | None:
        with self._lock:
            if self.pending and self.pending[0].matches(method, args, kwargs or {}):
                fault = self.pending.pop(0)
                self.fired.append((method, fault))
                return fault
        return None

    @property
    def exhausted(self) -> bool:
        return not self.pending


def _apply(method: str, fault: Fault) -> Any:
    if fault.behavior == "timeout":
        if method == "generate":
            raise GenerationTimeout(f"injected timeout in {method}")
        raise BackendError("timeout", f"injected timeout in {method}")
    if fault.behavior == "malformed":
        if method in ("complete", "ask"):
            return "<<malformed response>>"
        raise BackendError("http_status", f"injected malformed response in {method}")
    return fault.text


class _Faulty:
    def __init__(self, target: Any, plan: FaultPlan):
        self._target = target
        self._plan = plan

    def __getattr__(self, name: str) -> Any:
        attr = getattr(self._target, name)
        if not callable(attr):
            return attr

        def call(*args, **kwargs):
            fault = self._plan.take(name, args, kwargs)
            if fault is None:
                return attr(*args, **kwargs)
            return _apply(name, fault)

        return call


def with_faults(client: Any, plan: FaultPlan) -> Any:
    """Wrap any backend client so its method calls consult ``plan`` first."""
    return _Faulty(client, plan)
