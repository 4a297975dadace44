"""Regeneration economics: closed forms, Monte-Carlo, and a mock-engine run.

The retry model is memoryless: the first attempt passes with probability
``p1`` and every later attempt independently with ``q``, up to
``max_attempts`` attempts in total.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import brentq

from .pipeline import compute_stats

CHUNK = 1 << 16

# figures the engine is calibrated against
PUBLISHED_FIRST_PASS = Fraction(72, 100)
PUBLISHED_MEAN_EXTRA = Fraction(14, 10)
PUBLISHED_CONVERGENCE = Fraction(98, 100)


def _exact(x: float | Fraction | int) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(str(x))


@dataclass(frozen=True)
class RetryModel:
    p1: float | Fraction
    q: float | Fraction
    max_attempts: int = 3
    n_shots: int = 100_000
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.p1 <= 1 and 0 <= self.q <= 1):
            raise ValueError("p1 and q must lie in [0, 1]")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be at least 1")
        if self.n_shots < 1:
            raise ValueError("n_shots must be at least 1")


@dataclass(frozen=True)
class RetryStats:
    first_pass_rate: float | Fraction
    mean_extra_turns: float | Fraction | None
    convergence_rate: float | Fraction
    histogram: tuple[float | Fraction | int, ...]
    n_shots: int

    def to_dict(self) -> dict:
        def f(x):
            return None if x is None else float(x)

        return {
            "first_pass_rate": f(self.first_pass_rate),
            "mean_extra_turns": f(self.mean_extra_turns),
            "convergence_rate": f(self.convergence_rate),
            "histogram": {str(k + 1): v if isinstance(v, int) else f(v) for k, v in enumerate(self.histogram)},
            "n_shots": self.n_shots,
        }


def attempt_distribution(model: RetryModel) -> list[Fraction]:
    """Exact P(attempts = k) for k = 1..max_attempts."""
    p1, q, m = _exact(model.p1), _exact(model.q), model.max_attempts
    if m == 1:
        return [Fraction(1)]
    probs = [p1]
    for k in range(2, m):
        probs.append((1 - p1) * (1 - q) ** (k - 2) * q)
    probs.append((1 - p1) * (1 - q) ** (m - 2))
    return probs


def analytic_stats(model: RetryModel) -> RetryStats:
    """Closed-form statistics in exact rational arithmetic.

    A shot that exhausts the budget is charged ``max_attempts - 1`` extra
    turns whether or not its last attempt passed, which is how the engine
    counts attempts too.
    """
    p1, q, m = _exact(model.p1), _exact(model.q), model.max_attempts
    dist = attempt_distribution(model)
    first_pass = p1
    convergence = p1 if m == 1 else p1 + (1 - p1) * (1 - (1 - q) ** (m - 1))
    failing = sum(dist[1:], Fraction(0))
    mean_extra = sum((k * p for k, p in enumerate(dist[1:], start=1)), Fraction(0)) / failing if failing else None
    return RetryStats(
        first_pass_rate=first_pass,
        mean_extra_turns=mean_extra,
        convergence_rate=convergence,
        histogram=tuple(p * model.n_shots for p in dist),
        n_shots=model.n_shots,
    )


def standard_errors(model: RetryModel) -> dict[str, float | None]:
    """One-sigma sampling error of each simulated statistic at ``model.n_shots``."""
    exact = analytic_stats(model)
    n = model.n_shots
    out: dict[str, float | None] = {}
    for key in ("first_pass_rate", "convergence_rate"):
        p = float(getattr(exact, key))
        out[key] = math.sqrt(p * (1 - p) / n)
    dist = attempt_distribution(model)
    failing = float(sum(dist[1:], Fraction(0)))
    if exact.mean_extra_turns is None or failing == 0:
        out["mean_extra_turns"] = None
    else:
        mu = float(exact.mean_extra_turns)
        var = sum(float(p) / failing * (k - mu) ** 2 for k, p in enumerate(dist[1:], start=1))
        out["mean_extra_turns"] = math.sqrt(var / (n * failing))
    return out


def _simulate_chunk(rng: np.random.Generator, n: int, p1: float, q: float, m: int) -> tuple[np.ndarray, np.ndarray]:
    first = rng.random(n) < p1
    if m == 1:
        return np.ones(n, dtype=np.int64), first
    retries = rng.random((n, m - 1)) < q
    any_retry = retries.any(axis=1)
    first_ok = np.argmax(retries, axis=1) + 2
    attempts = np.where(first, 1, np.where(any_retry, first_ok, m))
    return attempts.astype(np.int64), first | any_retry


def simulate(model: RetryModel) -> RetryStats:
    """Seeded Monte-Carlo over independent shots.

    Trials are drawn in fixed-size chunks, each from its own child seed, so
    chunks could run in any order or in parallel with the same result.
    """
    p1, q, m = float(model.p1), float(model.q), model.max_attempts
    root = np.random.SeedSequence(model.seed)
    n_chunks = -(-model.n_shots // CHUNK)
    attempts_parts, conv_parts = [], []
    for c, child in enumerate(root.spawn(n_chunks)):
        size = min(CHUNK, model.n_shots - c * CHUNK)
        a, ok = _simulate_chunk(np.random.default_rng(child), size, p1, q, m)
        attempts_parts.append(a)
        conv_parts.append(ok)
    attempts = np.concatenate(attempts_parts)
    converged = np.concatenate(conv_parts)
    return stats_from_attempts(attempts, converged, m)


def stats_from_attempts(attempts: Sequence[int], converged: Sequence[bool], max_attempts: int) -> RetryStats:
    attempts = np.asarray(attempts, dtype=np.int64)
    converged = np.asarray(converged, dtype=bool)
    n = int(attempts.size)
    retried = attempts[attempts > 1]
    hist = np.bincount(attempts, minlength=max_attempts + 1)[1 : max_attempts + 1]
    return RetryStats(
        first_pass_rate=float(np.count_nonzero((attempts == 1) & converged)) / n,
        mean_extra_turns=float((retried - 1).mean()) if retried.size else None,
        convergence_rate=float(np.count_nonzero(converged)) / n,
        histogram=tuple(int(h) for h in hist),
        n_shots=n,
    )


# --- fitting the published figures ---------------------------------------------------


def _mean_extra(q: float, m: int = 3) -> float:
    """Mean extra turns among retried shots; independent of p1."""
    if m < 2:
        return 0.0
    tail = [(1 - q) ** (k - 2) * q for k in range(2, m)] + [(1 - q) ** (m - 2)]
    return sum(k * p for k, p in enumerate(tail, start=1))


def _convergence(p1: float, q: float, m: int = 3) -> float:
    return float(p1) + (1 - float(p1)) * (1 - (1 - q) ** (m - 1))


def _solve(f, target: float, lo: float = 0.0, hi: float = 1.0) -> float | None:
    flo, fhi = f(lo) - target, f(hi) - target
    if flo == 0:
        return lo
    if fhi == 0:
        return hi
    if flo * fhi > 0:
        return None
    return brentq(lambda x: f(x) - target, lo, hi, xtol=1e-14)


def fit_published(
    first_pass: Fraction = PUBLISHED_FIRST_PASS,
    mean_extra: Fraction = PUBLISHED_MEAN_EXTRA,
    convergence: Fraction = PUBLISHED_CONVERGENCE,
    max_attempts: int = 3,
) -> dict:
    """Fit q to each published figure separately and check joint feasibility."""
    p1 = float(first_pass)
    m = max_attempts
    q_mean = _solve(lambda q: _mean_extra(q, m), float(mean_extra))
    q_conv = _solve(lambda q: _convergence(p1, q, m), float(convergence))

    # reading the mean as taken over all shots rather than retried ones
    q_all = _solve(lambda q: (1 - p1) * _mean_extra(q, m), float(mean_extra))
    all_range = ((1 - p1) * _mean_extra(1.0, m), (1 - p1) * _mean_extra(0.0, m))
    # the unconstrained linear solution, for m = 3 only
    q_all_linear = 2 - float(mean_extra) / (1 - p1) if m == 3 else None

    by_mean = None
    if q_mean is not None:
        by_mean = {"q": q_mean, "convergence_rate": _convergence(p1, q_mean, m), "mean_extra_turns": _mean_extra(q_mean, m)}
    by_conv = None
    if q_conv is not None:
        by_conv = {"q": q_conv, "convergence_rate": _convergence(p1, q_conv, m), "mean_extra_turns": _mean_extra(q_conv, m)}

    feasible = (
        q_mean is not None and q_conv is not None and abs(q_mean - q_conv) < 1e-9
    )
    gaps = {}
    if by_mean is not None:
        gaps["convergence_shortfall_at_q_mean"] = float(convergence) - by_mean["convergence_rate"]
    if by_conv is not None:
        gaps["mean_extra_shortfall_at_q_conv"] = float(mean_extra) - by_conv["mean_extra_turns"]
    if q_mean is not None and q_conv is not None:
        gaps["q_gap"] = q_conv - q_mean

    lines = [f"memoryless retry model, first-pass {p1:.2f}, at most {m} attempts"]
    if by_mean:
        lines.append(
            f"mean extra turns {float(mean_extra):.2f} over retried shots -> q = {q_mean:.3f}, "
            f"convergence {by_mean['convergence_rate']:.4f}"
        )
    else:
        lines.append(f"mean extra turns {float(mean_extra):.2f} is unreachable for any q in [0, 1]")
    if by_conv:
        lines.append(
            f"convergence {float(convergence):.2f} -> q = {q_conv:.3f}, mean extra turns {by_conv['mean_extra_turns']:.3f}"
        )
    else:
        lines.append(f"convergence {float(convergence):.2f} is unreachable for any q in [0, 1]")
    lines.append(
        "the figures are jointly attainable" if feasible else
        "the mean-extra-turns and convergence figures are NOT jointly attainable under a memoryless retry model"
    )
    if q_all is None:
        lines.append(
            f"averaging over all shots instead would need q = {q_all_linear:.3f}" if q_all_linear is not None else
            "averaging over all shots instead has no solution"
        )
        lines[-1] += f" (attainable range {all_range[0]:.3f}..{all_range[1]:.3f}); infeasible"

    return {
        "first_pass_rate": p1,
        "targets": {
            "first_pass_rate": float(first_pass),
            "mean_extra_turns": float(mean_extra),
            "convergence_rate": float(convergence),
        },
        "fit_by_mean_extra": by_mean,
        "fit_by_convergence": by_conv,
        "jointly_feasible": feasible,
        "gaps": gaps,
        "all_shots_reading": {
            "q": q_all,
            "q_unconstrained": q_all_linear,
            "attainable_range": list(all_range),
            "feasible": q_all is not None,
        },
        "report": lines,
    }


def sweep_csv(p1s: Iterable[float], qs: Iterable[float], max_attempts: int = 3) -> str:
    """Analytic statistics over a (p1, q) grid as CSV."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["p1", "q", "first_pass_rate", "mean_extra_turns", "convergence_rate"])
    qs = list(qs)
    for p1 in p1s:
        for q in qs:
            s = analytic_stats(RetryModel(p1, q, max_attempts, 1))
            me = "" if s.mean_extra_turns is None else f"{float(s.mean_extra_turns):.6f}"
            w.writerow([p1, q, f"{float(s.first_pass_rate):.6f}", me, f"{float(s.convergence_rate):.6f}"])
    return buf.getvalue()


# --- the engine itself under a stochastic verifier ----------------------------------------


def engine_trial(model: RetryModel, *, fps: int = 4) -> RetryStats:
    """Drive the real regeneration loop over ``n_shots`` shots with mock backends.

    Every shot goes through request assembly, mock synthesis, the stochastic
    verifier, semantic refinement or mode escalation, and memory update.
    Nothing is written to disk.
    """
    from .backends.mock import MockPlanner, MockSynthesisBackend, MockWorld, StochasticVerifier
    from .gcm import MemoryStore, SymbolicExtractor, register
    from .seeds import shot_seed
    from .storyboard import CharacterDecl, ShotSpec
    from .synthesis import DEFAULT_MODE_PARAMS, SynthesisMode, build_request
    from .verifier import LoopDeps, regen_loop

    world = MockWorld(seed=model.seed, fps=fps)
    synth = MockSynthesisBackend(world)
    extractor = SymbolicExtractor()
    hero = CharacterDecl("hero", "Hero", "red scarf, short black hair")
    store = register(MemoryStore(), hero, synth.render_portrait(hero, "flat animation"), extractor)
    base = ShotSpec(
        index=1,
        prompt="the hero walks through the rain",
        entities=("hero",),
        relations=(),
        style="flat animation",
        duration_s=1.0,
        generation_mode="ff2v",
        camera_angle="medium shot",
        lighting="overcast",
        first_frame_prompt="the hero at the corner",
        last_frame_prompt="the hero under the awning",
        connect_to_next=False,
    )
    deps = LoopDeps(
        synth=synth,
        verifier=StochasticVerifier(float(model.p1), float(model.q), model.seed),
        planner=MockPlanner(),
        extractor=extractor,
        registry=("hero",),
    )
    attempts, converged = [], []
    for k in range(1, model.n_shots + 1):
        shot = replace(base, index=k)
        req = build_request(shot, SynthesisMode.T2V, store, None, DEFAULT_MODE_PARAMS[SynthesisMode.T2V], shot_seed(model.seed, k))
        outcome, store = regen_loop(shot, None, store, deps, 0.9, model.max_attempts - 1, True, request=req)
        attempts.append(outcome.attempts)
        converged.append(outcome.converged)
    stats = stats_from_attempts(attempts, converged, model.max_attempts)
    # the engine's own bookkeeping must agree with the vectorized summary
    engine = compute_stats([{"attempts": a, "converged": c} for a, c in zip(attempts, converged)])
    assert math.isclose(engine["convergence_rate"], stats.convergence_rate)
    return stats


__all__ = [
    "RetryModel",
    "RetryStats",
    "analytic_stats",
    "attempt_distribution",
    "engine_trial",
    "fit_published",
    "simulate",
    "standard_errors",
    "stats_from_attempts",
    "sweep_csv",
]
