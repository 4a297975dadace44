"""Command-line entry point.

stdout carries machine-readable JSON; diagnostics go to stderr.
Exit codes: 0 done, 1 error, 2 finished but degraded.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import canonical
from .errors import StoryloopError
from .pipeline import MOCK_VERIFIERS, RunConfig, build_deps, inspect_run, replay_shot, resume, run
from .simulator import RetryModel, analytic_stats, engine_trial, fit_published, simulate, sweep_csv
from .storyboard import Idea, validate_plan

EXIT_OK, EXIT_ERROR, EXIT_DEGRADED = 0, 1, 2

log = logging.getLogger("storyloop")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which would read as "degraded"
    def error(self, message):
        raise UsageError(message)


def _emit(obj) -> None:
    sys.stdout.write(canonical.dumps(obj).decode("utf-8") + "\n")


def _probability(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a number") from None
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{v} is outside [0, 1]")
    return v


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"{v} is not an unsigned 64-bit integer")
    return v


def _load_config(args) -> RunConfig:
    data: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            data = canonical.loads(path.read_bytes())
        except ValueError as e:
            raise UsageError(f"config file {path} is not valid JSON: {e}") from None
        if not isinstance(data, dict):
            raise UsageError(f"config file {path} must hold a JSON object")
    if args.backend:
        data["backend"] = args.backend
    if args.seed is not None:
        data["seed"] = args.seed
    if args.pacing:
        data["pacing_template_id"] = args.pacing
    if args.no_gcm:
        data["gcm_enabled"] = False
    if args.no_flf2v:
        data["flf2v_enabled"] = False
    mock = dict(data.get("mock", {}))
    if args.plan:
        mock["plan_path"] = str(Path(args.plan).resolve())
    if args.verifier:
        mock["verifier"] = args.verifier
    if mock:
        data["mock"] = mock
    return RunConfig.from_dict(data)


def _read_idea(text: str) -> Idea:
    path = Path(text)
    if len(text) < 4096 and path.is_file():
        raw = path.read_text("utf-8")
        try:
            obj = canonical.loads(raw)
        except ValueError:
            return Idea(raw.strip())
        if isinstance(obj, dict):
            try:
                return Idea.from_dict(obj)
            except (KeyError, TypeError) as e:
                raise UsageError(f"idea file {path} lacks field {e}") from None
        return Idea(str(obj))
    return Idea(text)


def _finish(manifest, run_dir: Path) -> int:
    _emit({"manifest": str(run_dir / "manifest.json"), "run_id": manifest.run_id, "status": manifest.status})
    if manifest.degraded:
        bad = [s["index"] for s in manifest.shots if s["degraded"]]
        print(f"run finished degraded: shots {bad} did not converge", file=sys.stderr)
        return EXIT_DEGRADED
    return EXIT_OK


def cmd_run(args) -> int:
    config = _load_config(args)
    idea = _read_idea(args.idea)
    out = Path(args.out)
    return _finish(run(idea, config, build_deps(config), out), out)


def cmd_resume(args) -> int:
    return _finish(resume(Path(args.run_dir)), Path(args.run_dir))


def cmd_validate_plan(args) -> int:
    path = Path(args.plan)
    if not path.is_file():
        raise UsageError(f"plan file not found: {path}")
    try:
        data = canonical.loads(path.read_bytes())
    except ValueError as e:
        _emit({"ok": False, "violations": [["plan", "json_syntax", str(e)]]})
        return EXIT_ERROR
    report = validate_plan(data, max_shots=args.max_shots)
    _emit({"ok": report.ok, "violations": [list(v) for v in report.violations]})
    for loc, rule, msg in report.violations:
        print(f"{loc}: {rule}: {msg}", file=sys.stderr)
    return EXIT_OK if report.ok else EXIT_ERROR


def cmd_simulate(args) -> int:
    if args.csv:
        grid = [round(0.1 * k, 1) for k in range(11)]
        Path(args.csv).write_text(sweep_csv(grid, grid, args.max_attempts), "utf-8")
    if args.fit_paper:
        report = fit_published(max_attempts=args.max_attempts)
        _emit(report)
        for line in report["report"]:
            print(line, file=sys.stderr)
        return EXIT_OK
    model = RetryModel(args.p1, args.q, args.max_attempts, args.shots, args.seed)
    measured = engine_trial(model) if args.engine else simulate(model)
    _emit(
        {
            "model": {"p1": args.p1, "q": args.q, "max_attempts": args.max_attempts, "n_shots": args.shots, "seed": args.seed},
            "source": "engine" if args.engine else "monte_carlo",
            "simulated": measured.to_dict(),
            "analytic": analytic_stats(model).to_dict(),
        }
    )
    return EXIT_OK


def cmd_inspect(args) -> int:
    info = inspect_run(Path(args.run_dir))
    _emit(info)
    print(f"run {info['run_id']}  phase {info['phase']}", file=sys.stderr)
    print(f"{'shot':>4}  {'attempts':>8}  {'score':>5}  ok  modes", file=sys.stderr)
    for s in info["shots"]:
        ok = "yes" if s["converged"] else "no"
        print(f"{s['index']:>4}  {s['attempts']:>8}  {s['score']:>5.2f}  {ok:<3} {' > '.join(s['modes'])}", file=sys.stderr)
    return EXIT_OK


def cmd_replay(args) -> int:
    result = replay_shot(Path(args.run_dir), args.shot)
    _emit(result)
    return EXIT_OK if result["identical"] else EXIT_ERROR


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="storyloop", description="Closed-loop multi-shot video generation runs.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="execute a fresh run")
    r.add_argument("--idea", required=True, help="idea text, or a file holding text or an Idea JSON object")
    r.add_argument("--config", help="canonical JSON config file")
    r.add_argument("--backend", choices=("real", "mock"))
    r.add_argument("--seed", type=_u64)
    r.add_argument("--pacing", help="pacing template id")
    r.add_argument("--no-gcm", action="store_true", help="disable entity memory conditioning")
    r.add_argument("--no-flf2v", action="store_true", help="disable first-last-frame mode")
    r.add_argument("--plan", help="mock backend: storyboard JSON the planner returns")
    r.add_argument("--verifier", choices=MOCK_VERIFIERS, help="mock backend: verifier kind")
    r.add_argument("--out", required=True, help="run directory (absent or empty)")
    r.set_defaults(func=cmd_run)

    rs = sub.add_parser("resume", help="continue an interrupted run")
    rs.add_argument("run_dir")
    rs.set_defaults(func=cmd_resume)

    v = sub.add_parser("validate-plan", help="validate a storyboard JSON file")
    v.add_argument("plan")
    v.add_argument("--max-shots", type=int, default=24)
    v.set_defaults(func=cmd_validate_plan)

    s = sub.add_parser("simulate", help="retry statistics")
    s.add_argument("--p1", type=_probability, default=0.72)
    s.add_argument("--q", type=_probability, default=0.6)
    s.add_argument("--max-attempts", type=int, default=3)
    s.add_argument("--shots", type=int, default=100_000)
    s.add_argument("--seed", type=_u64, default=0)
    s.add_argument("--engine", action="store_true", help="drive the regeneration loop with mock backends")
    s.add_argument("--fit-paper", action="store_true", help="fit q to the published figures")
    s.add_argument("--csv", help="also write an analytic (p1, q) sweep to this path")
    s.set_defaults(func=cmd_simulate)

    i = sub.add_parser("inspect", help="summarize a run directory")
    i.add_argument("run_dir")
    i.set_defaults(func=cmd_inspect)

    rp = sub.add_parser("replay", help="re-execute one shot and compare with the journal")
    rp.add_argument("run_dir")
    rp.add_argument("--shot", type=int, required=True)
    rp.set_defaults(func=cmd_replay)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_ERROR
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
    except (StoryloopError, ValueError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
