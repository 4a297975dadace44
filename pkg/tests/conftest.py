import json
from pathlib import Path

import pytest

from storyloop.backends.mock import MockPlanner, MockSynthesisBackend, MockVerifier, MockWorld
from storyloop.gcm import MemoryStore, SymbolicExtractor, register
from storyloop.pipeline import RunConfig, RunDeps
from storyloop.storyboard import Idea, parse_plan_json

DATA = Path(__file__).parent / "data"
GOLDEN = DATA / "golden_plan.json"


@pytest.fixture(scope="session")
def golden_bytes() -> bytes:
    return GOLDEN.read_bytes()


@pytest.fixture(scope="session")
def golden_dict(golden_bytes) -> dict:
    return json.loads(golden_bytes)


@pytest.fixture(scope="session")
def golden_plan(golden_bytes):
    return parse_plan_json(golden_bytes)


@pytest.fixture()
def idea():
    return Idea("one day in the life of a computer science student")


@pytest.fixture(scope="session")
def extractor():
    return SymbolicExtractor()


@pytest.fixture(scope="session")
def world():
    return MockWorld(seed=42)


@pytest.fixture(scope="session")
def golden_store(golden_plan, world, extractor):
    synth = MockSynthesisBackend(world)
    store = MemoryStore()
    for decl in golden_plan.characters:
        store = register(store, decl, synth.render_portrait(decl, golden_plan.style), extractor)
    return store


def golden_config(**kw) -> RunConfig:
    base = {"seed": 42, "fsync": False, "mock": {"plan_path": str(GOLDEN)}}
    base.update(kw)
    return RunConfig.from_dict(base)


def mock_deps(plan, world, verifier=None) -> RunDeps:
    return RunDeps(MockPlanner(plan), MockSynthesisBackend(world), verifier or MockVerifier(world), SymbolicExtractor())


# --- acceptance reporting -------------------------------------------------------------

ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  [{detail}]" if detail else ""))
