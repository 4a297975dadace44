"""Access to the prompt texts and JSON schemas shipped with the package."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources


@lru_cache(maxsize=None)
def prompt(name: str) -> str:
    return resources.files("storyloop").joinpath("prompts", f"{name}.txt").read_text("utf-8")


@lru_cache(maxsize=None)
def schema(name: str) -> dict:
    parts = name.split("/")
    return json.loads(resources.files("storyloop").joinpath("schemas", *parts).read_text("utf-8"))
