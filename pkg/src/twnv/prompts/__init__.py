"""Versioned prompt templates shipped with the package."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources


@dataclass(frozen=True)
class Prompt:
    name: str
    version: str
    template: str

    def render(self, **fields) -> str:
        return self.template.format(**fields)

    @property
    def tag(self) -> str:
        return f"{self.name}@v{self.version}"


@lru_cache(maxsize=None)
def load_prompt(name: str) -> Prompt:
    text = resources.files(__name__).joinpath(f"{name}.txt").read_text(encoding="utf-8")
    header, _, body = text.partition("\n")
    if not header.startswith("# version:"):
        raise ValueError(f"prompt {name} has no version header")
    return Prompt(name, header.split(":", 1)[1].strip(), body.rstrip("\n"))
