"""Prompt template loading and rendering.

Templates are plain-text files with {name} placeholders. Rendering replaces
only the placeholders it is given values for, so literal braces elsewhere in
a template (e.g. JSON examples) pass through untouched.
"""

from __future__ import annotations

import re
from importlib import resources
from pathlib import Path

from .data import ConfigError

TEMPLATE_NAMES = ("rewrite", "fabricate", "judge", "text2table", "maskfill", "adjudicate")


def render(template: str, **fields: str) -> str:
    pattern = re.compile(r"\{(" + "|".join(re.escape(k) for k in fields) + r")\}") if fields else None
    if pattern is None:
        return template
    return pattern.sub(lambda m: fields[m.group(1)], template)


class PromptLibrary:
    """Loads named ``*.prompt`` files from a directory (package data by default)."""

    def __init__(self, directory: str | Path | None = None):
        self.directory = Path(directory) if directory else None
        self._cache: dict[str, str] = {}

    def template(self, name: str) -> str:
        if name in self._cache:
            return self._cache[name]
        filename = f"{name}.prompt"
        try:
            if self.directory is not None:
                text = (self.directory / filename).read_text(encoding="utf-8")
            else:
                text = (resources.files("wordfab") / "templates" / filename).read_text(encoding="utf-8")
        except (OSError, FileNotFoundError) as exc:
            raise ConfigError(f"prompt template {filename!r} not found: {exc}") from exc
        self._cache[name] = text
        return text

    def render(self, name: str, **fields: str) -> str:
        return render(self.template(name), **fields)


def library_for(templates_dir: str) -> PromptLibrary:
    return PromptLibrary(templates_dir or None)
