"""Plain-text prompt templates with ``{{placeholder}}`` substitution."""

from __future__ import annotations

import re
from importlib import resources
from pathlib import Path

from .core import ValidationError

_PLACEHOLDER = re.compile(r"\{\{\s*(\w+)\s*\}\}")

REQUIRED_TEMPLATES = ("framing", "explore", "critique", "revise", "react", "judge")


def render(template: str, **values: object) -> str:
    def sub(m: re.Match[str]) -> str:
        key = m.group(1)
        if key not in values:
            raise KeyError(f"template placeholder {{{{{key}}}}} has no value")
        return str(values[key])

    return _PLACEHOLDER.sub(sub, template)


def load_templates(directory: str | Path | None = None) -> dict[str, str]:
    """Read every ``*.txt`` template; shipped defaults fill any gaps."""
    found: dict[str, str] = {}
    shipped = resources.files("promptguard").joinpath("data/templates")
    for entry in shipped.iterdir():
        if entry.name.endswith(".txt"):
            found[entry.name[:-4]] = entry.read_text(encoding="utf-8")
    if directory is not None:
        for path in sorted(Path(directory).glob("*.txt")):
            found[path.stem] = path.read_text(encoding="utf-8")
    missing = [name for name in REQUIRED_TEMPLATES if name not in found]
    if missing:
        raise ValidationError(f"missing prompt templates: {', '.join(missing)}")
    return found
