"""JSON schema validation for model, grid and spec files."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

import jsonschema

KINDS = ("model", "grid", "spec")


class SchemaError(ValueError):
    """Input file is readable JSON but does not match its schema."""


@lru_cache(maxsize=None)
def load_schema(kind: str) -> dict:
    if kind not in KINDS:
        raise KeyError(f"no schema named {kind!r}; known: {', '.join(KINDS)}")
    text = (resources.files("restraj") / "schemas" / f"{kind}.schema.json").read_text()
    return json.loads(text)


def validate(kind: str, data, source: str = "<data>"):
    """Raise :class:`SchemaError` naming the offending field; returns ``data``."""
    validator = jsonschema.Draft202012Validator(load_schema(kind))
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        where = "/".join(str(p) for p in err.absolute_path) or "(root)"
        raise SchemaError(f"{source}: {kind} schema violation at {where}: {err.message}")
    return data


def load_json(kind: str, path):
    """Read ``path`` and validate it as ``kind``.

    Raises FileNotFoundError for a missing file and SchemaError for malformed
    JSON or a schema violation.
    """
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON: {exc}") from exc
    return validate(kind, data, str(path))
