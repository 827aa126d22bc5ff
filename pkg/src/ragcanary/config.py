"""Run configuration: one JSON file, command-line overrides, fail-fast checks.

Every piece of randomness flows from seeds in the config; there are no
wall-clock defaults, so two runs with the same config and fixtures produce
identical outputs. Results files are named by the config fingerprint.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ValidationError


@dataclass
class RunConfig:
    data: dict
    base_dir: Path

    @staticmethod
    def load(path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"config file {path} does not exist")
        with open(path, "r", encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ValidationError(f"config {path} must be a JSON object")
        return RunConfig(data=data, base_dir=path.parent.resolve())

    def get(self, dotted: str, default=None):
        node = self.data
        for part in dotted.split("."):
            if not isinstance(node, dict) or part not in node:
                return default
            node = node[part]
        return node

    def require(self, dotted: str):
        sentinel = object()
        value = self.get(dotted, sentinel)
        if value is sentinel:
            raise ValidationError(f"config is missing required key {dotted!r}")
        return value

    def set(self, dotted: str, value) -> None:
        parts = dotted.split(".")
        node = self.data
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValidationError(f"config key {dotted!r} collides with a non-object value")
        node[parts[-1]] = value

    def resolve_path(self, dotted: str, must_exist: bool = True) -> Path:
        raw = self.require(dotted)
        path = Path(raw)
        if not path.is_absolute():
            path = self.base_dir / path
        if must_exist and not path.exists():
            raise ValidationError(f"path {path} (config key {dotted!r}) does not exist")
        return path

    def seed(self) -> int:
        value = self.require("seed")
        if not isinstance(value, int):
            raise ValidationError(f"config 'seed' must be an integer, got {value!r}")
        return value

    def fingerprint(self) -> str:
        canonical = json.dumps(self.data, sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]

    def effective_dump(self) -> str:
        return json.dumps(self.data, sort_keys=True, ensure_ascii=False, indent=2)

    def copy(self) -> "RunConfig":
        return RunConfig(copy.deepcopy(self.data), self.base_dir)
