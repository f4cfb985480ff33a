"""Typed run configuration: INI or JSON files, ``--key value`` overrides, seed substreams."""

from __future__ import annotations

import configparser
import json
import os
import zlib
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean (on/off), got {text!r}")


def _int_list(text) -> list:
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(v) for v in str(text).replace(" ", "").split(",") if v]


_CASTS = {int: lambda v: int(v) if not isinstance(v, bool) else _reject(v),
          float: float, bool: _bool, str: str, list: _int_list}


def _reject(v):
    raise ValueError(f"expected a number, got {v!r}")


# section -> key -> (type, default)
SCHEMA = {
    "run": {
        "seed": (int, 0),
        "threads": (int, 1),
        "ablate": (str, ""),
    },
    "data": {
        "source": (str, "blobs"),
        "classes": (int, 3),
        "per_class": (int, 140),
        "shape": (list, [16]),
        "spread": (float, 0.12),
        "separation": (float, 1.0),
        "noise": (float, 0.0),
        "test_per_class": (int, 40),
        "path": (str, ""),
        "labels_path": (str, ""),
        "test_path": (str, ""),
        "test_labels_path": (str, ""),
    },
    "model": {
        "kind": (str, "mlp"),
        "depth": (int, 1),
        "width": (int, 32),
        "norm": (str, "instance"),
    },
    "buffer": {
        "experts": (int, 2),
        "epochs": (int, 20),
        "lr": (float, 0.05),
        "momentum": (float, 0.9),
        "batch_size": (int, 30),
        "halve_lr": (bool, True),
        "smooth": (bool, True),
        "lambda_start": (float, 0.5),
        "ramp_epochs": (int, 5),
        "mu": (float, 1.0),
        "k_target": (float, 1.0),
    },
    "distill": {
        "M": (int, 2),
        "N": (int, 20),
        "T_plus": (int, 2),
        "ipc": (int, 1),
        "beta_mode": (str, "equal"),
        "rho": (float, 0.1),
        "vartheta": (float, 8.0),
        "alpha0": (float, 0.05),
        "outer_iters": (int, 200),
        "lr_images": (float, 0.01),
        "lr_alpha": (float, 1e-3),
        "intermediate": (bool, True),
        "balance": (bool, True),
        "syn_batch": (int, 0),
        "flip": (bool, False),
        "shift": (int, 0),
        "scale": (float, 0.0),
        "init": (str, "representative"),
        "eval_every": (int, 0),
        "buffer_dir": (str, ""),
    },
    "eval": {
        "target": (str, "synthetic"),
        "syn_dir": (str, ""),
        "n_seeds": (int, 3),
        "iters": (int, 1000),
        "halve_at": (int, -1),
        "lr": (float, 0.0),
    },
}

CHOICES = {
    "data.source": ("blobs", "idx", "csv"),
    "model.kind": ("mlp", "convnet"),
    "model.norm": ("instance", "none"),
    "distill.beta_mode": ("equal", "scaled"),
    "distill.init": ("representative", "random"),
    "eval.target": ("synthetic", "random", "full"),
    "run.ablate": ("", "vanilla-mtt"),
}

ABLATIONS = {
    "vanilla-mtt": {"distill.rho": 0.0, "distill.balance": False, "distill.intermediate": False,
                    "distill.beta_mode": "equal"},
}


def _key_index() -> dict:
    """Bare key (dashes or underscores, any case) -> list of dotted paths."""
    index: dict = {}
    for section, keys in SCHEMA.items():
        for key in keys:
            for alias in {key, key.lower()}:
                index.setdefault(alias, []).append(f"{section}.{key}")
    return index


class RunConfig:
    """Resolved configuration, addressable as ``cfg["distill.rho"]`` or ``cfg.distill["rho"]``."""

    def __init__(self, values: dict | None = None):
        self._values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
        for s, k, v in _iter_nested(values or {}):
            self.set(f"{s}.{k}", v)

    def __getattr__(self, section):
        if section.startswith("_") or section not in SCHEMA:
            raise AttributeError(section)
        return dict(self._values[section])

    def __getitem__(self, path: str):
        s, k = self._resolve(path)
        return self._values[s][k]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.to_dict() == other.to_dict()

    @staticmethod
    def _resolve(path: str) -> tuple:
        key = path.replace("-", "_")
        if "." in key:
            s, _, k = key.partition(".")
            if s not in SCHEMA:
                raise ConfigError(path, f"unknown section (expected one of {', '.join(SCHEMA)})")
            match = [k2 for k2 in SCHEMA[s] if k2 == k] or [k2 for k2 in SCHEMA[s] if k2.lower() == k.lower()]
            if not match:
                raise ConfigError(path, "unknown key")
            return s, match[0]
        index = _key_index()
        hits = index.get(key) or index.get(key.lower())
        if not hits:
            raise ConfigError(path, "unknown key")
        if len(set(hits)) > 1:
            raise ConfigError(path, f"ambiguous key, use one of {', '.join(sorted(set(hits)))}")
        s, _, k = hits[0].partition(".")
        return s, k

    def set(self, path: str, value) -> None:
        s, k = self._resolve(path)
        typ = SCHEMA[s][k][0]
        field_path = f"{s}.{k}"
        try:
            cast = _CASTS[typ](value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(field_path, str(exc)) from None
        if field_path in CHOICES and cast not in CHOICES[field_path]:
            raise ConfigError(field_path, f"must be one of {CHOICES[field_path]}, got {cast!r}")
        if field_path == "run.ablate" and cast:
            for p, v in ABLATIONS[cast].items():
                self.set(p, v)
        self._values[s][k] = cast

    def apply_overrides(self, overrides) -> "RunConfig":
        """``overrides`` is a sequence of (key, value) pairs; later ones win."""
        for key, value in overrides:
            self.set(key, value)
        if self["run.ablate"]:
            # ablation settings take precedence over individual flags
            for p, v in ABLATIONS[self["run.ablate"]].items():
                self.set(p, v)
        return self

    def to_dict(self) -> dict:
        d = {s: dict(v) for s, v in self._values.items()}
        d["format_version"] = FORMAT_VERSION
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write(self, directory) -> Path:
        path = Path(directory) / "config.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n")
        return path

    @property
    def threads(self) -> int:
        """Requested threads, capped by the ``TOOL_THREADS`` environment variable."""
        n = max(1, self["run.threads"])
        cap = os.environ.get("TOOL_THREADS")
        if cap:
            try:
                n = min(n, max(1, int(cap)))
            except ValueError:
                raise ConfigError("TOOL_THREADS", f"expected an integer, got {cap!r}") from None
        return n

    def seed(self, stream: str, index: int = 0) -> int:
        return substream(self["run.seed"], stream, index)


def _iter_nested(values: dict):
    for s, keys in values.items():
        if s == "format_version":
            if keys != FORMAT_VERSION:
                raise ConfigError("format_version", f"unsupported version {keys}")
            continue
        if s not in SCHEMA:
            raise ConfigError(s, "unknown section")
        if not isinstance(keys, dict):
            raise ConfigError(s, "section must be a table of keys")
        for k, v in keys.items():
            yield s, k, v


def load_config(path=None, overrides=()) -> RunConfig:
    """Read an INI (``.ini``/``.cfg``) or JSON file and apply overrides."""
    values: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(str(path), "config file not found")
        text = p.read_text()
        if p.suffix.lower() == ".json":
            try:
                values = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(str(path), f"invalid JSON: {exc}") from None
        else:
            parser = configparser.ConfigParser(interpolation=None)
            parser.optionxform = str
            try:
                parser.read_string(text)
            except configparser.Error as exc:
                raise ConfigError(str(path), f"invalid INI: {exc}") from None
            values = {s: dict(parser[s]) for s in parser.sections()}
    return RunConfig(values).apply_overrides(overrides)


def parse_overrides(tokens) -> list:
    """``["--outer-iters", "0", "--distill.rho=0.2"]`` -> pairs; a dangling flag is an error."""
    pairs = []
    it = iter(tokens)
    for tok in it:
        if not tok.startswith("--"):
            raise ConfigError(tok, "expected --key value")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            value = next(it, None)
            if value is None:
                raise ConfigError(key, "missing value")
        pairs.append((key, value))
    return pairs


def substream(root: int, name: str, index: int = 0) -> int:
    """Independent 31-bit seed for a named stream, stable across runs and platforms."""
    ss = np.random.SeedSequence([int(root) & 0xFFFFFFFF, zlib.crc32(name.encode()), int(index)])
    return int(ss.generate_state(1)[0] & 0x7FFFFFFF)
