"""INI run configuration with a fixed schema and a canonical text form.

Every key has a type and a default; unknown sections or keys are rejected by
name. :func:`RunConfig.canonical` writes every section and key in sorted order
with normalized values, so two files that mean the same thing hash the same.
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .train.data import SyntheticDatasetSpec

REQUIRED = object()


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _str_list(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


_SPEC_TYPES = {f.name: (_bool if f.type == "bool" else {"int": int, "float": float}[f.type],
                        f.default)
               for f in fields(SyntheticDatasetSpec) if f.name != "seed"}

SCHEMA = {
    "run": {"seed": (int, REQUIRED)},
    "model": {
        "kind": (str, "mldecoder"),
        "model_dim": (int, 16),
        "num_queries": (int, None),
        "num_heads": (int, 2),
        "ff_hidden_dim": (int, None),
        "query_kind": (str, "fixed_random"),
        "shared_group_fc": (_bool, False),
        "residual": (_bool, True),
        "token_pool": (str, "linear"),
        "group_seed": (int, 0),
        "zsl_mode": (str, "full"),
        "group_size": (int, 1),
        "zsl_head": (str, "nlp"),
        "assignment": (str, None),
    },
    "data": {**_SPEC_TYPES, "seed": (int, None), "cache": (str, None),
             "embeddings": (str, None), "split": (str, None)},
    "train": {
        "loss": (str, "asl"),
        "gamma_neg": (float, 4.0),
        "gamma_pos": (float, 0.0),
        "margin": (float, 0.05),
        "lr": (float, 2e-4),
        "epochs": (int, 30),
        "batch_size": (int, 16),
    },
    "aug": {
        "preset": (str, "none"),
        "random_query_count": (int, None),
        "noise_sigma": (float, None),
    },
    "eval": {"checkpoint": (str, None)},
    "bench": {
        "heads": (_str_list, ("gap", "transformer", "mldecoder")),
        "sizes": (_int_list, (100, 1000, 5000)),
        "num_queries": (int, 100),
        "model_dim": (int, 32),
        "num_heads": (int, 2),
        "height": (int, 7),
        "width": (int, 7),
        "repeats": (int, 5),
        "budget_s": (float, 5.0),
        "batch": (int, 16),
    },
    "output": {"dir": (str, "out")},
}

# Keys naming files that must already exist when the config is loaded.
INPUT_PATHS = (("model", "assignment"), ("data", "embeddings"), ("data", "split"),
               ("eval", "checkpoint"))


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    def __getitem__(self, key):
        section, name = key
        return self.values[section][name]

    def section(self, name):
        return dict(self.values[name])

    def path(self, section, name):
        """Value of a path key resolved against the config file's directory."""
        raw = self.values[section][name]
        if raw is None:
            return None
        p = Path(raw)
        return p if p.is_absolute() else self.base_dir / p

    def set(self, section, name, text):
        """Override one key from its text form (used by command-line flags)."""
        if section not in SCHEMA or name not in SCHEMA[section]:
            raise ConfigError(f"unknown config field [{section}] {name}")
        parse, _ = SCHEMA[section][name]
        try:
            self.values[section][name] = parse(text)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {name}: {exc}") from exc

    def canonical(self, include_output=True):
        lines = []
        for section in sorted(self.values):
            if section == "output" and not include_output:
                continue
            lines.append(f"[{section}]")
            for name in sorted(self.values[section]):
                value = self.values[section][name]
                if value is not None and value is not REQUIRED:
                    lines.append(f"{name} = {_fmt(value)}")
            lines.append("")
        return "\n".join(lines)

    def digest(self):
        """Hash of everything that affects results; the output location does not."""
        return hashlib.sha256(self.canonical(include_output=False).encode()).hexdigest()

    def check_inputs(self):
        for section, name in INPUT_PATHS:
            p = self.path(section, name)
            if p is not None and not p.is_file():
                raise MissingInputError(section, name, p)

    def require_seed(self):
        if self.values["run"]["seed"] is REQUIRED:
            raise ConfigError("[run] seed is required (no wall-clock seeding)")
        return self.values["run"]["seed"]

    def dataset_spec(self) -> SyntheticDatasetSpec:
        d = self.values["data"]
        kw = {k: d[k] for k in _SPEC_TYPES}
        kw["seed"] = self.require_seed() if d["seed"] is None else d["seed"]
        return SyntheticDatasetSpec(**kw)


class MissingInputError(ConfigError):
    def __init__(self, section, name, path):
        super().__init__(f"[{section}] {name}: file not found: {path}")
        self.path = path


def parse_config(text: str, base_dir=".") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    cfg = RunConfig(values, Path(base_dir))
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for name, text_value in parser.items(section):
            cfg.set(section, name, text_value)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise MissingInputError("cli", "--config", path)
    return parse_config(path.read_text(encoding="utf-8"), path.parent)


def default_config(seed=None) -> RunConfig:
    cfg = parse_config("")
    if seed is not None:
        cfg.values["run"]["seed"] = seed
    return cfg
