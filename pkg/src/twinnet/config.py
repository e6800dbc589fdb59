"""INI run configuration: typed defaults, file + command-line overrides, snapshots.

Every key lives in a section; overrides use ``section.key=value``. Keys not
listed in ``DEFAULTS`` are rejected, and the error names the offending key.
"""
from __future__ import annotations

import configparser
import io
import os
from pathlib import Path

DATA_ENV = "TWINNET_DATA_DIR"
DEFAULT_ALPHAS = (2.0, 1.5, 1.0, 0.5, 0.25, 0.1)

DEFAULTS: dict[str, dict] = {
    "dataset": {
        "name": "delayed-copy",        # mnist | text | delayed-copy
        "path": "",                    # mnist directory or text file; falls back to $TWINNET_DATA_DIR
        "conditional": False,          # mnist: one-hot label conditioning
        "binarization": "fixed-threshold",
        "train_size": 10000,
        "valid_size": 2000,
        "test_size": 0,
        "seq_len": 100,                # text chunk length
        "max_chars": 0,                # text: truncate the corpus (0 = all)
        "valid_fraction": 0.05,
        "copy_length": 30,
        "copy_offset": 15,
        "copy_alphabet": 4,
        "copy_count": 5000,
        "copy_valid": 500,
        "data_seed": 0,
    },
    "model": {
        "cell": "lstm",
        "hidden": 64,
        "layers": 1,
        "embed_dim": 16,
        "dropout": 0.0,
        "share_embeddings": False,
        "init": "uniform",
        "precision": "float64",
    },
    "objective": {
        "alpha": 1.5,
        "backward_mode": "twin",
        "g_mode": "learned",
        "noise_sigma": 1.0,
        "normalize_by_length": False,
    },
    "trainer": {
        "optimizer": "adam",
        "lr": 0.001,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "rho": 0.95,
        "clip_norm": 5.0,
        "batch_size": 20,
        "epochs": 10,
        "lr_decay_epochs": (5, 10, 15),
        "lr_decay_factor": 0.5,
        "seed": 0,
        "patience": 0,
        "eval_batch_size": 100,
    },
    "sample": {
        "n": 16,
        "length": 0,                   # 0 = natural length of the dataset
        "temperature": 1.0,
        "seed": 0,
    },
    "sweep": {
        "alphas": DEFAULT_ALPHAS,
    },
    "diagnose": {
        "rare_cutoff": 1500,
        "bins": 20,
        "max_sequences": 0,
        "split": "valid",
    },
    "gradcheck": {
        "hidden": 8,
        "num_classes": 4,
        "length": 6,
        "batch": 2,
        "embed_dim": 5,
        "alpha": 1.5,
        "epsilon": 3e-4,
        "seed": 0,
        "tolerance": 1e-4,
    },
}


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _parse(key: str, default, raw: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x for x in raw.replace(" ", "").split(",") if x]
            kind = type(default[0]) if default else float
            return tuple(kind(x) for x in items)
        return raw
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {type(default).__name__}") from None


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


class Config:
    """Section -> key -> typed value, starting from ``DEFAULTS``."""

    def __init__(self, values: dict[str, dict] | None = None):
        self.values = {s: dict(d) for s, d in DEFAULTS.items()}
        for section, kv in (values or {}).items():
            for k, v in kv.items():
                self.set(f"{section}.{k}", v)

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def get(self, key: str):
        section, name = self._split(key)
        return self.values[section][name]

    @staticmethod
    def _split(key: str) -> tuple[str, str]:
        if "." not in key:
            raise ConfigError(key, "keys take the form section.key")
        section, name = key.split(".", 1)
        if section not in DEFAULTS:
            raise ConfigError(key, f"unknown section {section!r}")
        if name not in DEFAULTS[section]:
            raise ConfigError(key, "unknown key")
        return section, name

    def set(self, key: str, value) -> None:
        section, name = self._split(key)
        default = DEFAULTS[section][name]
        if isinstance(value, str) and not isinstance(default, str):
            value = _parse(key, default, value)
        self.values[section][name] = value

    def override(self, pairs: list[str]) -> "Config":
        for item in pairs:
            if "=" not in item:
                raise ConfigError(item, "override must look like section.key=value")
            k, v = item.split("=", 1)
            self.set(k.strip().lstrip("-"), v)
        return self

    @classmethod
    def from_file(cls, path) -> "Config":
        path = Path(path)
        if not path.exists():
            raise ConfigError("config", f"file not found: {path}")
        return cls.from_string(path.read_text(encoding="utf-8"))

    @classmethod
    def from_string(cls, text: str) -> "Config":
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError("config", str(exc).splitlines()[0]) from None
        cfg = cls()
        for section in cp.sections():
            for k, v in cp.items(section):
                cfg.set(f"{section}.{k}", v)
        return cfg

    def to_string(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for section, kv in self.values.items():
            cp[section] = {k: _render(v) for k, v in kv.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_string(), encoding="utf-8")
        return path


def data_path(cfg: Config, default_sub: str) -> Path:
    """Resolve ``dataset.path``, falling back to ``$TWINNET_DATA_DIR/<default_sub>``."""
    raw = cfg.get("dataset.path")
    if raw:
        p = Path(raw).expanduser()
    elif os.environ.get(DATA_ENV):
        p = Path(os.environ[DATA_ENV]) / default_sub
    else:
        raise ConfigError("dataset.path", f"required for dataset {cfg.get('dataset.name')!r} "
                          f"(or set {DATA_ENV})")
    if not p.exists():
        raise ConfigError("dataset.path", f"does not exist: {p}")
    return p
