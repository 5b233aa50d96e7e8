"""Run configuration: an INI-style file with a fixed schema plus overrides."""
from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _int_list(v: str) -> list[int]:
    return [int(x) for x in v.replace(" ", "").split(",") if x]


def _opt_float(v: str):
    return None if v.strip().lower() in ("", "none") else float(v)


def _opt_int(v: str):
    return None if v.strip().lower() in ("", "none") else int(v)


SCHEMA = {
    "paths": {
        "data": (str, "data"),
        "cache": (str, ""),
        "checkpoint": (str, ""),
        "pretrained": (str, ""),
        "profile_csv": (str, ""),
    },
    "data": {
        "source": (str, "synthetic"),
        "n_scans": (int, 64),
        "T_total": (int, 32),
        "snr": (float, 4.0),
        "label_effect": (float, 1.0),
        "task_kind": (str, "binary-classification"),
        "grid": (_int_list, [64, 64, 64]),
        "split_seed": (int, 0),
        "labels_csv": (str, ""),
    },
    "autoencoder": {
        "backend": (str, "tiny"),
        "checkpoint": (str, ""),
        "latent_channels": (int, 32),
        "init_seed": (int, 0),
    },
    "tokenizer": {
        "scheme": (str, "27x3072"),
    },
    "model": {
        "layers": (int, 2),
        "heads": (int, 4),
        "kv_heads": (int, 2),
        "model_dim": (int, 64),
        "mlp_ratio": (float, 2.0),
        "norm_kind": (str, "rms"),
        "rope": (_bool, True),
    },
    "train": {
        "lr": (float, 3e-4),
        "weight_decay": (float, 1e-2),
        "batch_size": (int, 4),
        "epochs": (int, 10),
        "T": (int, 16),
        "eval_T": (_opt_int, None),
        "pos_weight": (_opt_float, None),
    },
    "pretrain": {
        "lr": (float, 3e-4),
        "weight_decay": (float, 1e-2),
        "batch_size": (int, 4),
        "epochs": (int, 10),
        "T": (int, 16),
        "mask_ratio": (float, 0.5),
    },
    "analysis": {
        "ig_steps": (int, 64),
        "confidence": (float, 0.75),
        "max_subjects": (int, 4),
        "profile_T": (_int_list, [16, 64, 256]),
        "profile_batch": (int, 4),
        "profile_steps": (int, 2),
        "recon_scans": (int, 2),
    },
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    source: str = "<defaults>"

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def snapshot(self) -> str:
        lines = [f"# resolved from {self.source}"]
        for section, keys in self.values.items():
            lines.append(f"[{section}]")
            for k, v in keys.items():
                if isinstance(v, list):
                    v = ",".join(str(x) for x in v)
                lines.append(f"{k} = {'' if v is None else v}")
            lines.append("")
        return "\n".join(lines)


def defaults() -> dict:
    return {s: {k: (list(d) if isinstance(d, list) else d) for k, (_, d) in keys.items()}
            for s, keys in SCHEMA.items()}


def _line_index(text: str) -> dict:
    """(section, key) -> 1-based line number, for diagnostics."""
    where, section = {}, None
    for n, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            where[(section, None)] = n
            continue
        m = re.match(r"\s*([^#;=:\s][^=:]*?)\s*[=:]", line)
        if m and section is not None:
            where[(section, m.group(1).strip().lower())] = n
    return where


def _coerce(section, key, raw, origin):
    if section not in SCHEMA:
        raise ConfigError(f"{origin}: unknown section [{section}]")
    # configparser lower-cases keys; match schema keys case-insensitively
    schema_keys = {k.lower(): k for k in SCHEMA[section]}
    if key.lower() not in schema_keys:
        raise ConfigError(f"{origin}: unknown key {key!r} in [{section}]")
    name = schema_keys[key.lower()]
    kind = SCHEMA[section][name][0]
    try:
        return name, kind(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{origin}: bad value {raw!r} for {section}.{name}: {exc}") from None


def load_config(path=None, overrides=()) -> RunConfig:
    """Parse ``path`` (may be None for all defaults) then apply ``section.key=value`` overrides."""
    values = defaults()
    source = "<defaults>"
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        lines = _line_index(text)
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            sec_line = lines.get((section, None), "?")
            if section not in SCHEMA:
                raise ConfigError(f"{path}:{sec_line}: unknown section [{section}]")
            for key, raw in parser.items(section):
                origin = f"{path}:{lines.get((section, key), sec_line)}"
                name, val = _coerce(section, key, raw, origin)
                values[section][name] = val
        source = str(path)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, raw = item.split("=", 1)
        section, key = dotted.split(".", 1)
        name, val = _coerce(section.strip(), key.strip(), raw.strip(), f"override {item!r}")
        values[section.strip()][name] = val
    _validate(values)
    return RunConfig(values, source)


def _validate(v: dict):
    if v["data"]["task_kind"] not in ("binary-classification", "regression"):
        raise ConfigError("data.task_kind must be binary-classification or regression")
    if v["autoencoder"]["backend"] not in ("tiny", "lossless", "external"):
        raise ConfigError("autoencoder.backend must be tiny, lossless or external")
    if v["data"]["source"] not in ("synthetic", "nifti"):
        raise ConfigError("data.source must be synthetic or nifti")
    if not 0.0 <= v["pretrain"]["mask_ratio"] <= 1.0:
        raise ConfigError("pretrain.mask_ratio must lie in [0, 1]")
