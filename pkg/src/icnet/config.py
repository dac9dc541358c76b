"""Flat ``section.key = value`` run configuration with typed defaults and a content hash."""

import configparser
import hashlib

from icnet.datasets import data_dir_default


# keys that say where results go rather than what is computed
LOCATION_KEYS = {"run.out"}


class ConfigError(ValueError):
    """Unknown key or a value that does not parse as the key's type."""


DEFAULTS = {
    "run.seed": 0,
    "run.out": "",
    "model.name": "tiny-cnn",
    "model.policy": "none",
    "model.mode": "from_pretrained",
    "model.alpha_mode": "trainable",
    "model.ic_biases": False,
    "data.name": "blobs",
    "data.dir": "",
    "data.n_train": 0,
    "data.n_test": 0,
    "train.epochs": 5,
    "train.batch_size": 128,
    "train.lr": 0.1,
    "train.lr_steps": "",
    "train.lr_factor": 0.1,
    "train.momentum": 0.9,
    "train.weight_decay": 1e-4,
    "train.dtype": "f64",
    "train.record_wall_time": False,
    "distill.teacher": "",
    "distill.teacher_epochs": 5,
    "distill.tau": 4.0,
    "distill.e": 0.005,
    "distill.lambda_start": 0.9,
    "distill.lambda_end": 0.1,
    "distill.lambda_decay": "linear",
    "distill.lambda_steps": 4,
    "distill.alpha_start": 0.0,
    "distill.alpha_end": 0.1,
    "distill.kd_form": "weak_kd",
    "distill.teacher_bn": "batch",
    "xor.kind": "both",
    "xor.seeds": 20,
    "xor.steps": 5000,
    "xor.lr": 0.1,
}


def _coerce(key, raw):
    default = DEFAULTS[key]
    if type(raw) is type(default):
        return raw
    text = str(raw).strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


class RunConfig:
    """Resolved configuration: defaults, then file, then ``key=value`` overrides."""

    def __init__(self, values=None):
        self.values = dict(DEFAULTS)
        if not self.values["data.dir"]:
            self.values["data.dir"] = data_dir_default()
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key, value):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _coerce(key, value)

    def __getitem__(self, key):
        return self.values[key]

    def update_from_file(self, path):
        parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
        parser.optionxform = str
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            if text.lstrip().startswith("["):
                parser.read_string(text)
            else:
                parser.read_string("[__flat__]\n" + text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
        for section in parser.sections():
            for key, value in parser.items(section):
                full = key if section == "__flat__" else f"{section}.{key}"
                self.set(full, value)

    def update_from_overrides(self, items):
        for item in items:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, value = item.split("=", 1)
            self.set(key.strip(), value)

    def section(self, name):
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    def lr_steps(self):
        text = self.values["train.lr_steps"].strip()
        try:
            return tuple(int(s) for s in text.replace(";", ",").split(",") if s.strip())
        except ValueError:
            raise ConfigError(f"train.lr_steps: {text!r} is not a comma list of epochs") from None

    def resolved_text(self):
        lines = []
        for k in sorted(set(self.values) - LOCATION_KEYS):
            v = self.values[k]
            lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def hash(self):
        return hashlib.sha256(self.resolved_text().encode()).hexdigest()
