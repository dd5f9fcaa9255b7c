"""Experiment configuration: a strict INI schema with typed values and defaults."""
from __future__ import annotations

import configparser
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

KINDS = ("train", "eval", "saddle", "diagnose", "probe-surface")


class ConfigError(ValueError):
    pass


def _num(s: str) -> float:
    # accepts "0.3", "8/255", "1e-3"
    s = s.strip()
    try:
        return float(s)
    except ValueError:
        return float(Fraction(s.replace(" ", "")))


def _int(s):
    return int(s.strip())


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s):
    return tuple(int(t) for t in s.replace(",", " ").split())


def _nums(s):
    return tuple(_num(t) for t in s.replace(",", " ").split())


def _opt_num(s):
    return None if s.strip().lower() in ("", "none", "auto") else _num(s)


def _opt_str(s):
    return None if s.strip().lower() in ("", "none") else s.strip()


def _choice(*opts):
    def parse(s):
        v = s.strip()
        if v not in opts:
            raise ValueError(f"expected one of {', '.join(opts)}, got {v!r}")
        return v
    return parse


def _int_or(word):
    def parse(s):
        v = s.strip()
        return v if v == word else int(v)
    return parse


# section -> key -> (parser, default)
SCHEMA = {
    "experiment": {
        "kind": (_choice(*KINDS), "train"),
        "seed": (_int, 0),
    },
    "data": {
        "source": (_choice("synth", "mnist", "cifar"), "synth"),
        "per_class": (_int, 1000),
        "num_classes": (_int, 10),
        "image_size": (_int, 28),
        "noise": (_num, 0.3),
        "data_seed": (_int, 0),
        "limit": (lambda s: None if s.strip().lower() in ("", "none") else int(s), None),
        "path": (_opt_str, None),
    },
    "model": {
        "kind": (_choice("mlp", "cnn"), "cnn"),
        "channels": (_ints, (8, 16)),
        "widths": (_ints, (100,)),
    },
    "train": {
        "method": (_choice("clean", "pgd_at", "fgsm_rs", "atta", "atas"), "atas"),
        "epochs": (_int, 15),
        "batch_size": (_int, 32),
        "lr": (_num, 0.1),
        "lr_milestones": (_nums, (0.8, 0.93)),
        "lr_decay": (_num, 0.1),
        "epsilon": (_num, 8 / 255),
        "alpha": (_opt_num, None),
        "pgd_steps": (_int, 10),
        "init_point": (_choice("previous", "random"), "previous"),
        "augment": (_bool, False),
        "pad": (_int, 2),
        "eval_size": (_int, 500),
        "eval_pgd50": (_bool, False),
    },
    "adaptive": {
        "beta": (_num, 0.5),
        "c": (_num, 0.01),
        # largest step gamma / c; "auto" scales 16/255 by epsilon / (8/255)
        "max_step": (_opt_num, None),
        "reset_period": (_int_or("never"), 10),
        "storage_side": (_int_or("full"), 8),
    },
    "saddle": {
        "family": (_choice("pareto", "equal", "quadratic"), "pareto"),
        "method": (_choice("sgdbca", "asgdbca"), "asgdbca"),
        "n": (_int, 50),
        "d": (_int, 10),
        "p": (_int, 10),
        "epsilon": (_num, 0.05),
        "radius": (_num, 1.0),
        "offset": (_num, 1.0),
        # lam and mu only shape the quadratic family
        "lam": (_num, 1.0),
        "mu": (_num, 0.5),
        "T": (_int, 1000),
        "beta": (_num, 0.5),
        "eta_theta": (_opt_num, None),
        "eta_x": (_opt_num, None),
        "checkpoints": (_ints, ()),
        "pair": (_choice("next", "current"), "next"),
        "problem_seed": (_int, 0),
    },
    "diagnose": {
        "lo_decile": (_int, 1),
        "hi_decile": (_int, 10),
        "profile_epochs": (_int, 3),
        "iteration_budget": (lambda s: None if s.strip().lower() in ("", "none", "auto") else int(s), None),
        "window": (_int, 5),
        "drop_thresh": (_num, 0.05),
        "fgsm_floor": (_num, 0.5),
    },
    "probe": {
        "grid_n": (_int, 21),
        "examples": (_int, 100),
        "checkpoint": (_opt_str, None),
    },
    "eval": {
        "checkpoint": (_opt_str, None),
        "examples": (_int, 1000),
    },
}


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class ExperimentConfig:
    values: dict          # section -> key -> typed value
    source_text: str = ""

    def __getitem__(self, section):
        return self.values[section]

    @property
    def kind(self):
        return self.values["experiment"]["kind"]

    @property
    def seed(self):
        return self.values["experiment"]["seed"]

    def with_overrides(self, **sections) -> "ExperimentConfig":
        vals = {s: dict(kv) for s, kv in self.values.items()}
        for s, kv in sections.items():
            for k, v in kv.items():
                if k not in SCHEMA[s]:
                    raise ConfigError(f"unknown key {s}.{k}")
                vals[s][k] = v
        _validate(vals)
        return ExperimentConfig(vals, self.source_text)

    def serialize(self) -> str:
        """Canonical INI text: every section and key in schema order."""
        lines = []
        for s, keys in SCHEMA.items():
            lines.append(f"[{s}]")
            for k in keys:
                lines.append(f"{k} = {_fmt(self.values[s][k])}")
            lines.append("")
        return "\n".join(lines)

    # derived objects --------------------------------------------------------

    def adaptive_config(self):
        """Adaptive settings; without ``max_step`` the 16/255 default is scaled to the budget."""
        from .adaptive import AdaptiveConfig
        a = self["adaptive"]
        kw = dict(beta=a["beta"], reset_period=a["reset_period"], storage_side=a["storage_side"])
        if a["max_step"] is None:
            return AdaptiveConfig.for_budget(self["train"]["epsilon"], c=a["c"], **kw)
        return AdaptiveConfig(gamma=a["max_step"] * a["c"], c=a["c"], **kw)

    def max_step(self):
        return self.adaptive_config().max_step

    def train_config(self):
        from .trainers import TrainConfig
        t = self["train"]
        keys = ("method", "epochs", "batch_size", "lr", "lr_milestones", "lr_decay", "epsilon",
                "alpha", "pgd_steps", "init_point", "augment", "pad", "eval_size", "eval_pgd50")
        return TrainConfig(**{k: t[k] for k in keys}, adaptive=self.adaptive_config(), seed=self.seed)

    def model_config(self, input_shape, num_classes):
        from .models import ModelConfig
        m = self["model"]
        return ModelConfig(kind=m["kind"], input_shape=tuple(input_shape), widths=m["widths"],
                           channels=m["channels"], num_classes=num_classes, seed=self.seed)


def _validate(vals):
    t, a, s, dg = vals["train"], vals["adaptive"], vals["saddle"], vals["diagnose"]
    checks = [
        (t["epochs"] >= 1, "train.epochs must be >= 1"),
        (t["batch_size"] >= 1, "train.batch_size must be >= 1"),
        (t["lr"] > 0, "train.lr must be > 0"),
        (t["epsilon"] >= 0, "train.epsilon must be >= 0"),
        (t["alpha"] is None or t["alpha"] >= 0, "train.alpha must be >= 0"),
        (t["eval_size"] >= 1, "train.eval_size must be >= 1"),
        (0 <= a["beta"] <= 1, "adaptive.beta must lie in [0, 1]"),
        (a["c"] > 0, "adaptive.c must be > 0"),
        (a["max_step"] is None or a["max_step"] >= 0, "adaptive.max_step must be >= 0"),
        (a["reset_period"] == "never" or a["reset_period"] >= 1, "adaptive.reset_period must be >= 1"),
        (a["storage_side"] == "full" or a["storage_side"] >= 1, "adaptive.storage_side must be >= 1"),
        (s["T"] >= 1, "saddle.T must be >= 1"),
        (0 <= s["beta"] < 1, "saddle.beta must lie in [0, 1)"),
        (min(s["n"], s["d"], s["p"]) >= 1, "saddle.n, saddle.d and saddle.p must be >= 1"),
        (all(1 <= c <= s["T"] for c in s["checkpoints"]), "saddle.checkpoints must lie in [1, T]"),
        (1 <= dg["lo_decile"] <= dg["hi_decile"] <= 10, "diagnose deciles need 1 <= lo <= hi <= 10"),
        (vals["data"]["per_class"] >= 1, "data.per_class must be >= 1"),
        (vals["probe"]["grid_n"] >= 2, "probe.grid_n must be >= 2"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    vals = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            parser = SCHEMA[section][key][0]
            try:
                vals[section][key] = parser(raw)
            except (ValueError, ZeroDivisionError) as e:
                raise ConfigError(f"{section}.{key}: {e}") from None
    _validate(vals)
    return ExperimentConfig(vals, text)


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    return parse_config(p.read_text())


def default_config() -> ExperimentConfig:
    return parse_config("")
