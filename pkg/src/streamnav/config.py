"""Run configuration: INI key=value files with a fixed schema.

Every knob has a default; a config file only lists overrides. Unknown
sections or keys are rejected outright so typos cannot silently fall back
to defaults. The effective configuration (defaults merged with overrides)
hashes to a hex digest that checkpoints embed and verify on load.
"""

import configparser
import hashlib
import io

import numpy as np

from .encoders import DEFAULT_DIMS
from .policy import PolicyConfig
from .training import LossWeights


class ConfigError(ValueError):
    """Malformed config file, unknown key, or out-of-range value."""


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


# section -> key -> (parser, default)
SCHEMA = {
    "model": {
        "layers": (int, 4),
        "heads": (int, 4),
        "d_model": (int, 64),
        "window": (int, 8),
        "keyframes": (int, 8),
        "queries_per_modality": (int, 3),
        "masked_tokens_per_modality": (int, 16),
        "predictive": (_bool, True),
        "pool_query_embedding": (_bool, False),
        "isolated_queries": (_bool, False),
        "trainable_2d": (_bool, False),
    },
    "loss": {
        "gamma": (float, 0.01),
        "alpha": (float, 0.25),
        "beta": (float, 0.75),
    },
    "training": {
        "episodes": (int, 200),
        "suffix_fraction": (float, 0.5),
        "long_fraction": (float, 0.0),
        "epochs": (int, 6),
        "batch_size": (int, 8),
        "lr": (float, 1.5e-3),
        "variant": (str, "strict"),
        "teacher_seed": (int, 0),
    },
    "maps": {
        "width": (int, 9),
        "height": (int, 9),
        "n_blocks": (int, 3),
        "n_landmarks": (int, 2),
        "min_goal_dist": (float, 2.0),
        "max_goal_dist": (float, 3.5),
        # near-goal pool used for the short stratum of stratified eval
        "short_goal_min": (float, 1.5),
        "short_goal_max": (float, 2.5),
        "cardinal_start": (_bool, True),
        # the long-horizon pool: larger, denser maps with distant goals
        "long_width": (int, 17),
        "long_height": (int, 17),
        "long_n_blocks": (int, 24),
        "long_min_goal_dist": (float, 9.5),
        "long_max_goal_dist": (float, 11.5),
        "long_max_plan": (int, 150),
    },
    "eval": {
        "episodes": (int, 30),
        "max_steps": (int, 160),
        "stratified": (_bool, False),
    },
}

_VARIANTS = ("strict", "leaky", "noiso")


class RunConfig:
    """Flat attribute access: cfg.get(section, key) and cfg.sections."""

    def __init__(self, values: dict):
        self.values = values

    def get(self, section: str, key: str):
        return self.values[section][key]

    def policy_config(self) -> PolicyConfig:
        m = self.values["model"]
        return PolicyConfig(
            layers=m["layers"], heads=m["heads"], d_model=m["d_model"],
            window=m["window"], keyframes=m["keyframes"],
            queries_per_modality=m["queries_per_modality"],
            masked_tokens_per_modality=m["masked_tokens_per_modality"],
            predictive=m["predictive"],
            pool_query_embedding=m["pool_query_embedding"],
            isolated_queries=m["isolated_queries"],
            trainable_2d=m["trainable_2d"], dims=DEFAULT_DIMS)

    def loss_weights(self) -> LossWeights:
        ls = self.values["loss"]
        return LossWeights(gamma=ls["gamma"], alpha=ls["alpha"], beta=ls["beta"])

    def map_kwargs(self) -> dict:
        mp = self.values["maps"]
        kw = dict(width=mp["width"], height=mp["height"],
                  n_blocks=mp["n_blocks"], n_landmarks=mp["n_landmarks"],
                  min_goal_dist=mp["min_goal_dist"],
                  max_goal_dist=mp["max_goal_dist"])
        if mp["cardinal_start"]:
            kw["headings"] = (0, 6, 12, 18)
        return kw

    def short_map_kwargs(self) -> dict:
        """Base pool with the goal pulled close; one- or two-segment routes."""
        kw = self.map_kwargs()
        mp = self.values["maps"]
        kw["min_goal_dist"] = mp["short_goal_min"]
        kw["max_goal_dist"] = mp["short_goal_max"]
        return kw

    def long_map_kwargs(self) -> dict:
        mp = self.values["maps"]
        kw = dict(width=mp["long_width"], height=mp["long_height"],
                  n_blocks=mp["long_n_blocks"], n_landmarks=mp["n_landmarks"],
                  min_goal_dist=mp["long_min_goal_dist"],
                  max_goal_dist=mp["long_max_goal_dist"],
                  max_plan=mp["long_max_plan"])
        if mp["cardinal_start"]:
            kw["headings"] = (0, 6, 12, 18)
        return kw


def default_config() -> RunConfig:
    return RunConfig({s: {k: d for k, (_, d) in keys.items()}
                      for s, keys in SCHEMA.items()})


def parse_config(text: str) -> RunConfig:
    """Defaults overlaid with the file's key=value pairs; strict schema."""
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"unparseable config: {e}") from None
    cfg = default_config()
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            parser = SCHEMA[section][key][0]
            try:
                cfg.values[section][key] = parser(raw)
            except ConfigError:
                raise
            except ValueError:
                raise ConfigError(
                    f"bad value for {section}.{key}: {raw!r}") from None
    _validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def _validate(cfg: RunConfig):
    v = cfg.values
    if v["training"]["variant"] not in _VARIANTS:
        raise ConfigError(f"training.variant must be one of {_VARIANTS}")
    for sec, key in (("model", "layers"), ("model", "heads"),
                     ("model", "d_model"), ("model", "window"),
                     ("model", "keyframes"), ("training", "episodes"),
                     ("training", "epochs"), ("training", "batch_size"),
                     ("eval", "episodes"), ("eval", "max_steps")):
        if v[sec][key] < 1:
            raise ConfigError(f"{sec}.{key} must be >= 1")
    if not 0.0 <= v["training"]["suffix_fraction"] <= 1.0:
        raise ConfigError("training.suffix_fraction must be in [0, 1]")
    if not 0.0 <= v["training"]["long_fraction"] <= 1.0:
        raise ConfigError("training.long_fraction must be in [0, 1]")
    if v["maps"]["long_max_plan"] < 1 or v["maps"]["long_width"] < 5 \
            or v["maps"]["long_height"] < 5:
        raise ConfigError("long map dimensions out of range")
    if v["training"]["lr"] <= 0:
        raise ConfigError("training.lr must be positive")
    if min(v["loss"].values()) < 0:
        raise ConfigError("loss weights must be non-negative")
    try:
        cfg.policy_config()
    except ValueError as e:
        raise ConfigError(str(e)) from None


def dump_config(cfg: RunConfig) -> str:
    """Canonical INI text of the effective configuration."""
    out = io.StringIO()
    for section in sorted(cfg.values):
        out.write(f"[{section}]\n")
        for key in sorted(cfg.values[section]):
            val = cfg.values[section][key]
            if isinstance(val, bool):
                val = "true" if val else "false"
            elif isinstance(val, float):
                val = repr(val)
            out.write(f"{key} = {val}\n")
        out.write("\n")
    return out.getvalue()


def config_hash(cfg: RunConfig) -> str:
    """Digest of the effective configuration; two files that resolve to the
    same settings hash identically."""
    return hashlib.sha256(dump_config(cfg).encode("utf-8")).hexdigest()


def rng_stream(master_seed: int, *key) -> np.random.Generator:
    """Independent Philox stream for (seed, purpose-key) pairs."""
    ss = np.random.SeedSequence(entropy=int(master_seed),
                                spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))
