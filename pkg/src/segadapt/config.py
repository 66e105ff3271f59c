"""Flat key = value configuration with a closed key registry.

One file format everywhere: one `key = value` per line, `#` comments, no
sections. Every key must appear in DEFAULTS; anything else fails fast with
the offending key named, so typos cannot silently fall back to defaults.
"""

from .errors import ConfigError
from .network import SegmentorSpec
from .synthdata import DataSpec


def _floats(text):
    return tuple(float(x) for x in str(text).split(","))


DEFAULTS = {
    "seed": 0,
    # synthetic data
    "data.size": 64,
    "data.min_structures": 1,
    "data.max_structures": 3,
    "data.class_means": (0.25, 0.55, 0.85),
    "data.mean_jitter": 0.02,
    "data.noise_sd": 0.04,
    "data.tgt_invert": False,
    "data.tgt_affine_a": 0.40,
    "data.tgt_affine_b": 0.5,
    "data.tgt_gamma": 2.6,
    "data.tgt_noise_sd": 0.08,
    "data.source_count": 200,
    "data.target_count": 200,
    "data.val_count": 48,
    # model
    "model.in_channels": 1,
    "model.class_count": 3,
    "model.level_count": 3,
    "model.base_width": 8,
    # source training
    "source.epochs": 30,
    "source.lr": 0.01,
    "source.momentum": 0.9,
    "source.batch_size": 12,
    "source.bn_momentum": 0.1,
    # adaptation
    "adapt.epochs": 30,
    "adapt.batch_size": 12,
    "adapt.lr": 0.001,
    "adapt.momentum": 0.9,
    "adapt.eta0": 1.0,
    "adapt.emd_tau": 1.0,
    "adapt.lambda_start": 10.0,
    "adapt.lambda_end": 0.0,
    "adapt.phi": 5.0,
    "adapt.keep_start": 20.0,
    "adapt.keep_end": 80.0,
    "adapt.history_depth": 5,
    "adapt.use_se": True,
    "adapt.use_mcsf": True,
    "adapt.use_scaling_adjust": True,
    "adapt.use_adaptive_channels": True,
    "adapt.abs_gamma_weight": False,
    "adapt.prob_clamp": 1e-12,
    "adapt.log_channels": True,
    "adapt.dump_history": False,
    # evaluation
    "eval.batch_size": 12,
    "eval.bn_stats": "batch",
}

_BOOL_WORDS = {"true": True, "false": False, "1": True, "0": False,
               "yes": True, "no": False}


def _parse_value(key, text, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            word = text.lower()
            if word not in _BOOL_WORDS:
                raise ValueError(f"not a boolean: {text!r}")
            return _BOOL_WORDS[word]
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return _floats(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def parse_config_file(path):
    """Parse a config file into a {key: value} dict of just the keys it
    sets. Unknown keys and malformed lines raise ConfigError."""
    out = {}
    with open(path) as fh:
        for ln, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected 'key = value', "
                                  f"got {raw.strip()!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in DEFAULTS:
                raise ConfigError(f"{path}:{ln}: unknown config key {key!r}")
            out[key] = _parse_value(key, value, DEFAULTS[key])
    return out


def resolve_config(path=None, overrides=None):
    """Defaults, then file, then overrides. Override keys are validated and
    coerced the same way file keys are."""
    cfg = dict(DEFAULTS)
    if path is not None:
        cfg.update(parse_config_file(path))
    for key, value in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str):
            value = _parse_value(key, value, DEFAULTS[key])
        cfg[key] = value
    return cfg


def data_spec(cfg):
    return DataSpec(size=cfg["data.size"],
                    min_structures=cfg["data.min_structures"],
                    max_structures=cfg["data.max_structures"],
                    class_means=tuple(cfg["data.class_means"]),
                    mean_jitter=cfg["data.mean_jitter"],
                    noise_sd=cfg["data.noise_sd"],
                    tgt_invert=cfg["data.tgt_invert"],
                    tgt_affine_a=cfg["data.tgt_affine_a"],
                    tgt_affine_b=cfg["data.tgt_affine_b"],
                    tgt_gamma=cfg["data.tgt_gamma"],
                    tgt_noise_sd=cfg["data.tgt_noise_sd"],
                    seed=cfg["seed"])


def segmentor_spec(cfg):
    return SegmentorSpec(in_channels=cfg["model.in_channels"],
                         class_count=cfg["model.class_count"],
                         level_count=cfg["model.level_count"],
                         base_width=cfg["model.base_width"])


def adapt_config(cfg):
    from .engine import AdaptConfig
    return AdaptConfig(epochs=cfg["adapt.epochs"],
                       batch_size=cfg["adapt.batch_size"],
                       lr=cfg["adapt.lr"],
                       momentum=cfg["adapt.momentum"],
                       eta0=cfg["adapt.eta0"],
                       emd_tau=cfg["adapt.emd_tau"],
                       lambda_start=cfg["adapt.lambda_start"],
                       lambda_end=cfg["adapt.lambda_end"],
                       phi=cfg["adapt.phi"],
                       keep_start=cfg["adapt.keep_start"],
                       keep_end=cfg["adapt.keep_end"],
                       history_depth=cfg["adapt.history_depth"],
                       use_se=cfg["adapt.use_se"],
                       use_mcsf=cfg["adapt.use_mcsf"],
                       use_scaling_adjust=cfg["adapt.use_scaling_adjust"],
                       use_adaptive_channels=cfg["adapt.use_adaptive_channels"],
                       abs_gamma_weight=cfg["adapt.abs_gamma_weight"],
                       prob_clamp=cfg["adapt.prob_clamp"],
                       seed=cfg["seed"],
                       log_channels=cfg["adapt.log_channels"],
                       dump_history=cfg["adapt.dump_history"])
