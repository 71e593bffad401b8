# settings.py
import configparser
import os
from ..core.errors import UsageError
from ..core.model import ModelConfig
from ..core.sampler import SampleConfig
from ..core.trainer import TrainConfig

DEFAULTS_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), "star_config.ini")


def _read_defaults():
    config = configparser.ConfigParser()
    with open(DEFAULTS_PATH) as f:
        config.read_file(f)
    return config


def _merge(config, section, key, value, origin):
    if not config.has_section(section):
        raise UsageError(f"unknown config section [{section}] in {origin}")
    if not config.has_option(section, key):
        raise UsageError(f"unknown config key {section}.{key} in {origin}")
    config.set(section, key, str(value))


def parse_override(text):
    """'model.layers=4' -> ('model', 'layers', '4')"""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise UsageError(f"override '{text}' is not of the form section.key=value")
    name, value = text.split("=", 1)
    section, key = name.strip().split(".", 1)
    return section, key, value.strip()


def load_config(config_path=None, overrides=()):
    """
    Packaged defaults, then an optional user INI file, then section.key=value overrides.

    :param config_path: Optional user file; every key in it must exist in the defaults.
    :param overrides: Iterable of 'section.key=value' strings (or (section, key, value) tuples).
    """
    config = _read_defaults()
    if config_path:
        if not os.path.exists(config_path):
            raise UsageError(f"configuration file {config_path} not found")
        user = configparser.ConfigParser()
        user.read(config_path)
        for section in user.sections():
            for key, value in user[section].items():
                _merge(config, section, key, value, config_path)
    for item in overrides:
        section, key, value = parse_override(item) if isinstance(item, str) else item
        _merge(config, section, key, value, "overrides")
    return config


def write_config(config, path):
    """Writes the resolved configuration with sections and keys in sorted order."""
    ordered = configparser.ConfigParser()
    for section in sorted(config.sections()):
        ordered[section] = {key: config[section][key] for key in sorted(config[section])}
    with open(path, "w") as f:
        ordered.write(f)


def flat_items(config):
    """{'model.layers': '6', ...}"""
    return {
        f"{section}.{key}": value
        for section in sorted(config.sections())
        for key, value in sorted(config[section].items())
    }


def _get(section, key, kind):
    try:
        if kind is int:
            return section.getint(key)
        if kind is float:
            return section.getfloat(key)
        if kind is bool:
            return section.getboolean(key)
        return section.get(key)
    except ValueError as e:
        raise UsageError(f"{section.name}.{key}: {e}")


def model_config(config, vocab_size, seq_len, num_classes):
    """ModelConfig from [model]; vocabulary, length and classes come from the dataset."""
    m = config["model"]
    return ModelConfig(
        layers=_get(m, "layers", int),
        width=_get(m, "width", int),
        heads=_get(m, "heads", int),
        vocab_size=int(vocab_size),
        seq_len=int(seq_len),
        num_classes=int(num_classes),
        tap_depth=_get(m, "tap_depth", int),
        mask_ratio=_get(m, "mask_ratio", float),
        mask_scope=_get(m, "mask_scope", str),
        mlp_ratio=_get(m, "mlp_ratio", int),
        projector_blocks=_get(m, "projector_blocks", int),
    )


def train_config(config):
    t, lo, d, r = config["train"], config["loss"], config["data"], config["run"]
    return TrainConfig(
        batch_size=_get(t, "batch_size", int),
        views=_get(t, "views", int),
        steps=_get(t, "steps", int),
        base_lr=_get(t, "base_lr", float),
        warmup_steps=_get(t, "warmup_steps", int),
        beta1=_get(t, "beta1", float),
        beta2=_get(t, "beta2", float),
        weight_decay=_get(t, "weight_decay", float),
        grad_clip=_get(t, "grad_clip", float),
        k_steps=_get(lo, "k_steps", int),
        alpha=_get(lo, "alpha", float),
        beta=_get(lo, "beta", float),
        temperature=_get(lo, "temperature", float),
        ema_decay=_get(t, "ema_decay", float),
        cfg_dropout=_get(t, "cfg_dropout", float),
        seed=_get(t, "seed", int),
        use_mim=_get(lo, "use_mim", bool),
        use_step=_get(lo, "use_step", bool),
        use_view=_get(lo, "use_view", bool),
        literal_ratio=_get(lo, "literal_ratio", bool),
        ar_on_unmasked=_get(lo, "ar_on_unmasked", bool),
        augment=_get(d, "augment", bool),
        checkpoint_every=_get(r, "checkpoint_every", int),
        log_every=_get(r, "log_every", int),
        log_timing=_get(r, "log_timing", bool),
        progress=_get(r, "progress", bool),
    )


def probe_steps(config):
    text = config["probe"]["steps"]
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"probe.steps must be a comma-separated list of integers, got '{text}'")


def sample_config(config):
    s = config["sample"]
    return SampleConfig(
        cfg_scale=_get(s, "cfg_scale", float),
        temperature=_get(s, "temperature", float),
        top_k=_get(s, "top_k", int),
        seed=_get(s, "seed", int),
        count=_get(s, "count", int),
        use_cache=_get(s, "use_cache", bool),
    )


def probe_config(config):
    """Keyword arguments for diagnostics.probe_per_step; layer 0 means model.tap_depth."""
    p = config["probe"]
    layer = _get(p, "layer", int) or _get(config["model"], "tap_depth", int)
    return {
        "steps": probe_steps(config),
        "layer": layer,
        "epochs": _get(p, "epochs", int),
        "lr": _get(p, "lr", float),
        "weight_decay": _get(p, "weight_decay", float),
        "train_fraction": _get(p, "train_fraction", float),
        "seed": _get(p, "seed", int),
    }
