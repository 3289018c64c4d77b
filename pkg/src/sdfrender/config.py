"""Flat ``key = value`` configuration shared by training, scenes and the CLI.

Lines are ``key = value``; ``#`` starts a comment.  Every key has a typed
default below, and values are parsed to the default's type.  Unknown keys
and unparsable values raise :class:`ConfigError`.
"""

from __future__ import annotations

from pathlib import Path

DEFAULTS: dict[str, object] = {
    # positional encoding
    "pe.bands": 16,
    "pe.alpha_d0": 0.5,
    "pe.include_input": True,
    # networks
    "model.depth": 8,
    "model.hidden": 256,
    "model.feature": 256,
    "model.color_depth": 4,
    "model.color_hidden": 256,
    "model.init_radius": 0.5,
    "model.idf": True,  # displacement network on/off
    "model.c2f": True,  # coarse-to-fine annealing on/off
    "model.adaptive": True,  # per-ray scale gain on/off
    "model.dtype": "float64",
    # optimization
    "train.iterations": 5000,
    "train.n_max": 0,  # 0 means: equal to train.iterations
    "train.lr": 5e-4,
    "train.batch_rays": 512,
    "train.eikonal_weight": 1.0,
    "train.s_init": 20.0,
    "train.seed": 0,
    "train.checkpoint_every": 1000,
    # sampling
    "sample.uniform": 64,
    "sample.importance": 64,
    "sample.stratified": True,
    "sample.seed": 0,
    # rendering
    "render.background": (1.0, 1.0, 1.0),
    # meshing
    "mesh.resolution": 128,
    "mesh.bound": 1.0,
    "mesh.min_component": 0.01,
    # scene specs
    "scene.shape": "(sphere 0 0 0 0.5)",
    "scene.albedo": (0.8, 0.8, 0.8),
    "scene.checker": 0.0,  # checker period; 0 disables
    "scene.background": (1.0, 1.0, 1.0),
    "scene.views": 16,
    "scene.resolution": 64,
    "scene.fov": 40.0,
    "scene.camera_radius": 3.2,
    "scene.seed": 0,
    "scene.gt_resolution": 256,
}


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_value(key: str, text: str):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            return _parse_bool(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            vals = tuple(float(v) for v in text.replace(",", " ").split())
            if len(vals) != len(default):
                raise ValueError(f"expected {len(default)} numbers")
            return vals
        return text.strip()
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {text!r} ({exc})") from None


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return " ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class Config(dict):
    """A dict of every known key, starting from :data:`DEFAULTS`."""

    def __init__(self, values: dict | None = None):
        super().__init__(DEFAULTS)
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self[key] = parse_value(key, value) if isinstance(value, str) else value

    def override(self, assignments) -> "Config":
        """Apply ``key=value`` strings (as given to ``--set``)."""
        for item in assignments or ():
            if "=" not in item:
                raise ConfigError(f"override must look like key=value, got {item!r}")
            k, v = item.split("=", 1)
            self.set(k.strip(), v.strip())
        return self

    @property
    def n_max(self) -> int:
        return self["train.n_max"] or self["train.iterations"]

    def dumps(self, keys=None) -> str:
        keys = keys if keys is not None else sorted(self)
        return "".join(f"{k} = {format_value(self[k])}\n" for k in keys)


def loads(text: str, base: Config | None = None) -> Config:
    cfg = Config(dict(base) if base is not None else None)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        k, v = line.split("=", 1)
        try:
            cfg.set(k.strip(), v.strip())
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return cfg


def load(path, overrides=None) -> Config:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    return loads(p.read_text()).override(overrides)


def save(path, cfg: Config, keys=None) -> None:
    Path(path).write_text(cfg.dumps(keys))
