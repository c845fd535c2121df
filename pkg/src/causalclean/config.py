"""Run configuration: a flat ``key = value`` text format.

Lines are ``key = value``; blank lines and ``#`` comments are ignored. Every
key is documented in KEYS below; unknown keys are rejected by name. Values
are parsed by the target field type (ints, floats, booleans true/false,
comma lists).
"""

from dataclasses import dataclass, field

from .data import DegradationSpec
from .model import ModelConfig
from .optim import OptimizerConfig

MODES = ("train", "restore", "degrade", "profile", "gradcheck", "selftest")


class ConfigError(ValueError):
    """Bad key, bad value, or an inconsistent combination."""


MODEL_KEYS = {
    "stages": int, "base_width": int, "in_channels": int, "enc_blocks": int,
    "chm_blocks": int, "tau": int, "k": int, "gamma": int, "heads": int,
    "patch": "int_list", "chm_placement": str, "topk_mode": str,
    "precision": str, "ffn_expansion": int,
}
OPTIMIZER_KEYS = {
    "beta1": float, "beta2": float, "eps": float, "lr_init": float,
    "lr_final": float, "iterations": int, "crop": int, "hflip": "bool",
    "vflip": "bool", "rot90": "bool",
}
DEGRADATION_KEYS = {
    "degradation": str, "sigma_lo": float, "sigma_hi": float, "blur_window": int,
}
RUN_KEYS = {
    "mode": str, "frames_dir": str, "gt_dir": str, "out_dir": str,
    "checkpoint": str, "seed": int, "deterministic": "bool",
    "metrics_mode": str, "resolutions": "res_list", "save_every": int,
}
KEYS = {**MODEL_KEYS, **OPTIMIZER_KEYS, **DEGRADATION_KEYS, **RUN_KEYS}


@dataclass
class RunConfig:
    mode: str = ""
    frames_dir: str = ""
    gt_dir: str = ""
    out_dir: str = "out"
    checkpoint: str = ""
    seed: int = 0
    deterministic: bool = True
    metrics_mode: str = "rgb"
    resolutions: tuple = ((256, 256), (640, 480))
    save_every: int = 500
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    degradation: DegradationSpec = None
    explicit: frozenset = frozenset()  # keys the file actually set

    def __post_init__(self):
        if self.mode and self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.metrics_mode not in ("rgb", "y_channel"):
            raise ConfigError(f"metrics_mode must be rgb or y_channel")


def _parse_value(key, kind, raw):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "int_list":
            return tuple(int(p) for p in raw.split(",") if p.strip())
        if kind == "res_list":
            out = []
            for part in raw.split(","):
                h, _, w = part.strip().partition("x")
                out.append((int(h), int(w)))
            return tuple(out)
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {raw!r}") from None
    raise ConfigError(f"unhandled kind for {key}")


def parse_config(text):
    """Parse config text into a RunConfig; unknown keys are errors."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, KEYS[key], raw)

    from .tensor import ShapeError
    model_args = {k: v for k, v in values.items() if k in MODEL_KEYS}
    opt_args = {k: v for k, v in values.items() if k in OPTIMIZER_KEYS}
    try:
        model = ModelConfig(**model_args)
        optimizer = OptimizerConfig(**opt_args)
        degradation = None
        kind = values.get("degradation", "")
        if kind and kind != "none":
            degradation = DegradationSpec(
                kind=kind,
                sigma_lo=values.get("sigma_lo", 30.0),
                sigma_hi=values.get("sigma_hi", 50.0),
                window=values.get("blur_window", 3),
                seed=values.get("seed", 0),
            )
    except ShapeError as e:
        raise ConfigError(str(e)) from None
    run_args = {k: v for k, v in values.items() if k in RUN_KEYS}
    return RunConfig(model=model, optimizer=optimizer, degradation=degradation,
                     explicit=frozenset(values), **run_args)


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config(text)


def format_config(run):
    """Render a RunConfig back to the flat text format."""
    lines = [f"mode = {run.mode}"]
    for key in ("frames_dir", "gt_dir", "out_dir", "checkpoint"):
        value = getattr(run, key)
        if value:
            lines.append(f"{key} = {value}")
    lines += [f"seed = {run.seed}",
              f"deterministic = {str(run.deterministic).lower()}",
              f"metrics_mode = {run.metrics_mode}",
              f"save_every = {run.save_every}"]
    md = run.model.to_dict()
    md["patch"] = ",".join(str(p) for p in md["patch"])
    lines += [f"{k} = {md[k]}" for k in sorted(MODEL_KEYS)]
    for k in sorted(OPTIMIZER_KEYS):
        v = getattr(run.optimizer, k)
        lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
    if run.degradation is not None:
        d = run.degradation
        lines += [f"degradation = {d.kind}", f"sigma_lo = {d.sigma_lo}",
                  f"sigma_hi = {d.sigma_hi}", f"blur_window = {d.window}"]
    return "\n".join(lines) + "\n"
