"""Run configuration: a flat ``key = value`` text file with validated ranges."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


def _in(lo, hi, lo_open=False, hi_open=False):
    def check(v):
        if (v < lo or (lo_open and v == lo)) or (v > hi or (hi_open and v == hi)):
            lb = "(" if lo_open else "["
            rb = ")" if hi_open else "]"
            return f"must lie in {lb}{lo}, {hi}{rb}"
        return None
    return check


def _choice(*opts):
    return lambda v: None if v in opts else f"must be one of {opts}"


def _f(default, check=None):
    return field(default=default, metadata={"check": check})


@dataclass
class RunConfig:
    seed: int = _f(0, _in(0, 2**64 - 1))
    # encoder
    d: int = _f(32, _in(2, 4096))
    hidden: int = _f(32, _in(1, 4096))
    kernel_size: int = _f(5, _in(1, 64))
    dilations: tuple = _f((1, 2))
    enc_dropout: float = _f(0.0, _in(0.0, 1.0, hi_open=True))
    # heads
    disc_hidden: int = _f(32, _in(1, 4096))
    clf_hidden: int = _f(32, _in(1, 4096))
    clf_dropout: float = _f(0.1, _in(0.0, 1.0, hi_open=True))
    # invariant basis
    m: int = _f(6, _in(1, 4096))
    # pseudo-labels
    momentum: float = _f(0.9, _in(0.0, 1.0))
    eta0: float = _f(0.1, _in(0.0, 1.0))
    eta_max: float = _f(0.95, _in(0.0, 1.0))
    schedule: str = _f("linear", _choice("linear", "stepwise"))
    eta_step: float = _f(0.05, _in(0.0, 1.0))
    eta_every: int = _f(15, _in(1, 10**9))
    partition_mode: str = _f("quantile", _choice("quantile", "threshold"))
    warmup_epochs: int = _f(0, _in(0, 10**6))  # epochs with no confident target samples
    # losses
    tau: float = _f(0.1, _in(0.0, 100.0, lo_open=True))
    lambda1: float = _f(0.5, _in(0.0, 100.0))
    lambda2: float = _f(0.5, _in(0.0, 100.0))
    adversarial_mode: str = _f("reversal", _choice("reversal", "alternating"))
    jitter_sigma: float = _f(0.1, _in(0.0, 100.0))
    scale_low: float = _f(0.8, _in(0.0, 100.0, lo_open=True))
    scale_high: float = _f(1.2, _in(0.0, 100.0, lo_open=True))
    # ablation switches
    use_lcib: bool = _f(True)
    use_adv: bool = _f(True)
    use_sup: bool = _f(True)
    use_self: bool = _f(True)
    use_anti: bool = _f(True)
    # optimisation
    lr: float = _f(1e-3, _in(0.0, 10.0, lo_open=True))
    beta1: float = _f(0.9, _in(0.0, 1.0, hi_open=True))
    beta2: float = _f(0.999, _in(0.0, 1.0, hi_open=True))
    epochs: int = _f(40, _in(0, 10**6))
    batch_size: int = _f(32, _in(2, 10**6))
    finetune_epochs: int = _f(20, _in(0, 10**6))
    finetune_lr: float = _f(1e-3, _in(0.0, 10.0, lo_open=True))
    debug: bool = _f(False)

    def __post_init__(self):
        self.validate()

    def validate(self) -> "RunConfig":
        for f in fields(self):
            check = f.metadata.get("check")
            v = getattr(self, f.name)
            if check is not None:
                msg = check(v)
                if msg:
                    raise ConfigError(f"{f.name} = {v!r} {msg}")
        if self.use_lcib and not self.m < self.d:
            raise ConfigError(f"m = {self.m} must be smaller than d = {self.d}")
        if self.eta0 > self.eta_max:
            raise ConfigError(f"eta0 = {self.eta0} exceeds eta_max = {self.eta_max}")
        if self.warmup_epochs > self.epochs:
            raise ConfigError(f"warmup_epochs = {self.warmup_epochs} exceeds epochs = {self.epochs}")
        if self.scale_low > self.scale_high:
            raise ConfigError("scale_low exceeds scale_high")
        if not self.use_sup:
            raise ConfigError("use_sup cannot be disabled; the supervised loss is always on")
        if not self.dilations or any(int(x) < 1 for x in self.dilations):
            raise ConfigError(f"dilations = {self.dilations!r} must be positive integers")
        if self.use_adv and not self.use_lcib:
            raise ConfigError("use_adv requires use_lcib (no reconstruction to discriminate)")
        return self

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


PRESETS = {
    "desk": {},
    # larger architecture: 4-layer TCN, 128 hidden, d = 128, m = 24
    "full": dict(d=128, hidden=128, dilations=(1, 2, 4, 8), kernel_size=5, enc_dropout=0.2,
                 clf_hidden=128, disc_hidden=128, m=24, schedule="stepwise"),
}


def _convert(name: str, raw: str, lineno: int):
    types = {f.name: f.type for f in fields(RunConfig)}
    t = types[name]
    try:
        if t == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
        if t == "tuple":
            return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)
        return raw
    except ValueError:
        raise ConfigError(f"line {lineno}: cannot parse {name} = {raw!r} as {t}") from None


def parse_config(text: str, **overrides) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    known = {f.name for f in fields(RunConfig)}
    values: dict = {}
    preset = "desk"
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key == "preset":
            if raw not in PRESETS:
                raise ConfigError(f"line {lineno}: unknown preset {raw!r}")
            preset = raw
            continue
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _convert(key, raw, lineno)
    merged = {**PRESETS[preset], **values, **{k: v for k, v in overrides.items() if v is not None}}
    return RunConfig(**merged)


def load_config(path=None, **overrides) -> RunConfig:
    text = Path(path).read_text() if path else ""
    return parse_config(text, **overrides)
