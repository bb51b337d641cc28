"""Dataset files and the synthetic domain-shift generator.

On disk a dataset is a directory holding ``meta.txt`` (``key = value`` lines:
T, D, n_c, n_samples, domain, labeled) and ``data.csv`` with one sample per
line: the integer label first when labeled, then T*D floats in row-major
(time-major) order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DatasetParseError(ValueError):
    pass


@dataclass
class DatasetMeta:
    T: int
    D: int
    n_c: int
    n_samples: int
    domain: str = "source"
    labeled: bool = True

    def to_text(self) -> str:
        return (f"T = {self.T}\nD = {self.D}\nn_c = {self.n_c}\nn_samples = {self.n_samples}\n"
                f"domain = {self.domain}\nlabeled = {'true' if self.labeled else 'false'}\n")


@dataclass
class Dataset:
    meta: DatasetMeta
    x: np.ndarray
    y: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.shape != (self.meta.n_samples, self.meta.T, self.meta.D):
            raise ValueError(f"samples {self.x.shape} disagree with meta {self.meta}")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.intp)
            if self.y.shape != (self.meta.n_samples,):
                raise ValueError("label count disagrees with sample count")
            if self.y.size and (self.y.min() < 0 or self.y.max() >= self.meta.n_c):
                raise ValueError(f"labels must lie in [0, {self.meta.n_c})")

    def __len__(self) -> int:
        return self.x.shape[0]

    def unlabeled(self) -> "Dataset":
        meta = DatasetMeta(**{**self.meta.__dict__, "labeled": False})
        return Dataset(meta, self.x, None)


def save_dataset(ds: Dataset, directory, include_labels: bool | None = None) -> Path:
    """Write meta.txt and data.csv.  Floats use repr, so reloading is bit-exact."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    labeled = ds.y is not None if include_labels is None else include_labels and ds.y is not None
    meta = DatasetMeta(**{**ds.meta.__dict__, "labeled": labeled})
    (out / "meta.txt").write_text(meta.to_text())
    rows = []
    flat = ds.x.reshape(len(ds), -1)
    for i in range(len(ds)):
        vals = ",".join(repr(v) for v in flat[i].tolist())
        rows.append(f"{int(ds.y[i])},{vals}" if labeled else vals)
    (out / "data.csv").write_text("\n".join(rows) + "\n")
    return out


def _parse_meta(path: Path) -> DatasetMeta:
    kv = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DatasetParseError(f"{path}:{lineno}: malformed header line {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        kv[k] = v
    try:
        meta = DatasetMeta(
            T=int(kv["T"]), D=int(kv["D"]), n_c=int(kv["n_c"]), n_samples=int(kv["n_samples"]),
            domain=kv.get("domain", "unknown"),
            labeled=kv.get("labeled", "true").lower() in ("true", "1", "yes"),
        )
    except KeyError as e:
        raise DatasetParseError(f"{path}: missing header key {e.args[0]!r}") from None
    except ValueError as e:
        raise DatasetParseError(f"{path}: bad header value ({e})") from None
    if min(meta.T, meta.D, meta.n_c) < 1 or meta.n_samples < 0:
        raise DatasetParseError(f"{path}: header values must be positive")
    return meta


def load_dataset(directory, with_labels: bool = True) -> Dataset:
    """Read a dataset directory.  ``with_labels=False`` drops labels even if stored."""
    d = Path(directory)
    meta = _parse_meta(d / "meta.txt")
    width = meta.T * meta.D + (1 if meta.labeled else 0)
    x = np.empty((meta.n_samples, meta.T * meta.D))
    y = np.empty(meta.n_samples, dtype=np.intp) if meta.labeled else None
    n = 0
    with open(d / "data.csv") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != width:
                raise DatasetParseError(f"{d / 'data.csv'}:{lineno}: row {lineno} has {len(parts)} values, expected {width}")
            if n >= meta.n_samples:
                raise DatasetParseError(f"{d / 'data.csv'}:{lineno}: more rows than n_samples = {meta.n_samples}")
            try:
                if meta.labeled:
                    lab = int(parts[0])
                    if not 0 <= lab < meta.n_c:
                        raise DatasetParseError(f"{d / 'data.csv'}:{lineno}: label {lab} out of range [0, {meta.n_c})")
                    y[n] = lab
                    parts = parts[1:]
                x[n] = [float(p) for p in parts]
            except ValueError as e:
                if isinstance(e, DatasetParseError):
                    raise
                raise DatasetParseError(f"{d / 'data.csv'}:{lineno}: {e}") from None
            n += 1
    if n != meta.n_samples:
        raise DatasetParseError(f"{d / 'data.csv'}: found {n} rows, meta declares {meta.n_samples}")
    ds = Dataset(meta, x.reshape(meta.n_samples, meta.T, meta.D), y)
    if not with_labels and ds.y is not None:
        ds = ds.unlabeled()
    return ds


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class DomainArtifacts:
    """Environment effects layered on the shared class patterns."""
    noise: float = 0.1
    bias: tuple = (0.0, 0.0, 0.0)
    amplitude: float = 1.0
    time_jitter: float = 0.0  # std of per-timestep sampling-time error, in steps
    coupling: float = 0.0  # fraction of each channel leaking into the next (sensor cross-talk)
    rate: float = 1.0  # sampling-clock multiplier of the device


@dataclass
class SyntheticShiftConfig:
    n_c: int = 4
    T: int = 64
    D: int = 3
    n_source: int = 400
    n_target: int = 400
    frequencies: tuple = (1.0, 2.0, 3.0, 4.0)  # cycles per window, one per class
    trends: tuple = (0.0, 1.0, -1.0, 0.0)
    channel_phase: tuple = (0.0, 1.0, 2.0)
    channel_weight: tuple = (1.0, 0.6, 0.3)
    phase_jitter: float = 0.5  # per-sample phase drawn uniformly from +-phase_jitter
    gain_jitter: float = 0.2
    source: DomainArtifacts = field(default_factory=DomainArtifacts)
    # a 15% faster device clock: class clusters stay intact but move relative to the source
    target: DomainArtifacts = field(default_factory=lambda: DomainArtifacts(rate=1.15))
    target_imbalance: float = 1.0  # class c drawn with weight imbalance**(-c)
    seed: int = 0

    def __post_init__(self):
        for name in ("frequencies", "trends"):
            if len(getattr(self, name)) < self.n_c:
                raise ValueError(f"{name} needs one entry per class ({self.n_c})")
        for name in ("channel_phase", "channel_weight"):
            if len(getattr(self, name)) < self.D:
                raise ValueError(f"{name} needs one entry per channel ({self.D})")
        for art in (self.source, self.target):
            if len(art.bias) < self.D:
                raise ValueError("artifact bias needs one entry per channel")


def _class_counts(n: int, n_c: int, imbalance: float) -> np.ndarray:
    w = imbalance ** -np.arange(n_c, dtype=np.float64)
    counts = np.floor(n * w / w.sum()).astype(int)
    counts[: n - counts.sum()] += 1
    return counts


def _render(cfg: SyntheticShiftConfig, labels: np.ndarray, art: DomainArtifacts,
            rng: np.random.Generator) -> np.ndarray:
    n, T, D = len(labels), cfg.T, cfg.D
    freqs = np.asarray(cfg.frequencies, dtype=np.float64)[labels]
    trends = np.asarray(cfg.trends, dtype=np.float64)[labels]
    phase0 = rng.uniform(-cfg.phase_jitter, cfg.phase_jitter, size=n)
    gain = rng.uniform(1.0 - cfg.gain_jitter, 1.0 + cfg.gain_jitter, size=n)
    t = np.arange(T, dtype=np.float64)[None, :] + art.time_jitter * rng.standard_normal((n, T))
    u = art.rate * t / T
    x = np.empty((n, T, D))
    for ch in range(D):
        wave = np.sin(2 * np.pi * freqs[:, None] * u + phase0[:, None] + cfg.channel_phase[ch])
        x[:, :, ch] = cfg.channel_weight[ch] * wave + trends[:, None] * (u - 0.5)
    x *= gain[:, None, None]
    if art.coupling:
        x = x + art.coupling * np.roll(x, 1, axis=2)
    x = art.amplitude * x + np.asarray(art.bias[:D], dtype=np.float64)
    return x + art.noise * rng.standard_normal(x.shape)


def generate_synthetic_pair(cfg: SyntheticShiftConfig) -> tuple[Dataset, Dataset]:
    """Source and target share class waveforms; only the artifacts differ.

    Both datasets carry labels; strip the target's with ``Dataset.unlabeled``
    before handing it to training.
    """
    rng = np.random.default_rng(cfg.seed)
    out = []
    for domain, n, art, imb in (("source", cfg.n_source, cfg.source, 1.0),
                                ("target", cfg.n_target, cfg.target, cfg.target_imbalance)):
        counts = _class_counts(n, cfg.n_c, imb)
        labels = np.repeat(np.arange(cfg.n_c), counts)
        labels = labels[rng.permutation(n)]
        x = _render(cfg, labels, art, rng)
        out.append(Dataset(DatasetMeta(cfg.T, cfg.D, cfg.n_c, n, domain, True), x, labels))
    return out[0], out[1]
