"""Synthetic angle-wedge sequences and eye-grouped splitting.

Each slice shows a bright wedge whose apex sits near the image centre. The
wedge aperture encodes the class: wide for open, moderate for narrow, and
nearly closed with a bright contact blob at the apex for synechiae. Every eye
has a dominant class, and most of its sequences share it, so sequences from
one eye are correlated and must not straddle a train/test split.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from smanet.formats import ManifestEntry, load_tensor, read_manifest, save_tensor, write_manifest
from smanet.tensor import ConfigError

SUPERSAMPLE = 4
APEX_JITTER = 1.0  # pixels
WEDGE_RADIUS = 0.45  # fraction of image size
BLOB_RADIUS = 0.08  # fraction of image size
ORIENTATION_RANGE = 45.0  # degrees either side of pointing right


@dataclass
class GeneratorConfig:
    seed: int = 0
    num_eyes: int = 20
    sequences_per_eye: int = 24
    seq_len: int = 5
    size: int = 32
    noise_sigma: float = 0.05
    num_classes: int = 3
    open_range: tuple = (55.0, 80.0)
    narrow_range: tuple = (18.0, 35.0)
    synechiae_range: tuple = (0.0, 8.0)
    class_proportions: tuple = field(default_factory=lambda: (1 / 3, 1 / 3, 1 / 3))
    dominant_bias: float = 0.6
    max_drift: float = 2.0

    def __post_init__(self):
        self.open_range = tuple(float(v) for v in self.open_range)
        self.narrow_range = tuple(float(v) for v in self.narrow_range)
        self.synechiae_range = tuple(float(v) for v in self.synechiae_range)
        self.class_proportions = tuple(float(v) for v in self.class_proportions)
        ranges = sorted([self.synechiae_range, self.narrow_range, self.open_range])
        for lo, hi in ranges:
            if not 0 <= lo <= hi <= 180:
                raise ConfigError(f"aperture range ({lo}, {hi}) is not within [0, 180]")
        for (_, hi), (lo, _) in zip(ranges, ranges[1:]):
            if lo <= hi:
                raise ConfigError("class aperture ranges overlap")
        if self.num_classes not in (2, 3):
            raise ConfigError(f"num_classes must be 2 or 3, got {self.num_classes}")
        if len(self.class_proportions) != self.num_classes:
            raise ConfigError(f"{len(self.class_proportions)} class proportions for {self.num_classes} classes")
        if min(self.class_proportions) < 0 or not np.isclose(np.sum(self.class_proportions), 1.0):
            raise ConfigError(f"class proportions {self.class_proportions} do not form a distribution")
        if min(self.num_eyes, self.sequences_per_eye, self.seq_len, self.size) < 1:
            raise ConfigError("counts and sizes must be positive")
        if self.noise_sigma < 0 or not 0 <= self.dominant_bias <= 1:
            raise ConfigError("noise_sigma must be >= 0 and dominant_bias in [0, 1]")

    @property
    def total_sequences(self) -> int:
        return self.num_eyes * self.sequences_per_eye

    def to_dict(self) -> dict:
        return asdict(self)


def class_counts(total: int, proportions) -> np.ndarray:
    """Largest-remainder rounding of proportions to integer counts summing to total."""
    raw = np.asarray(proportions, dtype=np.float64) * total
    counts = np.floor(raw + 1e-9).astype(np.int64)
    order = np.argsort(-(raw - counts), kind="stable")
    for i in order[: total - counts.sum()]:
        counts[i] += 1
    return counts


def assign_labels(config: GeneratorConfig) -> list[list[int]]:
    """Per-eye label lists with exact global class counts.

    Each eye takes its dominant class with probability ``dominant_bias`` while
    that class has stock left, otherwise a draw from the remaining pool.
    """
    rng = np.random.default_rng([config.seed, 1_000_003])
    remaining = class_counts(config.total_sequences, config.class_proportions)
    labels = []
    for _ in range(config.num_eyes):
        dominant = int(rng.choice(config.num_classes, p=np.asarray(config.class_proportions)))
        eye = []
        for _ in range(config.sequences_per_eye):
            if remaining[dominant] > 0 and rng.random() < config.dominant_bias:
                k = dominant
            else:
                k = int(rng.choice(config.num_classes, p=remaining / remaining.sum()))
            remaining[k] -= 1
            eye.append(k)
        labels.append(eye)
    return labels


def _geometry_class(label: int, num_classes: int, rng) -> int:
    """Which wedge geometry renders a label; binary closure draws narrow or synechiae."""
    if num_classes == 3:
        return label
    return 0 if label == 0 else int(rng.integers(1, 3))


def render_wedge(size: int, apex, orientation: float, aperture: float, blob: bool,
                 fg: float = 0.85, bg: float = 0.1) -> np.ndarray:
    """Antialiased wedge image; angles in degrees, apex as (row, col) in pixel units."""
    s = SUPERSAMPLE
    coords = (np.arange(size * s) + 0.5) / s
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    dy, dx = -(yy - apex[0]), xx - apex[1]  # image rows grow downward
    r = np.hypot(dx, dy)
    ang = np.degrees(np.arctan2(dy, dx))
    off = (ang - orientation + 180.0) % 360.0 - 180.0
    inside = (np.abs(off) <= aperture / 2) & (r <= WEDGE_RADIUS * size)
    if blob:
        inside |= r <= BLOB_RADIUS * size
    coverage = inside.reshape(size, s, size, s).mean(axis=(1, 3))
    return bg + (fg - bg) * coverage


def measure_aperture(img: np.ndarray, apex, threshold: float = 0.5,
                     r_in: float | None = None, r_out: float | None = None) -> float:
    """Aperture in degrees from the thresholded pixel count in an annulus around ``apex``."""
    size = img.shape[0]
    r_in = 5.0 / 32 * size if r_in is None else r_in
    r_out = 13.0 / 32 * size if r_out is None else r_out
    centers = np.arange(size) + 0.5
    yy, xx = np.meshgrid(centers, centers, indexing="ij")
    r = np.hypot(yy - apex[0], xx - apex[1])
    ring = (r >= r_in) & (r <= r_out)
    bright = np.count_nonzero((img > threshold) & ring)
    area_per_radian = (r_out ** 2 - r_in ** 2) / 2
    return float(np.degrees(bright / area_per_radian))


def render_sequence(config: GeneratorConfig, label: int, rng: np.random.Generator,
                    with_noise: bool = True) -> tuple[np.ndarray, dict]:
    """T slices [T,S,S] for one sequence plus the sampled geometry."""
    geom = _geometry_class(label, config.num_classes, rng)
    lo, hi = (config.open_range, config.narrow_range, config.synechiae_range)[geom]
    t = config.seq_len
    base = rng.uniform(lo, hi)
    drift = rng.uniform(-config.max_drift, config.max_drift)
    steps = np.linspace(0.0, 1.0, t) if t > 1 else np.zeros(1)
    apertures = np.clip(base + drift * steps, lo, hi)
    centre = config.size / 2
    apex = (centre + rng.uniform(-APEX_JITTER, APEX_JITTER), centre + rng.uniform(-APEX_JITTER, APEX_JITTER))
    orientation = rng.uniform(-ORIENTATION_RANGE, ORIENTATION_RANGE)
    turn = rng.uniform(-3.0, 3.0)
    fg, bg = rng.uniform(0.75, 0.95), rng.uniform(0.05, 0.2)
    slices = np.stack([
        render_wedge(config.size, apex, orientation + turn * steps[i], apertures[i], geom == 2, fg, bg)
        for i in range(t)
    ])
    if with_noise and config.noise_sigma > 0:
        slices = slices + rng.normal(0.0, config.noise_sigma, size=slices.shape)
    slices = np.clip(slices, 0.0, 1.0).astype(np.float32)
    return slices, {"apex": apex, "apertures": apertures, "orientation": orientation, "geometry": geom}


@dataclass
class SequenceSet:
    """In-memory dataset: sequences [N,T,S,S], labels, eye ids, sequence ids."""

    x: np.ndarray
    labels: np.ndarray
    eye_ids: np.ndarray
    sequence_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "SequenceSet":
        idx = np.asarray(idx, dtype=np.int64)
        return SequenceSet(self.x[idx], self.labels[idx], self.eye_ids[idx], self.sequence_ids[idx])


def generate_arrays(config: GeneratorConfig) -> SequenceSet:
    labels = assign_labels(config)
    xs, ys, eyes = [], [], []
    for eye, eye_labels in enumerate(labels):
        rng = np.random.default_rng([config.seed, eye])
        for label in eye_labels:
            seq, _ = render_sequence(config, label, rng)
            xs.append(seq)
            ys.append(label)
            eyes.append(eye)
    n = len(ys)
    return SequenceSet(np.stack(xs), np.array(ys, np.int64), np.array(eyes, np.int64), np.arange(n))


def _config_lines(config: GeneratorConfig) -> str:
    lines = []
    for key, value in config.to_dict().items():
        if isinstance(value, (tuple, list)):
            value = ",".join(repr(float(v)) for v in value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def generate_synthetic(config: GeneratorConfig, out_dir) -> list[ManifestEntry]:
    """Write sequence files, manifest.csv and generator.cfg under ``out_dir``."""
    out = Path(out_dir)
    (out / "sequences").mkdir(parents=True, exist_ok=True)
    data = generate_arrays(config)
    entries = []
    for i in range(len(data)):
        eye = int(data.eye_ids[i])
        rel = f"sequences/seq{i:05d}_eye{eye:03d}.smat"
        save_tensor(out / rel, data.x[i])
        entries.append(ManifestEntry(rel, int(data.labels[i]), eye))
    write_manifest(out / "manifest.csv", entries)
    (out / "generator.cfg").write_text(_config_lines(config), encoding="utf-8")
    return entries


def load_sequences(root, entries: list[ManifestEntry] | None = None) -> SequenceSet:
    """Read every sequence referenced by the manifest under ``root``."""
    root = Path(root)
    all_entries = read_manifest(root / "manifest.csv")
    ids = {e: i for i, e in enumerate(all_entries)}
    entries = all_entries if entries is None else entries
    xs = []
    for e in entries:
        path = root / e.sequence_path
        if not path.is_file():
            raise FileNotFoundError(f"manifest references missing file {path}")
        xs.append(load_tensor(path))
    shapes = {a.shape for a in xs}
    if len(shapes) != 1:
        raise ValueError(f"sequences have mixed shapes {sorted(shapes)}")
    return SequenceSet(np.stack(xs), np.array([e.label for e in entries], np.int64),
                       np.array([e.eye_id for e in entries], np.int64),
                       np.array([ids[e] for e in entries], np.int64))


def split_grouped(entries: list, test_fraction: float, seed: int) -> tuple[list, list]:
    """Partition by eye: shuffle the distinct eye ids and cut.

    Works on anything with an ``eye_id`` attribute (manifest entries) and
    keeps the input order within each side.
    """
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    eyes = np.array(sorted({e.eye_id for e in entries}))
    if len(eyes) < 2:
        raise ValueError("grouped split needs at least two eyes")
    n_test = int(np.clip(np.floor(test_fraction * len(eyes) + 0.5), 1, len(eyes) - 1))
    order = np.random.default_rng(seed).permutation(len(eyes))
    test_eyes = set(eyes[order[:n_test]].tolist())
    train = [e for e in entries if e.eye_id not in test_eyes]
    test = [e for e in entries if e.eye_id in test_eyes]
    return train, test


def split_indices(eye_ids: np.ndarray, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Index form of :func:`split_grouped` for in-memory datasets."""
    entries = [ManifestEntry("", 0, int(e)) for e in eye_ids]
    train, test = split_grouped(entries, test_fraction, seed)
    test_eyes = {e.eye_id for e in test}
    mask = np.array([int(e) in test_eyes for e in eye_ids])
    return np.flatnonzero(~mask), np.flatnonzero(mask)
