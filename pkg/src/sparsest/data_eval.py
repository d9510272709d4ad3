"""Synthetic desk-scale video data and ROC/AUC evaluation.

``generate_blobs`` produces bouncing bright squares on a black frame, a
small stand-in for moving-digit prediction benchmarks: the foreground is
sparse and changes slowly.  ``generate_cycles`` produces a cargo block
looping around a fixed path over a static textured background, with
injectable anomalies (stall, missing cargo, erratic off-path motion) and
exact frame labels.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .tensor_core import derive_seed, make_rng

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class BouncingBlobConfig:
    size: int = 16
    channels: int = 1
    n_blobs: int = 2
    blob_min: int = 3
    blob_max: int = 5
    length: int = 20
    speed_min: float = 0.5
    speed_max: float = 1.5
    n_train: int = 200
    n_val: int = 50
    n_test: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.blob_max > self.size or self.blob_min < 1 or self.blob_min > self.blob_max:
            raise ValueError(f"blob sizes [{self.blob_min}, {self.blob_max}] do not fit a "
                             f"{self.size}x{self.size} frame")
        if self.length < 1:
            raise ValueError("length must be positive")
        if not 0 <= self.speed_min <= self.speed_max:
            raise ValueError("need 0 <= speed_min <= speed_max")

    def as_dict(self) -> dict:
        return asdict(self)


def _coverage_1d(start: float, side: int, n: int) -> np.ndarray:
    """Overlap of the interval ``[start, start + side)`` with each unit pixel."""
    px = np.arange(n)
    return np.clip(np.minimum(px + 1, start + side) - np.maximum(px, start), 0.0, 1.0)


def render_square(frame: np.ndarray, top: float, left: float, side: int, value: float = 1.0) -> None:
    """Draw an anti-aliased square (pixel value = covered area), max-composited."""
    H, W = frame.shape[-2:]
    patch = value * np.outer(_coverage_1d(top, side, H), _coverage_1d(left, side, W))
    np.maximum(frame, patch, out=frame)


def bounce(pos: float, vel: float, lo: float, hi: float) -> tuple[float, float]:
    """Advance one step with reflection at ``lo`` and ``hi``; speed is preserved."""
    pos += vel
    while pos < lo or pos > hi:
        if pos < lo:
            pos, vel = 2 * lo - pos, -vel
        else:
            pos, vel = 2 * hi - pos, -vel
    return pos, vel


def blob_trajectories(cfg: BouncingBlobConfig, rng: np.random.Generator):
    """Sides, positions ``(T, n, 2)`` and velocities ``(T, n, 2)`` for one sequence."""
    sides = rng.integers(cfg.blob_min, cfg.blob_max + 1, size=cfg.n_blobs)
    pos = np.empty((cfg.length, cfg.n_blobs, 2))
    vel = np.empty((cfg.length, cfg.n_blobs, 2))
    for b, side in enumerate(sides):
        hi = cfg.size - side
        p = rng.uniform(0, hi, size=2)
        angle = rng.uniform(0, 2 * np.pi)
        speed = rng.uniform(cfg.speed_min, cfg.speed_max)
        v = speed * np.array([np.cos(angle), np.sin(angle)])
        for t in range(cfg.length):
            pos[t, b], vel[t, b] = p, v
            for ax in range(2):
                p[ax], v[ax] = bounce(p[ax], v[ax], 0.0, hi)
    return sides, pos, vel


def blob_sequence(cfg: BouncingBlobConfig, seed: int) -> np.ndarray:
    rng = make_rng(seed)
    sides, pos, _ = blob_trajectories(cfg, rng)
    frames = np.zeros((cfg.length, cfg.channels, cfg.size, cfg.size))
    for t in range(cfg.length):
        for b, side in enumerate(sides):
            render_square(frames[t], pos[t, b, 0], pos[t, b, 1], int(side))
    return frames


def generate_blobs(cfg: BouncingBlobConfig) -> dict[str, np.ndarray]:
    """Train/val/test arrays shaped ``(S, T, C, H, W)``; deterministic per seed."""
    counts = dict(zip(SPLITS, (cfg.n_train, cfg.n_val, cfg.n_test)))
    out = {}
    for k, split in enumerate(SPLITS):
        seqs = [blob_sequence(cfg, derive_seed(cfg.seed, k, i)) for i in range(counts[split])]
        out[split] = (np.stack(seqs) if seqs
                      else np.zeros((0, cfg.length, cfg.channels, cfg.size, cfg.size)))
    return out


# --- machine-cycle sequences with anomalies --------------------------------------

@dataclass(frozen=True)
class AnomalyCycleConfig:
    size: int = 16
    cargo: int = 3
    margin: int = 2
    speed: int = 1
    length: int = 80
    frame_step: int = 1
    background_max: float = 0.3
    n_train: int = 6
    n_val: int = 2
    n_test: int = 4
    # (kind, start, stop) frame spans per test sequence, in sampled-frame units.
    injectors: tuple = (("stall", 24, 34), ("off_path", 52, 60))
    seed: int = 0

    def __post_init__(self):
        if self.size - 2 * self.margin - self.cargo < 1:
            raise ValueError("path does not fit inside the frame")
        for kind, start, stop in self.injectors:
            if kind not in INJECTORS:
                raise ValueError(f"unknown anomaly injector {kind!r}")
            if not 0 <= start <= stop < self.length:
                raise ValueError(f"injector span [{start}, {stop}] outside sequence")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["injectors"] = [list(i) for i in self.injectors]
        return d


INJECTORS = ("stall", "skip_load", "off_path")


def cycle_path(cfg: AnomalyCycleConfig) -> np.ndarray:
    """Top-left corners of the cargo along a closed rectangular loop."""
    lo, hi = cfg.margin, cfg.size - cfg.margin - cfg.cargo
    pts = ([(hi, c) for c in range(lo, hi)] + [(r, hi) for r in range(hi, lo, -1)]
           + [(lo, c) for c in range(hi, lo, -1)] + [(r, lo) for r in range(lo, hi)])
    return np.array(pts, dtype=np.int64)


def _background(cfg: AnomalyCycleConfig) -> np.ndarray:
    rng = make_rng(derive_seed(cfg.seed, 99))
    return rng.uniform(0.0, cfg.background_max, size=(cfg.size, cfg.size))


def cycle_sequence(cfg: AnomalyCycleConfig, seed: int, injectors=()) -> tuple[np.ndarray, np.ndarray]:
    """One sequence ``(T, 1, H, W)`` and its boolean frame labels."""
    rng = make_rng(seed)
    path = cycle_path(cfg)
    background = _background(cfg)
    n_raw = cfg.length * cfg.frame_step
    phase = int(rng.integers(len(path)))
    spans = [(kind, start * cfg.frame_step, (stop + 1) * cfg.frame_step) for kind, start, stop in injectors]
    frames = np.empty((cfg.length, 1, cfg.size, cfg.size))
    labels = np.zeros(cfg.length, dtype=bool)
    for t in range(n_raw):
        active = [kind for kind, a, b in spans if a <= t < b]
        if "stall" not in active:
            phase += cfg.speed
        top, left = path[phase % len(path)]
        if "off_path" in active:
            top, left = rng.integers(0, cfg.size - cfg.cargo + 1, size=2)
        if t % cfg.frame_step:
            continue
        frame = background.copy()
        if "skip_load" not in active:
            frame[top:top + cfg.cargo, left:left + cfg.cargo] = 1.0
        frames[t // cfg.frame_step, 0] = frame
        labels[t // cfg.frame_step] = bool(active)
    return frames, labels


def generate_cycles(cfg: AnomalyCycleConfig) -> dict:
    """Normal train/val sequences and labelled test sequences."""
    out = {}
    for k, split in enumerate(SPLITS):
        n = (cfg.n_train, cfg.n_val, cfg.n_test)[k]
        inj = cfg.injectors if split == "test" else ()
        pairs = [cycle_sequence(cfg, derive_seed(cfg.seed, k, i), inj) for i in range(n)]
        out[split] = np.stack([p[0] for p in pairs]) if pairs else np.zeros(
            (0, cfg.length, 1, cfg.size, cfg.size))
        out[f"{split}_labels"] = np.stack([p[1] for p in pairs]) if pairs else np.zeros(
            (0, cfg.length), dtype=bool)
    return out


# --- ROC / AUC -----------------------------------------------------------------

@dataclass
class RocResult:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float
    extra: dict = field(default_factory=dict)


def roc_auc(scores, labels) -> RocResult:
    """ROC by threshold sweep and AUC by the Mann-Whitney rank statistic.

    Tied scores receive midranks, so a constant score gives exactly 0.5.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both positive and negative labels")
    ranks = rankdata(scores)  # midranks for ties
    auc = (ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)
    thresholds = np.unique(scores)[::-1]
    tpr = [0.0]
    fpr = [0.0]
    for thr in thresholds:
        hit = scores >= thr
        tpr.append(np.count_nonzero(hit & labels) / n_pos)
        fpr.append(np.count_nonzero(hit & ~labels) / n_neg)
    return RocResult(np.array(fpr), np.array(tpr), np.concatenate([[np.inf], thresholds]), float(auc))


def trapezoid_auc(fpr, tpr) -> float:
    return float(np.trapezoid(tpr, fpr))
