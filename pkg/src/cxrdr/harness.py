"""Repeated split-and-train runs, curve averaging, LOESS smoothing, crossing read-off."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .cnn import CnnConfig, build_network, samples_to_batch, train
from .curves import SERIES, TrainingCurve
from .preprocess import DatasetVariant, ProcessedDataset, Sample

log = logging.getLogger(__name__)


def split(samples: Sequence[Sample], val_fraction: float, seed: int):
    """Seeded, label-stratified holdout split.

    The validation size is round(val_fraction * n); it is shared out between
    the classes by largest remainder so each side keeps the global class ratio
    to within one sample.
    """
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must be in (0, 1)")
    samples = list(samples)
    n = len(samples)
    n_val = int(round(val_fraction * n))
    if n_val == 0 or n_val == n:
        raise ValueError(f"{n} samples are too few to split at val_fraction={val_fraction}")

    rng = np.random.default_rng(seed)
    by_label: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        by_label.setdefault(s.label, []).append(i)
    labels = sorted(by_label)
    quotas = {lab: n_val * len(by_label[lab]) / n for lab in labels}
    take = {lab: int(math.floor(quotas[lab])) for lab in labels}
    short = n_val - sum(take.values())
    for lab in sorted(labels, key=lambda lab: (-(quotas[lab] - take[lab]), lab))[:short]:
        take[lab] += 1

    val_idx, train_idx = [], []
    for lab in labels:
        idx = np.array(by_label[lab])[rng.permutation(len(by_label[lab]))]
        val_idx.extend(idx[: take[lab]].tolist())
        train_idx.extend(idx[take[lab] :].tolist())
    if not train_idx or not val_idx:
        raise ValueError("split left one side empty")
    # shuffle the concatenated class blocks so order carries no label information
    train_idx = [train_idx[i] for i in rng.permutation(len(train_idx))]
    val_idx = [val_idx[i] for i in rng.permutation(len(val_idx))]
    return [samples[i] for i in train_idx], [samples[i] for i in val_idx]


def average_curves(curves: Sequence[TrainingCurve], run_id: str = "averaged") -> TrainingCurve:
    curves = list(curves)
    if not curves:
        raise ValueError("no curves to average")
    if len({c.epochs for c in curves}) != 1:
        raise ValueError("curves have different lengths")
    mean = np.mean(np.stack([c.as_array() for c in curves]), axis=0)
    return TrainingCurve(run_id, *[mean[:, k].tolist() for k in range(4)])


def _neighbours(i: int, n: int, q: int) -> np.ndarray:
    # q nearest indices to i; equal distances prefer the lower index
    order = sorted(range(n), key=lambda j: (abs(j - i), j))
    return np.array(sorted(order[:q]))


def loess_smooth(series: Sequence[float], span: float = 0.3, degree: int = 2) -> np.ndarray:
    """Locally weighted polynomial regression over an evenly spaced series.

    Each point is refit from its q = max(degree + 1, ceil(span * n)) nearest
    neighbours with tricube weights scaled by the farthest neighbour distance.
    """
    y = np.asarray(series, dtype=np.float64)
    n = len(y)
    if degree not in (1, 2):
        raise ValueError("degree must be 1 or 2")
    if not 0 < span <= 1:
        raise ValueError("span must be in (0, 1]")
    if n < degree + 1:
        raise ValueError(f"need at least {degree + 1} points for degree {degree}")
    q = min(n, max(degree + 1, int(math.ceil(span * n))))
    out = np.empty(n)
    for i in range(n):
        idx = _neighbours(i, n, q)
        d = np.abs(idx - i).astype(np.float64)
        dmax = d.max()
        if dmax == 0 or np.all(d == d[0]):
            w = np.ones_like(d)
        else:
            w = (1.0 - (d / dmax) ** 3) ** 3
        # centre at i so the fitted value is the intercept
        design = np.vander(idx - i, degree + 1, increasing=True).astype(np.float64)
        sw = np.sqrt(w)
        coef, *_ = np.linalg.lstsq(design * sw[:, None], y[idx] * sw, rcond=None)
        out[i] = coef[0]
    return out


def smooth_curve(curve: TrainingCurve, span: float = 0.3, degree: int = 2, run_id: str = "smoothed") -> TrainingCurve:
    """LOESS-smooth every series; accuracies are clipped to [0, 1], losses to >= 0."""
    if curve.epochs == 0:
        return TrainingCurve(run_id)
    if curve.epochs < degree + 1:
        return TrainingCurve.from_dict({**curve.to_dict(), "run_id": run_id})
    smoothed = {}
    for s in SERIES:
        values = loess_smooth(getattr(curve, s), span, degree)
        hi = 1.0 if s.endswith("acc") else np.inf
        smoothed[s] = np.clip(values, 0.0, hi).tolist()
    return TrainingCurve(run_id, **smoothed)


def crossing_epoch(train_acc: Sequence[float], val_acc: Sequence[float]) -> Optional[int]:
    """First epoch where training accuracy reaches or exceeds validation accuracy."""
    if len(train_acc) != len(val_acc):
        raise ValueError("series lengths differ")
    for e, (t, v) in enumerate(zip(train_acc, val_acc)):
        if t >= v:
            return e
    return None


def actual_accuracy(smoothed: TrainingCurve) -> Optional[float]:
    """Smoothed validation accuracy read off at the crossing epoch (None if no crossing)."""
    e = crossing_epoch(smoothed.train_acc, smoothed.val_acc)
    return None if e is None else smoothed.val_acc[e]


@dataclass
class RunSummary:
    variant: DatasetVariant
    averaged: TrainingCurve
    smoothed: TrainingCurve
    crossing_epoch: Optional[int]
    actual_accuracy: Optional[float]
    runs: list[TrainingCurve] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.smoothed.epochs != self.averaged.epochs:
            raise ValueError("smoothed and averaged curves differ in length")
        if (self.crossing_epoch is None) != (self.actual_accuracy is None):
            raise ValueError("actual_accuracy must accompany a crossing epoch")

    def to_dict(self) -> dict:
        return {
            "variant": self.variant.value,
            "crossing_epoch": self.crossing_epoch,
            "actual_accuracy": self.actual_accuracy,
            "seeds": list(self.seeds),
            "config": self.config,
            "averaged": self.averaged.to_dict(),
            "smoothed": self.smoothed.to_dict(),
            "runs": [c.to_dict() for c in self.runs],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunSummary":
        return cls(
            variant=DatasetVariant(data["variant"]),
            averaged=TrainingCurve.from_dict(data["averaged"]),
            smoothed=TrainingCurve.from_dict(data["smoothed"]),
            crossing_epoch=data["crossing_epoch"],
            actual_accuracy=data["actual_accuracy"],
            runs=[TrainingCurve.from_dict(c) for c in data.get("runs", [])],
            seeds=list(data.get("seeds", [])),
            config=data.get("config", {}),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RunSummary":
        return cls.from_dict(json.loads(text))


def summarize(variant, runs: Sequence[TrainingCurve], span=0.3, degree=2, seeds=(), config=None) -> RunSummary:
    averaged = average_curves(runs)
    smoothed = smooth_curve(averaged, span, degree)
    e = crossing_epoch(smoothed.train_acc, smoothed.val_acc)
    acc = None if e is None else smoothed.val_acc[e]
    return RunSummary(DatasetVariant(variant), averaged, smoothed, e, acc, list(runs), list(seeds), config or {})


def run_experiment(
    variant: DatasetVariant | str,
    dataset: ProcessedDataset | Sequence[Sample],
    cnn_config: CnnConfig,
    epochs: int,
    n_runs: int,
    seeds: Sequence[int],
    val_fraction: float = 0.2,
    span: float = 0.3,
    degree: int = 2,
) -> RunSummary:
    """Independent split + train cycles, one per seed, then average, smooth and read off."""
    if n_runs != len(seeds):
        raise ValueError("need exactly one seed per run")
    variant = DatasetVariant.parse(variant) if isinstance(variant, str) else variant
    samples = dataset.samples if isinstance(dataset, ProcessedDataset) else list(dataset)
    runs = []
    for seed in seeds:
        train_samples, val_samples = split(samples, val_fraction, seed)
        cfg = CnnConfig.from_dict({**cnn_config.to_dict(), "seed": int(seed)})
        net = build_network(cfg)
        tr = samples_to_batch(train_samples, cfg.input_side, cfg.dtype)
        va = samples_to_batch(val_samples, cfg.input_side, cfg.dtype)
        runs.append(train(net, tr, va, epochs, run_id=f"{variant.value}-seed{seed}"))
        log.info("%s seed %d: final train %.3f val %.3f", variant.value, seed, runs[-1].train_acc[-1] if epochs else float("nan"),
                 runs[-1].val_acc[-1] if epochs else float("nan"))
    config = {
        "cnn": cnn_config.to_dict(),
        "epochs": epochs,
        "val_fraction": val_fraction,
        "split": "stratified holdout per run",
        "loess": {"span": span, "degree": degree},
    }
    return summarize(variant, runs, span, degree, seeds, config)
