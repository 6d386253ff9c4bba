"""Deterministic chest phantoms: two elliptical lungs, band ribs, an optional nodule.

Stands in for the license-gated radiograph collection so every pipeline stage
can run end to end. ``bse`` is the same phantom without the rib bands.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .eda import ClinicalRecord, format_metadata_csv
from .imaging import BinaryMask, ImageGrid, mask_to_image, write_pgm
from .tsne import fraction_count

BIT_DEPTH = 12
SOFT_TISSUE = 2400
LUNG_FIELD = 900
# JSRT: 0.175 mm pixels on a 2048 grid
FULL_FIELD_MM = 0.175 * 2048
NORMAL_SCALE = (0.8, 1.0)
OUTLIER_SCALE = 0.4
# Subtlety 1 is the hardest grade, so it gets the faintest disc. Nodules have to be
# far brighter than real ones to stay learnable after downscaling to 64 pixels.
SUBTLETY_CONTRAST = {1: 600, 2: 900, 3: 1200, 4: 1600, 5: 2000}
NODULE_SIZE_MM = (15.0, 50.0)


@dataclass(frozen=True)
class Nodule:
    x: int
    y: int
    radius: float
    contrast: int


@dataclass(frozen=True)
class PhantomParams:
    side: int = 256
    lung_scale: float = 0.9
    nodule: Optional[Nodule] = None
    bone_count: int = 8
    bone_contrast: int = 400
    noise_amplitude: int = 40
    seed: int = 0
    case_id: str = "SYN0000"
    offset: tuple[float, float] = (0.0, 0.0)
    subtlety: Optional[int] = None
    gender: str = "unknown"
    age: Optional[float] = None
    malignant: Optional[bool] = None

    def __post_init__(self):
        if self.side < 16:
            raise ValueError("phantom side must be at least 16 pixels")
        if not 0 < self.lung_scale <= 1:
            raise ValueError("lung_scale must be in (0, 1]")
        if self.bone_count < 0 or self.noise_amplitude < 0:
            raise ValueError("counts and amplitudes must be non-negative")
        if self.nodule is not None:
            n = self.nodule
            if n.radius <= 0:
                raise ValueError("nodule radius must be positive")
            if (n.x - n.radius < 0 or n.y - n.radius < 0
                    or n.x + n.radius > self.side - 1 or n.y + n.radius > self.side - 1):
                raise ValueError("nodule circle must lie inside the image")

    @property
    def pixel_mm(self) -> float:
        return FULL_FIELD_MM / self.side


def lung_ellipses(params: PhantomParams) -> list[tuple[float, float, float, float]]:
    """(cx, cy, semi-axis x, semi-axis y) for the right and left lung."""
    s = params.side
    dx, dy = params.offset
    a = 0.14 * s * params.lung_scale
    b = 0.30 * s * params.lung_scale
    cy = (0.47 + dy) * s
    return [((0.30 + dx) * s, cy, a, b), ((0.70 + dx) * s, cy, a, b)]


def _grid(side):
    yy, xx = np.mgrid[0:side, 0:side]
    return xx.astype(np.float64), yy.astype(np.float64)


def lung_raster(params: PhantomParams) -> np.ndarray:
    xx, yy = _grid(params.side)
    out = np.zeros((params.side, params.side), dtype=bool)
    for cx, cy, a, b in lung_ellipses(params):
        out |= ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0
    return out


def rib_raster(params: PhantomParams) -> np.ndarray:
    """Horizontal bands spaced evenly over the lung height."""
    s = params.side
    out = np.zeros((s, s), dtype=bool)
    if params.bone_count == 0:
        return out
    _, cy, _, b = lung_ellipses(params)[0]
    top, bottom = cy - b, cy + b
    pitch = (bottom - top) / params.bone_count
    thickness = max(1, int(round(0.35 * pitch)))
    for k in range(params.bone_count):
        row = int(round(top + (k + 0.25) * pitch))
        out[max(row, 0) : min(row + thickness, s), :] = True
    return out


def nodule_raster(params: PhantomParams) -> np.ndarray:
    if params.nodule is None:
        return np.zeros((params.side, params.side), dtype=bool)
    xx, yy = _grid(params.side)
    n = params.nodule
    return (xx - n.x) ** 2 + (yy - n.y) ** 2 <= n.radius ** 2


def generate_phantom(params: PhantomParams):
    """Return ``(original, bse, lung_mask, record)`` for one synthetic case."""
    lungs = lung_raster(params)
    if params.nodule is not None and not lungs[params.nodule.y, params.nodule.x]:
        raise ValueError(f"{params.case_id}: nodule centre outside the lung fields")

    rng = np.random.default_rng(params.seed)
    base = np.where(lungs, LUNG_FIELD, SOFT_TISSUE).astype(np.float64)
    if params.nodule is not None:
        base += params.nodule.contrast * nodule_raster(params)
    if params.noise_amplitude:
        base += rng.uniform(-params.noise_amplitude, params.noise_amplitude, base.shape)
    ribs = rib_raster(params).astype(np.float64) * params.bone_contrast

    top = 2 ** BIT_DEPTH - 1
    bse = np.clip(np.rint(base), 0, top)
    original = np.clip(np.rint(base + ribs), 0, top)

    n = params.nodule
    record = ClinicalRecord(
        case_id=params.case_id,
        has_nodule=n is not None,
        nodule_x=None if n is None else n.x,
        nodule_y=None if n is None else n.y,
        size_mm=None if n is None else round(2 * n.radius * params.pixel_mm, 2),
        subtlety=None if n is None else params.subtlety,
        malignant=None if n is None else params.malignant,
        gender=params.gender,
        age=params.age,
    )
    return (
        ImageGrid(original.astype(np.uint16), BIT_DEPTH),
        ImageGrid(bse.astype(np.uint16), BIT_DEPTH),
        BinaryMask(lungs),
        record,
    )


def _place_nodule(params: PhantomParams, rng, size_mm: float, contrast: int) -> Nodule:
    radius = max(1.0, size_mm / 2 / params.pixel_mm)
    cx, cy, a, b = lung_ellipses(params)[rng.integers(2)]
    # sample inside a shrunken ellipse so the disc stays within the lung field
    sa, sb = max(a - radius - 1, 0.0), max(b - radius - 1, 0.0)
    r, theta = math.sqrt(rng.uniform()), rng.uniform(0, 2 * math.pi)
    x = int(round(cx + sa * r * math.cos(theta)))
    y = int(round(cy + sb * r * math.sin(theta)))
    return Nodule(x, y, radius, contrast)


@dataclass
class SyntheticCorpus:
    originals: dict[str, ImageGrid]
    bse: dict[str, ImageGrid]
    masks: dict[str, BinaryMask]
    records: list[ClinicalRecord]
    outlier_ids: list[str]
    params: dict[str, PhantomParams] = field(default_factory=dict)
    ribs: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def case_ids(self) -> list[str]:
        return [r.case_id for r in self.records]

    @property
    def labels(self) -> dict[str, str]:
        return {r.case_id: r.label for r in self.records}


def case_params(index: int, seed: int, side: int, has_nodule: bool, is_outlier: bool) -> PhantomParams:
    """Per-case parameters drawn from a stream derived from (seed, index)."""
    rng = np.random.default_rng([seed, index])
    scale = OUTLIER_SCALE if is_outlier else float(rng.uniform(*NORMAL_SCALE))
    params = PhantomParams(
        side=side,
        lung_scale=scale,
        bone_count=8,
        bone_contrast=400,
        noise_amplitude=40,
        seed=int(rng.integers(2**31)),
        case_id=f"SYN{index:04d}",
        offset=(float(rng.uniform(-0.02, 0.02)), float(rng.uniform(-0.02, 0.02))),
        gender=("male", "female")[int(rng.integers(2))],
        age=float(rng.integers(20, 85)),
    )
    if has_nodule:
        subtlety = int(rng.integers(1, 6))
        size_mm = float(rng.uniform(*NODULE_SIZE_MM))
        nodule = _place_nodule(params, rng, size_mm, SUBTLETY_CONTRAST[subtlety])
        params = replace(params, nodule=nodule, subtlety=subtlety, malignant=bool(rng.integers(2)))
    return params


def generate_dataset(
    n: int,
    nodule_fraction: float = 0.6,
    outlier_fraction: float = 0.05,
    seed: int = 0,
    side: int = 256,
) -> SyntheticCorpus:
    """``n`` phantoms; floor(fraction * n) nodule cases and small-lung outliers."""
    for name, frac in (("nodule_fraction", nodule_fraction), ("outlier_fraction", outlier_fraction)):
        if not 0 <= frac <= 1:
            raise ValueError(f"{name} must be in [0, 1]")
    rng = np.random.default_rng(seed)
    nodule_idx = set(rng.permutation(n)[: fraction_count(nodule_fraction, n)].tolist())
    outlier_idx = set(rng.permutation(n)[: fraction_count(outlier_fraction, n)].tolist())

    corpus = SyntheticCorpus({}, {}, {}, [], [])
    for i in range(n):
        params = case_params(i, seed, side, i in nodule_idx, i in outlier_idx)
        original, bse, mask, record = generate_phantom(params)
        cid = params.case_id
        corpus.originals[cid] = original
        corpus.bse[cid] = bse
        corpus.masks[cid] = mask
        corpus.records.append(record)
        corpus.params[cid] = params
        corpus.ribs[cid] = rib_raster(params)
        if i in outlier_idx:
            corpus.outlier_ids.append(cid)
    return corpus


def write_corpus(corpus: SyntheticCorpus, out_dir) -> None:
    """Emit PGM images and masks plus metadata.csv, manifest.csv, outlier_truth.txt."""
    out = Path(out_dir)
    for sub in ("originals", "bse", "masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    lines = ["case_id,label,path"]
    for r in corpus.records:
        cid = r.case_id
        write_pgm(out / "originals" / f"{cid}.pgm", corpus.originals[cid])
        write_pgm(out / "bse" / f"{cid}.pgm", corpus.bse[cid])
        write_pgm(out / "masks" / f"{cid}.pgm", mask_to_image(corpus.masks[cid]))
        lines.append(f"{cid},{r.label},originals/{cid}.pgm")
    (out / "manifest.csv").write_text("\n".join(lines) + "\n")
    (out / "metadata.csv").write_text(format_metadata_csv(corpus.records))
    (out / "outlier_truth.txt").write_text("".join(f"{c}\n" for c in sorted(corpus.outlier_ids)))
