"""Dataset variants (original / bone-suppressed / segmented / filtered) and mask analyses."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .eda import ClinicalRecord
from .imaging import BinaryMask, ImageGrid, apply_mask, combine_masks, point_in_mask

JSRT_SIDE = 2048


class DatasetVariant(str, enum.Enum):
    V01 = "V01"  # original
    V02 = "V02"  # bone shadows excluded
    V03 = "V03"  # original, lung-segmented
    V04 = "V04"  # bone shadows excluded, lung-segmented
    V05 = "V05"  # V04 minus embedding outliers

    @classmethod
    def parse(cls, text: str) -> "DatasetVariant":
        key = text.strip().upper()
        if key.startswith("V") and key[1:].isdigit():
            key = f"V{int(key[1:]):02d}"
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown dataset variant {text!r}") from None

    @property
    def needs_originals(self) -> bool:
        return self in (DatasetVariant.V01, DatasetVariant.V03)

    @property
    def needs_bse(self) -> bool:
        return self in (DatasetVariant.V02, DatasetVariant.V04, DatasetVariant.V05)

    @property
    def needs_masks(self) -> bool:
        return self in (DatasetVariant.V03, DatasetVariant.V04, DatasetVariant.V05)


@dataclass(frozen=True)
class Sample:
    case_id: str
    image: ImageGrid
    label: str

    def __post_init__(self):
        if self.label not in ("nodule", "normal"):
            raise ValueError(f"bad label {self.label!r}")


@dataclass(frozen=True)
class ProcessedDataset:
    variant: DatasetVariant
    samples: list[Sample]
    excluded_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        ids = [s.case_id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate case ids in dataset")
        if set(ids) & set(self.excluded_ids):
            raise ValueError("excluded ids still present in dataset")

    @property
    def case_ids(self) -> list[str]:
        return [s.case_id for s in self.samples]


def derive_bone_mask(
    original: ImageGrid, bse: ImageGrid, lung_mask: BinaryMask, threshold: int
) -> BinaryMask:
    """Pixels where bone suppression removed at least ``threshold`` intensity, inside the lungs."""
    if original.shape != bse.shape or original.shape != lung_mask.shape:
        raise ValueError("original, BSE image and lung mask must share dimensions")
    if threshold <= 0:
        raise ValueError("bone threshold must be positive")
    diff = np.maximum(original.pixels.astype(np.int32) - bse.pixels.astype(np.int32), 0)
    return BinaryMask((diff >= threshold) & (lung_mask.bits == 1))


def _labels_from(labels) -> dict[str, str]:
    if isinstance(labels, Mapping):
        return dict(labels)
    return {r.case_id: r.label for r in labels}


def build_variant(
    variant: DatasetVariant | str,
    labels: Mapping[str, str] | Sequence[ClinicalRecord],
    originals: Optional[Mapping[str, ImageGrid]] = None,
    bse_images: Optional[Mapping[str, ImageGrid]] = None,
    lung_masks: Optional[Mapping[str, BinaryMask]] = None,
    exclusion_list: Sequence[str] = (),
) -> ProcessedDataset:
    """Assemble one dataset variant; samples come back sorted by case id.

    ``labels`` maps case id to "nodule"/"normal" (clinical records are accepted too).
    """
    if isinstance(variant, str) and not isinstance(variant, DatasetVariant):
        variant = DatasetVariant.parse(variant)
    labels = _labels_from(labels)

    required = []
    if variant.needs_originals:
        required.append(("originals", originals))
    if variant.needs_bse:
        required.append(("bse_images", bse_images))
    if variant.needs_masks:
        required.append(("lung_masks", lung_masks))
    for name, coll in required:
        if coll is None:
            raise ValueError(f"variant {variant.value} requires {name}")

    base_ids = set(required[0][1])
    for name, coll in required[1:]:
        if set(coll) != base_ids:
            diff = sorted(set(coll) ^ base_ids)
            raise ValueError(f"case ids of {name} do not align: {diff[:5]}")
    unlabeled = sorted(base_ids - set(labels))
    if unlabeled:
        raise ValueError(f"no label for cases {unlabeled[:5]}")

    excluded = sorted(set(exclusion_list)) if variant is DatasetVariant.V05 else []
    unknown = [c for c in excluded if c not in base_ids]
    if unknown:
        raise ValueError(f"exclusion ids not found: {unknown[:5]}")

    source = originals if variant.needs_originals else bse_images
    samples = []
    for case_id in sorted(base_ids - set(excluded)):
        image = source[case_id]
        if variant.needs_masks:
            image = apply_mask(image, lung_masks[case_id])
        samples.append(Sample(case_id, image, labels[case_id]))
    return ProcessedDataset(variant, samples, excluded)


def universal_mask_coverage(
    masks: Mapping[str, BinaryMask] | Sequence[BinaryMask],
    records: Sequence[ClinicalRecord],
    op: str,
    coord_side: int = JSRT_SIDE,
) -> list[str]:
    """Nodule cases whose location falls outside the combined (universal) mask.

    Record coordinates are taken to live on a ``coord_side`` square grid and are
    scaled proportionally onto the mask grid.
    """
    mask_list = list(masks.values()) if isinstance(masks, Mapping) else list(masks)
    universal = combine_masks(mask_list, op)
    sx = universal.width / coord_side
    sy = universal.height / coord_side
    uncovered = []
    for r in records:
        if not r.has_nodule:
            continue
        x = min(int(r.nodule_x * sx), universal.width - 1)
        y = min(int(r.nodule_y * sy), universal.height - 1)
        if not point_in_mask(universal, x, y):
            uncovered.append(r.case_id)
    return sorted(uncovered)


def mask_dissimilarity(m1: BinaryMask, m2: BinaryMask) -> float:
    """Jaccard distance between two masks (0 when both are empty)."""
    if m1.shape != m2.shape:
        raise ValueError("mask dimensions differ")
    a = m1.bits.astype(bool)
    b = m2.bits.astype(bool)
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 0.0
    return 1.0 - int(np.count_nonzero(a & b)) / union
