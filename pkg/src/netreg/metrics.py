"""Overlap and field-regularity metrics for registration quality.

Rates over empty collections are reported as None (not applicable),
never as 0; CSV output writes them as "na".
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError
from .field import jacobian_determinant, warp


@dataclass
class LabeledMasks:
    """Organ and lesion masks of one time point, keyed by stable ids."""

    organs: dict[str, np.ndarray]
    lesions: dict[str, np.ndarray]

    def validate(self):
        shapes = {m.shape for m in self.organs.values()} | {m.shape for m in self.lesions.values()}
        if len(shapes) > 1:
            raise ShapeError(f"masks disagree on extents: {sorted(shapes)}")
        return self


@dataclass
class EvalReport:
    dice_organs_mean: float | None = None
    dice_organs_std: float | None = None
    dice_lesions_mean: float | None = None
    dice_lesions_std: float | None = None
    detection_rate: float | None = None
    disappearing_rate: float | None = None
    sdjdet: float | None = None

    CSV_COLUMNS = ("dice_organs_mean", "dice_organs_std", "dice_lesions_mean",
                   "dice_lesions_std", "detection_rate", "disappearing_rate", "sdjdet")

    def csv_row(self) -> str:
        vals = []
        for c in self.CSV_COLUMNS:
            v = getattr(self, c)
            vals.append("na" if v is None else f"{v:.6f}")
        return ",".join(vals)

    @staticmethod
    def csv_header() -> str:
        return ",".join(EvalReport.CSV_COLUMNS)


def _as_bool(m, name) -> np.ndarray:
    arr = np.asarray(m)
    if arr.ndim != 3:
        raise ShapeError(f"{name} must be a 3D mask, got shape {arr.shape}")
    return arr.astype(bool) if arr.dtype != bool else arr


def dice(a, b) -> float:
    """2|a & b| / (|a| + |b|); 1.0 for two empty masks, 0.0 if exactly one is empty."""
    a = _as_bool(a, "dice mask a")
    b = _as_bool(b, "dice mask b")
    if a.shape != b.shape:
        raise ShapeError(f"dice extent mismatch: {a.shape} vs {b.shape}")
    na = int(a.sum())
    nb = int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    return 2.0 * int((a & b).sum()) / (na + nb)


def warp_mask(mask, phi) -> np.ndarray:
    """Trilinear warp of the 0/1 mask, then threshold at 0.5 (>= keeps the voxel)."""
    m = _as_bool(mask, "warp_mask input")
    w = warp(m.astype(np.float32), np.asarray(phi, dtype=np.float32))
    return w >= 0.5


def detection_rate(pairs) -> float | None:
    """Percent of lesions with |warped & fixed| / |fixed| strictly above 0.5.

    pairs: (fixed lesion mask, warped lesion mask) per lesion present at
    both time points.  Empty input is not applicable, not 0.
    """
    detected = 0
    valid = 0
    for fixed_m, warped_m in pairs:
        f = _as_bool(fixed_m, "detection fixed lesion")
        w = _as_bool(warped_m, "detection warped lesion")
        nf = int(f.sum())
        if nf == 0:
            warnings.warn("detection_rate: empty fixed lesion mask excluded")
            continue
        valid += 1
        if int((f & w).sum()) / nf > 0.5:
            detected += 1
    if valid == 0:
        return None
    return 100.0 * detected / valid


def disappearing_rate(vanished) -> float | None:
    """Mean percent shrinkage max(0, 1 - |warped|/|moving|) over vanished lesions."""
    shrink = []
    for moving_m, warped_m in vanished:
        m = _as_bool(moving_m, "disappearing moving lesion")
        w = _as_bool(warped_m, "disappearing warped lesion")
        nm = int(m.sum())
        if nm == 0:
            warnings.warn("disappearing_rate: empty moving lesion mask excluded")
            continue
        shrink.append(max(0.0, 1.0 - int(w.sum()) / nm))
    if not shrink:
        return None
    return 100.0 * float(np.mean(shrink))


def sdjdet(phi) -> float:
    """Population standard deviation of the Jacobian determinant."""
    return float(np.std(jacobian_determinant(phi)))


def evaluate(fixed_masks: LabeledMasks, moving_masks: LabeledMasks, phi,
             vanished_ids=None) -> EvalReport:
    """Warp the moving-time masks by phi and score them against fixed time.

    Lesion ids present in moving but absent from fixed are treated as
    vanished unless vanished_ids says otherwise.
    """
    fixed_masks.validate()
    moving_masks.validate()
    if vanished_ids is None:
        vanished_ids = set(moving_masks.lesions) - set(fixed_masks.lesions)
    vanished_ids = set(vanished_ids)

    organ_dices = []
    for key in sorted(fixed_masks.organs):
        if key not in moving_masks.organs:
            continue
        organ_dices.append(dice(fixed_masks.organs[key], warp_mask(moving_masks.organs[key], phi)))

    lesion_dices = []
    det_pairs = []
    dis_pairs = []
    for key in sorted(moving_masks.lesions):
        warped = warp_mask(moving_masks.lesions[key], phi)
        if key in vanished_ids:
            dis_pairs.append((moving_masks.lesions[key], warped))
        elif key in fixed_masks.lesions:
            lesion_dices.append(dice(fixed_masks.lesions[key], warped))
            det_pairs.append((fixed_masks.lesions[key], warped))

    rep = EvalReport(sdjdet=sdjdet(phi))
    if organ_dices:
        rep.dice_organs_mean = float(np.mean(organ_dices))
        rep.dice_organs_std = float(np.std(organ_dices))
    if lesion_dices:
        rep.dice_lesions_mean = float(np.mean(lesion_dices))
        rep.dice_lesions_std = float(np.std(lesion_dices))
    rep.detection_rate = detection_rate(det_pairs)
    rep.disappearing_rate = disappearing_rate(dis_pairs)
    return rep
