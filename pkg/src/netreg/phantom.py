"""Synthetic volume pairs with known deformations and masks.

A case is built from one noiseless anatomy: ellipsoid organ blobs plus
lesions on a uniform background. The fixed image is that anatomy with
lesions in their follow-up state. The moving image is the anatomy with
lesions in their baseline state, warped by phi_gt = exp(v) where v is a
sum of Gaussian velocity bumps, then noised. Lesion evolution tags give
the baseline -> follow-up change: a "vanish" lesion exists only in the
moving image, "shrink"/"grow" rescale the radius by `factor`.

phi_gt maps the fixed grid into the moving anatomy (the generative
direction). A registration of moving onto fixed should recover its
group inverse, stored as phi_reg = exp(-v); endpoint errors are
measured against phi_reg.

Conventions: `extents` is array order (Z, Y, X) like every shape in
this package; centers, radii, widths and amplitudes are (x, y, z)
component order matching displacement-field channels. Masks are exact
analytic indicators, not thresholded intensities: moving-grid masks
evaluate the ellipsoid inequality at x + phi_gt(x).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .field import exp_velocity, jacobian_determinant, warp
from .metrics import LabeledMasks

EVOLUTIONS = ("stable", "shrink", "grow", "vanish")

# per-step displacement bound for the default 7 squaring steps: the
# scaled field v / 2^7 must stay under half a voxel
MAX_TOTAL_AMPLITUDE = 0.5 * 2 ** 7


class PhantomError(ValueError):
    pass


@dataclass
class Blob:
    """Ellipsoid intensity blob; profile (1 - d^2)^2 inside d <= 1."""
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    intensity: float


@dataclass
class Lesion:
    center: tuple[float, float, float]
    radius: float
    intensity: float
    evolution: str = "stable"
    factor: float = 1.0  # follow-up radius = radius * factor (shrink/grow)


@dataclass
class Bump:
    """Isotropic Gaussian velocity bump amp * exp(-r^2 / (2 w^2))."""
    center: tuple[float, float, float]
    width: float
    amplitude: tuple[float, float, float]


@dataclass
class PhantomSpec:
    extents: tuple[int, int, int] = (64, 64, 64)
    organs: list[Blob] = dc_field(default_factory=list)
    lesions: list[Lesion] = dc_field(default_factory=list)
    bumps: list[Bump] = dc_field(default_factory=list)
    noise_level: float = 0.02  # noise std as a fraction of peak intensity
    background: float = 0.05
    seed: int = 0

    def validate(self):
        if len(self.extents) != 3 or any(int(e) < 4 for e in self.extents):
            raise PhantomError(f"extents must be three values >= 4, got {self.extents}")
        ez, ey, ex = (int(e) for e in self.extents)
        lim = (ex - 1, ey - 1, ez - 1)  # centers are (x, y, z)
        for b in self.organs:
            if any(b.center[i] - b.radii[i] < 0 or b.center[i] + b.radii[i] > lim[i]
                   for i in range(3)):
                raise PhantomError(f"organ at {b.center} with radii {b.radii} leaves the grid")
            if min(b.radii) <= 0 or b.intensity <= 0:
                raise PhantomError(f"organ radii and intensity must be positive: {b}")
        for l in self.lesions:
            if l.evolution not in EVOLUTIONS:
                raise PhantomError(f"unknown evolution {l.evolution!r}, expected one of {EVOLUTIONS}")
            if l.radius <= 0 or l.factor <= 0:
                raise PhantomError(f"lesion radius and factor must be positive: {l}")
            r = l.radius * max(1.0, l.factor)
            if any(l.center[i] - r < 0 or l.center[i] + r > lim[i] for i in range(3)):
                raise PhantomError(f"lesion at {l.center} with radius {r} leaves the grid")
        total_amp = sum(max(abs(a) for a in b.amplitude) for b in self.bumps)
        if total_amp > MAX_TOTAL_AMPLITUDE:
            raise PhantomError(
                f"summed bump amplitude {total_amp:.1f} exceeds {MAX_TOTAL_AMPLITUDE:.0f} "
                "(per-step displacement bound for 7 squaring steps)")
        for b in self.bumps:
            if b.width <= 0:
                raise PhantomError(f"bump width must be positive: {b}")
        if self.noise_level < 0:
            raise PhantomError(f"noise_level must be >= 0, got {self.noise_level}")


@dataclass
class PhantomCase:
    spec: PhantomSpec
    fixed: np.ndarray
    moving: np.ndarray
    fixed_masks: LabeledMasks
    moving_masks: LabeledMasks
    phi_gt: np.ndarray   # generative: moving_anatomy = warp(source, phi_gt)
    phi_reg: np.ndarray  # registration truth: warp(moving, phi_reg) ~ fixed

    @property
    def body_mask(self) -> np.ndarray:
        """Union of fixed organ masks; evaluation region for field errors."""
        out = np.zeros(self.fixed.shape, dtype=bool)
        for m in self.fixed_masks.organs.values():
            out |= m
        return out


def _grid(extents):
    zz, yy, xx = np.indices(tuple(int(e) for e in extents)).astype(np.float64)
    return xx, yy, zz  # channel order (x, y, z)


def _ellipsoid_d2(coords, center, radii):
    d2 = np.zeros_like(coords[0])
    for c, ctr, rad in zip(coords, center, radii):
        t = (c - ctr) / rad
        d2 += t * t
    return d2


def _velocity(spec: PhantomSpec) -> np.ndarray:
    coords = _grid(spec.extents)
    v = np.zeros((3,) + coords[0].shape, dtype=np.float64)
    for b in spec.bumps:
        r2 = _ellipsoid_d2(coords, b.center, (b.width,) * 3)
        g = np.exp(-0.5 * r2)
        for c in range(3):
            if b.amplitude[c] != 0.0:
                v[c] += b.amplitude[c] * g
    return v.astype(np.float32)


def _lesion_state(lesion: Lesion, time: str) -> float | None:
    """Radius at the given time point, or None when absent."""
    if time == "fixed":
        if lesion.evolution == "vanish":
            return None
        if lesion.evolution in ("shrink", "grow"):
            return lesion.radius * lesion.factor
    return lesion.radius


def _render(spec: PhantomSpec, coords, time: str):
    """Noiseless image and analytic masks at integer or displaced coords."""
    img = np.full(coords[0].shape, spec.background, dtype=np.float64)
    organs = {}
    for i, b in enumerate(spec.organs):
        d2 = _ellipsoid_d2(coords, b.center, b.radii)
        inside = d2 <= 1.0
        prof = np.where(inside, 1.0 - d2, 0.0)
        img += b.intensity * prof * prof
        organs[f"organ_{i}"] = inside
    lesions = {}
    for i, l in enumerate(spec.lesions):
        r = _lesion_state(l, time)
        if r is None:
            continue
        d2 = _ellipsoid_d2(coords, l.center, (r,) * 3)
        inside = d2 <= 1.0
        prof = np.where(inside, 1.0 - d2, 0.0)
        img += l.intensity * prof * prof
        lesions[f"lesion_{i}"] = inside
    return img, LabeledMasks(organs=organs, lesions=lesions)


def generate(spec: PhantomSpec) -> PhantomCase:
    """Deterministic case from the spec; rejects folding ground truth."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    v = _velocity(spec)
    phi_gt = exp_velocity(v, 7)
    phi_reg = exp_velocity(-v, 7)
    det = jacobian_determinant(phi_gt)
    if det.min() <= 0.0:
        raise PhantomError(f"ground-truth field folds: min det J = {det.min():.4f}")

    coords = _grid(spec.extents)
    fixed, fixed_masks = _render(spec, coords, "fixed")
    source_moving, _ = _render(spec, coords, "moving")
    moving = warp(source_moving.astype(np.float32), phi_gt).astype(np.float64)
    displaced = tuple(coords[c] + phi_gt[c] for c in range(3))
    _, moving_masks = _render(spec, displaced, "moving")

    peak = float(fixed.max())
    if spec.noise_level > 0:
        fixed = fixed + rng.normal(0.0, spec.noise_level * peak, fixed.shape)
        moving = moving + rng.normal(0.0, spec.noise_level * peak, moving.shape)
    return PhantomCase(spec, fixed.astype(np.float32), moving.astype(np.float32),
                       fixed_masks, moving_masks, phi_gt, phi_reg)


@dataclass
class FieldError:
    mean: float
    p95: float


def field_error(phi_est: np.ndarray, phi_ref: np.ndarray, mask: np.ndarray) -> FieldError:
    """Mean and 95th-percentile endpoint error (voxels) inside mask."""
    phi_est = np.asarray(phi_est)
    phi_ref = np.asarray(phi_ref)
    if phi_est.shape != phi_ref.shape:
        raise ValueError(f"field extents differ: {phi_est.shape} vs {phi_ref.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != phi_est.shape[1:]:
        raise ValueError(f"mask shape {mask.shape} does not match field extents {phi_est.shape[1:]}")
    if not mask.any():
        raise ValueError("field_error is not applicable to an empty mask")
    d = phi_est.astype(np.float64) - phi_ref.astype(np.float64)
    norms = np.sqrt((d * d).sum(axis=0))[mask]
    return FieldError(float(norms.mean()), float(np.percentile(norms, 95)))


def default_spec(extent: int = 64, seed: int = 0) -> PhantomSpec:
    """Standard case at the given cube extent, jittered per seed.

    Geometry scales linearly with extent so 32-cube suites keep the
    difficulty of the 64-cube default: unregistered organ Dice lands in
    [0.4, 0.8]. The bumps are wide relative to their amplitude (max
    displacement ~4-6 voxels at extent 64), so the ground truth is a
    smooth, fold-free field a regularized optimizer can recover.
    """
    s = extent / 64.0
    rng = np.random.default_rng(seed + 7919)
    c = extent / 2.0

    def jit(n, lo, hi):
        return rng.uniform(lo, hi, n)

    organs = [
        Blob(center=tuple(c + 4.0 * s * d for d in jit(3, -1, 1)),
             radii=tuple(np.array([16.0, 14.5, 12.5]) * s * (1 + 0.08 * jit(3, -1, 1))),
             intensity=1.0),
        Blob(center=tuple(np.array([c - 15.0 * s, c + 12.5 * s, c - 10.5 * s])
                          + 2.5 * s * jit(3, -1, 1)),
             radii=tuple(np.array([6.5, 6.0, 5.5]) * s * (1 + 0.1 * jit(3, -1, 1))),
             intensity=1.5),
    ]
    big = organs[0]
    lesions = []
    for i, evo in enumerate(EVOLUTIONS):
        # spread lesions inside the large organ
        ang = 2.0 * np.pi * (i / 4.0 + 0.05 * jit(1, -1, 1)[0])
        off = np.array([np.cos(ang) * 0.55 * big.radii[0],
                        np.sin(ang) * 0.55 * big.radii[1],
                        (i - 1.5) * 0.22 * big.radii[2]])
        lesions.append(Lesion(
            center=tuple(np.array(big.center) + off),
            radius=float((3.0 + 0.5 * i) * s * (1 + 0.1 * jit(1, -1, 1)[0])),
            intensity=2.5,
            evolution=evo,
            factor={"stable": 1.0, "shrink": 0.55, "grow": 1.45, "vanish": 1.0}[evo]))
    def unit(n=3):
        d = rng.normal(size=n)
        return d / np.linalg.norm(d)

    # each organ gets a concentric Gaussian pair, 4/3 at width w minus
    # 1/3 at width w/2: the curvatures cancel at the center, so the
    # profile has a flat top and the whole organ moves near-coherently.
    # That keeps the truth field recoverable from boundary intensity
    # alone. Two broad background bumps add context drift; 6 bumps total.
    centers = [np.array(o.center) + np.array(o.radii) * jit(3, -0.15, 0.15)
               for o in organs]
    widths = [extent * w * (1 + 0.08 * jit(1, -1, 1)[0]) for w in (0.55, 0.45)]
    dirs = [unit() for _ in organs]
    targets = np.array([jit(1, 3.7, 4.4)[0], jit(1, 2.4, 3.0)[0]]) * s
    bg = [(c + 0.2 * extent * jit(3, -1, 1), extent * 0.45,
           unit() * jit(1, 0.65, 1.1)[0] * s),
          (c + 0.25 * extent * jit(3, -1, 1), extent * 0.30,
           unit() * jit(1, 0.3, 0.55)[0] * s)]

    def flat_pair(ctr, w, vec):
        return [(ctr, w, 4.0 / 3.0 * vec), (ctr, 0.5 * w, -1.0 / 3.0 * vec)]

    def bump_list(mags):
        out = list(bg)
        for ctr, w, d, m in zip(centers, widths, dirs, mags):
            out.extend(flat_pair(ctr, w, m * d))
        return out

    def vel_at(p, mags):
        v = np.zeros(3)
        for ctr, w, vec in bump_list(mags):
            v = v + vec * np.exp(-0.5 * float(((p - ctr) ** 2).sum()) / w ** 2)
        return v

    # the bumps overlap, so solve the magnitudes by fixed point until the
    # velocity at each organ center has the drawn target norm; this pins
    # the unregistered organ Dice into its band on every seed. The wide
    # bumps couple the equations, so damp the update to keep it stable.
    mags = targets.copy()
    for _ in range(24):
        got = np.array([np.linalg.norm(vel_at(np.array(o.center), mags)) for o in organs])
        mags = mags * (targets / got) ** 0.7

    bumps = [Bump(center=tuple(ctr), width=float(w), amplitude=tuple(vec))
             for ctr, w, vec in bump_list(mags)]
    return PhantomSpec(extents=(extent,) * 3, organs=organs, lesions=lesions,
                       bumps=bumps, noise_level=0.02, seed=seed)
