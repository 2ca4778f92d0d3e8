"""Face-versus-context attribution diagnostics and their mask geometry.

The similarity diagnostics consume embeddings of perturbed variants that
were rendered and encoded elsewhere. The geometry helpers (FCR crop,
equal-area annulus) are exact raster algorithms with no encoder involved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .calib import bootstrap_ci
from .errors import DegenerateBox, DimError, EmptyInput, InvalidGrid, Unreachable

CPI_SIGMAS = (0.0, 1.0, 2.0, 4.0, 6.0, 8.0)
FCR_TARGET = 0.33
MAX_PAD_RATIO = 0.15
FCR_TOLERANCE = 0.02
AREA_TOLERANCE = 0.02


def _cos(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine; a and b broadcast over leading axes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-1] != b.shape[-1]:
        raise DimError(f"embedding dims differ: {a.shape[-1]} vs {b.shape[-1]}")
    num = np.sum(a * b, axis=-1)
    return num / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))


# -- FII ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class OcclusionPair:
    query: np.ndarray
    ref: np.ndarray
    query_face_occ: np.ndarray
    ref_face_occ: np.ndarray
    query_bg_occ: np.ndarray
    ref_bg_occ: np.ndarray

    def deltas(self) -> tuple[float, float]:
        clean = float(_cos(self.query, self.ref))
        face = float(_cos(self.query_face_occ, self.ref_face_occ))
        bg = float(_cos(self.query_bg_occ, self.ref_bg_occ))
        return clean - face, clean - bg


@dataclass(frozen=True)
class FiiResult:
    fii: float
    ci_low: float
    ci_high: float
    delta_face: list[float]
    delta_bg: list[float]

    @property
    def per_pair(self) -> np.ndarray:
        return np.asarray(self.delta_face) - np.asarray(self.delta_bg)


def fii(pairs, *, n_boot: int = 2000, rng_seed: int = 0) -> FiiResult:
    """Mean of delta_face - delta_bg over pairs with a percentile bootstrap CI."""
    pairs = list(pairs)
    if not pairs:
        raise EmptyInput("fii needs at least one pair")
    deltas = np.array([p.deltas() for p in pairs])
    per_pair = deltas[:, 0] - deltas[:, 1]
    lo, hi = bootstrap_ci(per_pair, n_boot=n_boot, rng_seed=rng_seed)
    return FiiResult(
        fii=float(per_pair.mean()),
        ci_low=lo,
        ci_high=hi,
        delta_face=deltas[:, 0].tolist(),
        delta_bg=deltas[:, 1].tolist(),
    )


# -- CPI and B* -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AttributionTriplet:
    """Query variants by level plus identity- and context-matched references.

    ``query`` is (levels, d). A reference is either one embedding (held
    fixed across levels) or a (levels, d) series perturbed alongside the query.
    """

    query: np.ndarray
    id_ref: np.ndarray
    ctx_ref: np.ndarray

    def __post_init__(self):
        q = np.atleast_2d(np.asarray(self.query, dtype=np.float64))
        object.__setattr__(self, "query", q)
        for name in ("id_ref", "ctx_ref"):
            ref = np.asarray(getattr(self, name), dtype=np.float64)
            if ref.shape[-1] != q.shape[1]:
                raise DimError(f"{name} has dim {ref.shape[-1]}, query has {q.shape[1]}")
            if ref.ndim == 2 and ref.shape[0] != q.shape[0]:
                raise DimError(f"{name} has {ref.shape[0]} levels, query has {q.shape[0]}")
            object.__setattr__(self, name, ref)

    @property
    def levels(self) -> int:
        return self.query.shape[0]

    def context_wins(self) -> np.ndarray:
        """Per level: does the query sit at least as close to context as to identity?"""
        return _cos(self.query, self.ctx_ref) >= _cos(self.query, self.id_ref)

    def ctx_similarity(self) -> np.ndarray:
        return _cos(self.query, self.ctx_ref)


def _check_grid(grid, levels: int, *, unit: bool) -> np.ndarray:
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 1 or len(g) == 0:
        raise InvalidGrid("grid must be a non-empty 1-d sequence")
    if len(g) > 1 and np.any(np.diff(g) <= 0):
        raise InvalidGrid(f"grid must be strictly increasing: {g.tolist()}")
    if unit and (g[0] < 0 or g[-1] > 1):
        raise InvalidGrid("revelation grid must lie in [0, 1]")
    if len(g) != levels:
        raise InvalidGrid(f"grid has {len(g)} levels but triplets have {levels}")
    return g


def _stack_wins(triplets) -> np.ndarray:
    triplets = list(triplets)
    if not triplets:
        raise EmptyInput("no triplets")
    levels = {t.levels for t in triplets}
    if len(levels) != 1:
        raise InvalidGrid(f"triplets disagree on level count: {sorted(levels)}")
    return np.stack([t.context_wins() for t in triplets])


@dataclass(frozen=True)
class CpiCurve:
    sigmas: list[float]
    cpi: list[float]
    delta_cpi: float
    sigma_star: float | None

    @property
    def crossing_defined(self) -> bool:
        return self.sigma_star is not None


def crossing_level(levels, values, level: float = 0.5) -> float | None:
    """First point where ``values`` reaches ``level``, linearly interpolated."""
    x = np.asarray(levels, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64) - level
    if y[0] == 0:
        return float(x[0])
    for j in range(len(y) - 1):
        if y[j + 1] == 0:
            return float(x[j + 1])
        if y[j] * y[j + 1] < 0:
            return float(x[j] + (x[j + 1] - x[j]) * (-y[j]) / (y[j + 1] - y[j]))
    return None


def cpi_curve(triplets, sigmas=CPI_SIGMAS) -> CpiCurve:
    wins = _stack_wins(triplets)
    g = _check_grid(sigmas, wins.shape[1], unit=False)
    cpi = wins.mean(axis=0)
    return CpiCurve(
        sigmas=g.tolist(),
        cpi=cpi.tolist(),
        delta_cpi=float(cpi[-1] - cpi[0]),
        sigma_star=crossing_level(g, cpi),
    )


@dataclass(frozen=True)
class BStarResult:
    per_triplet: list[float]
    median: float
    censored_low: int
    censored_high: int
    monotone_fraction: float
    grid: list[float] = field(default_factory=list)


def b_star(triplets, grid) -> BStarResult:
    """Smallest revealed fraction at which context overtakes identity.

    A triplet whose context already wins at the first grid point is censored
    to 0; one where context never wins is censored to 1.
    """
    triplets = list(triplets)
    wins = _stack_wins(triplets)
    g = _check_grid(grid, wins.shape[1], unit=True)
    values = []
    low = high = 0
    for row in wins:
        if row[0]:
            values.append(0.0)
            low += 1
        elif not row.any():
            values.append(1.0)
            high += 1
        else:
            values.append(float(g[np.argmax(row)]))
    monotone = [bool(np.all(np.diff(t.ctx_similarity()) >= 0)) for t in triplets]
    return BStarResult(
        per_triplet=values,
        median=float(np.median(values)),
        censored_low=low,
        censored_high=high,
        monotone_fraction=float(np.mean(monotone)),
        grid=g.tolist(),
    )


# -- geometry -------------------------------------------------------------


@dataclass(frozen=True)
class CropPlan:
    window: tuple[float, float, float, float]  # x1, y1, x2, y2; may extend past the image
    scale: float
    pad_ratio: float
    achieved_fcr: float
    target_fcr: float
    rejected: bool
    reason: str | None = None


def fcr_crop(bbox, image_dims, target_fcr: float = FCR_TARGET) -> CropPlan:
    """Square crop centred on the face so the face covers ``target_fcr`` of it.

    ``bbox`` is (x1, y1, x2, y2) and ``image_dims`` is (width, height).
    """
    if not 0 < target_fcr < 1:
        raise ValueError("target_fcr must lie in (0, 1)")
    x1, y1, x2, y2 = map(float, bbox)
    width, height = map(int, image_dims)
    area = (x2 - x1) * (y2 - y1)
    if not (x2 > x1 and y2 > y1) or not math.isfinite(area):
        raise DegenerateBox(f"face box {bbox} has no area")
    if x2 <= 0 or y2 <= 0 or x1 >= width or y1 >= height:
        raise DegenerateBox(f"face box {bbox} does not overlap a {width}x{height} image")
    s = math.sqrt(area / target_fcr)
    cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
    window = (cx - s / 2, cy - s / 2, cx + s / 2, cy + s / 2)
    pads = (
        max(0.0, -window[0]),
        max(0.0, -window[1]),
        max(0.0, window[2] - width),
        max(0.0, window[3] - height),
    )
    pad_ratio = sum(pads) / (4 * s)
    # face pixels that are real image content inside the window
    fx = max(0.0, min(x2, window[2], width) - max(x1, window[0], 0.0))
    fy = max(0.0, min(y2, window[3], height) - max(y1, window[1], 0.0))
    achieved = fx * fy / (s * s)
    reason = None
    if pad_ratio > MAX_PAD_RATIO:
        reason = f"pad ratio {pad_ratio:.3f} > {MAX_PAD_RATIO}"
    elif abs(achieved - target_fcr) > FCR_TOLERANCE * target_fcr:
        reason = f"achieved FCR {achieved:.4f} misses target {target_fcr}"
    return CropPlan(window, s, pad_ratio, achieved, target_fcr, reason is not None, reason)


@dataclass(frozen=True, eq=False)
class Annulus:
    mask: np.ndarray
    width: float
    area_ratio: float


def equal_area_annulus(mask, tolerance: float = AREA_TOLERANCE) -> Annulus:
    """Ring around ``mask`` whose area matches the mask area within ``tolerance``.

    dilate(M, w) keeps every pixel within Euclidean distance w of M, so the
    ring on a disk of radius r has width close to r(sqrt(2) - 1). Integer
    widths are tried first by binary search. If none lands inside the
    tolerance, the ring takes exactly as many nearest outside pixels as the
    face has, ties in distance broken in raster order, and w is the
    fractional distance reached.
    """
    m = np.asarray(mask).astype(bool)
    face = int(m.sum())
    if face == 0:
        raise EmptyInput("mask is empty")
    outside = ~m
    if not outside.any():
        raise Unreachable("mask covers the whole image", max_ratio=0.0)
    dist = ndimage.distance_transform_edt(outside)
    ring_dist = np.sort(dist[outside])
    max_ratio = len(ring_dist) / face
    if max_ratio < 1 - tolerance:
        raise Unreachable(f"at most {max_ratio:.3f} of the face area fits outside the mask", max_ratio=max_ratio)

    def area(w: float) -> int:
        return int(np.searchsorted(ring_dist, w, side="right"))

    lo, hi = 1, max(1, int(math.ceil(ring_dist[-1])))
    while lo < hi:  # smallest integer w with area(w) >= face
        mid = (lo + hi) // 2
        if area(mid) >= face:
            hi = mid
        else:
            lo = mid + 1
    w = min((c for c in (lo - 1, lo) if c >= 1), key=lambda c: abs(area(c) - face))
    if abs(area(w) - face) <= tolerance * face:
        ring = outside & (dist <= w)
    else:
        flat = np.where(outside.ravel(), dist.ravel(), np.inf)
        take = np.argsort(flat, kind="stable")[: min(face, len(ring_dist))]
        ring = np.zeros(m.size, dtype=bool)
        ring[take] = True
        ring = ring.reshape(m.shape)
        w = float(flat[take[-1]])
    return Annulus(mask=ring, width=float(w), area_ratio=float(ring.sum()) / face)


def disk_mask(shape, center, radius: float) -> np.ndarray:
    yy, xx = np.indices(shape)
    return (xx - center[0]) ** 2 + (yy - center[1]) ** 2 <= radius**2


def read_mask(path) -> np.ndarray:
    """Binary mask from an 8-bit PGM; nonzero pixels are foreground."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 0


def write_mask(path, mask) -> Path:
    path = Path(path)
    Image.fromarray(np.asarray(mask).astype(np.uint8) * 255).save(path, format="PPM")
    return path
