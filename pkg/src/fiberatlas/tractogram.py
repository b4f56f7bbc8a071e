"""Core streamline and tractogram data types plus geometric primitives.

Streamlines are ordered 3D polylines in millimetres with optional per-point
scalar channels (e.g. FA, MD).  All types are immutable after construction;
operations are pure functions, and any randomness is taken as an explicit
seed so parallel callers stay deterministic.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_POINTS_PER_FIBER = 15

FA_CHANNEL = "FA"
MD_CHANNEL = "MD"


class ZeroLengthStreamlineError(ValueError):
    """Raised when a streamline has no spatial extent."""


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(a, dtype=np.float64)
    out.setflags(write=False)
    return out


class Sex(enum.Enum):
    FEMALE = "female"
    MALE = "male"
    UNKNOWN = "unknown"


class Group(enum.Enum):
    NEONATE = "neonate"
    ADULT = "adult"


@dataclass(frozen=True)
class SubjectMeta:
    """Demographics attached to a tractogram.

    ``age_at_scan`` is in weeks PMA for neonates and years for adults;
    ``birth_age`` (when known) is in weeks PMA.  ``covariates`` holds named
    real-valued quantities such as birth weight or head circumference.
    """

    age_at_scan: float
    sex: Sex = Sex.UNKNOWN
    group: Group = Group.ADULT
    birth_age: float | None = None
    covariates: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.age_at_scan > 0:
            raise ValueError(f"age_at_scan must be positive, got {self.age_at_scan}")
        if self.birth_age is not None and not self.birth_age > 0:
            raise ValueError(f"birth_age must be positive, got {self.birth_age}")


@dataclass(frozen=True)
class Streamline:
    """One fiber: an (n, 3) polyline with optional per-point scalar channels."""

    points: np.ndarray
    scalars: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (n, 3), got shape {pts.shape}")
        if pts.shape[0] < 2:
            raise ValueError("streamline needs at least 2 points")
        if not np.all(np.isfinite(pts)):
            raise ValueError("streamline coordinates must be finite")
        object.__setattr__(self, "points", _readonly(pts))
        clean = {}
        for name, vals in self.scalars.items():
            v = np.asarray(vals, dtype=np.float64)
            if v.shape != (pts.shape[0],):
                raise ValueError(
                    f"scalar channel {name!r} has {v.shape} values for "
                    f"{pts.shape[0]} points"
                )
            if name == FA_CHANNEL and (np.any(v < 0) or np.any(v > 1)):
                raise ValueError("FA values must lie in [0, 1]")
            clean[name] = _readonly(v)
        object.__setattr__(self, "scalars", clean)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def arclength(self) -> float:
        """Total piecewise-linear length in mm."""
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())

    def reversed(self) -> Streamline:
        """Same fiber traversed in the opposite direction."""
        return Streamline(
            points=self.points[::-1].copy(),
            scalars={k: v[::-1].copy() for k, v in self.scalars.items()},
        )


@dataclass(frozen=True)
class Tractogram:
    """A subject's streamline set plus demographic metadata."""

    subject_id: str
    streamlines: tuple[Streamline, ...]
    meta: SubjectMeta

    def __post_init__(self):
        if not self.subject_id:
            raise ValueError("subject_id must be nonempty")
        object.__setattr__(self, "streamlines", tuple(self.streamlines))
        if len(self.streamlines) < 1:
            raise ValueError("tractogram needs at least one streamline")

    def __len__(self) -> int:
        return len(self.streamlines)

    def centroid(self) -> np.ndarray:
        """Mean of all points over all streamlines."""
        total = np.zeros(3)
        count = 0
        for s in self.streamlines:
            total += s.points.sum(axis=0)
            count += s.n_points
        return total / count


@dataclass(frozen=True)
class AffineTransform:
    """Affine map p -> linear @ p + translation, in millimetres."""

    linear: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        lin = np.asarray(self.linear, dtype=np.float64)
        tra = np.asarray(self.translation, dtype=np.float64)
        if lin.shape != (3, 3):
            raise ValueError(f"linear part must be 3x3, got {lin.shape}")
        if tra.shape != (3,):
            raise ValueError(f"translation must be a 3-vector, got {tra.shape}")
        if abs(np.linalg.det(lin)) <= 1e-9:
            raise ValueError("singular linear part (|det| <= 1e-9)")
        object.__setattr__(self, "linear", _readonly(lin))
        object.__setattr__(self, "translation", _readonly(tra))

    @staticmethod
    def identity() -> AffineTransform:
        return AffineTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def uniform_scaling(s: float, center: np.ndarray | None = None) -> AffineTransform:
        """Scale by s about ``center`` (the origin when omitted)."""
        c = np.zeros(3) if center is None else np.asarray(center, dtype=np.float64)
        return AffineTransform(np.eye(3) * s, c - s * c)

    @staticmethod
    def translation_by(t: np.ndarray) -> AffineTransform:
        return AffineTransform(np.eye(3), np.asarray(t, dtype=np.float64))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (..., 3) array of points."""
        return np.asarray(points) @ self.linear.T + self.translation

    def compose(self, other: AffineTransform) -> AffineTransform:
        """self after other: (self ∘ other)(p) = self(other(p))."""
        return AffineTransform(
            self.linear @ other.linear,
            self.linear @ other.translation + self.translation,
        )

    def inverse(self) -> AffineTransform:
        inv = np.linalg.inv(self.linear)
        return AffineTransform(inv, -inv @ self.translation)

    def scale(self) -> float:
        """Isotropic scale factor |det|^(1/3)."""
        return float(abs(np.linalg.det(self.linear)) ** (1.0 / 3.0))

    def to_matrix34(self) -> list[list[float]]:
        """Row-major 3x4 [linear | translation] for JSON serialization."""
        m = np.hstack([self.linear, self.translation[:, None]])
        return m.tolist()

    @staticmethod
    def from_matrix34(rows) -> AffineTransform:
        m = np.asarray(rows, dtype=np.float64)
        if m.shape != (3, 4):
            raise ValueError(f"expected 3x4 matrix, got {m.shape}")
        return AffineTransform(m[:, :3], m[:, 3])


def resample(fiber: Streamline | np.ndarray, n_points: int = DEFAULT_POINTS_PER_FIBER) -> np.ndarray:
    """Resample a fiber to ``n_points`` points at equal arclength intervals.

    Parameterisation is piecewise-linear over the raw polyline; the endpoints
    of the result coincide with the source endpoints.  Returns an (n_points, 3)
    float64 array.
    """
    pts = fiber.points if isinstance(fiber, Streamline) else np.asarray(fiber, dtype=np.float64)
    if pts.shape[0] < 2:
        raise ValueError("fiber needs at least 2 points")
    if n_points < 2:
        raise ValueError("n_points must be >= 2")
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total == 0.0:
        raise ZeroLengthStreamlineError("zero-length streamline")
    targets = np.linspace(0.0, total, n_points)
    out = np.empty((n_points, 3))
    for d in range(3):
        out[:, d] = np.interp(targets, cum, pts[:, d])
    # linspace endpoints are exact, but pin them to kill interpolation roundoff
    out[0] = pts[0]
    out[-1] = pts[-1]
    return out


def resample_all(streamlines, n_points: int = DEFAULT_POINTS_PER_FIBER) -> np.ndarray:
    """Resample a sequence of fibers into one (n, n_points, 3) array."""
    return np.stack([resample(s, n_points) for s in streamlines])


def subsample_indices(count: int, n: int, seed) -> np.ndarray:
    """Uniform random choice of n distinct fiber indices out of ``count``."""
    if n < 1:
        raise ValueError("cannot subsample to an empty tractogram")
    if n > count:
        raise ValueError(f"cannot draw {n} fibers from {count}")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(count, size=n, replace=False))


def subsample(tractogram: Tractogram, n: int, seed) -> Tractogram:
    """Keep a uniform random subset of exactly n streamlines (deterministic per seed)."""
    idx = subsample_indices(len(tractogram), n, seed)
    return replace(tractogram, streamlines=tuple(tractogram.streamlines[i] for i in idx))


def apply_transform(tractogram: Tractogram, t: AffineTransform) -> Tractogram:
    """Map every point through t; scalar channels are untouched."""
    moved = tuple(
        Streamline(points=t.apply(s.points), scalars=dict(s.scalars))
        for s in tractogram.streamlines
    )
    return replace(tractogram, streamlines=moved)


def clean_streamlines(raw_fibers) -> tuple[list[Streamline], int]:
    """Drop degenerate fibers (< 2 points or zero length) at ingestion.

    Returns the kept streamlines and the rejected count; callers log the
    count per file rather than failing.
    """
    kept: list[Streamline] = []
    rejected = 0
    for f in raw_fibers:
        pts = f.points if isinstance(f, Streamline) else np.asarray(f, dtype=np.float64)
        if pts.shape[0] < 2 or np.linalg.norm(np.diff(pts, axis=0), axis=1).sum() == 0.0:
            rejected += 1
            continue
        kept.append(f if isinstance(f, Streamline) else Streamline(points=pts))
    if rejected:
        logger.warning("rejected %d degenerate streamline(s) at ingestion", rejected)
    return kept, rejected
