"""Synthetic cohorts with known labels, transforms, and slopes.

Each bundle is a tube: a fixed template of fibers built once per bundle by
offsetting a centerline with low-order random polynomial displacements, so
the template is smooth and identical across subjects.  Per subject, the
generator draws demographics, adds age-dependent FA with noise, and applies
a recorded rigid or similarity perturbation.  Everything derives from the
cohort seed, which makes generated cohorts usable as exact oracles.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .registration import rotation_matrix
from .taxonomy import is_valid_tract_name
from .tractogram import (
    AffineTransform,
    FA_CHANNEL,
    Group,
    Sex,
    Streamline,
    SubjectMeta,
    Tractogram,
    resample,
)

logger = logging.getLogger(__name__)

TRUTH_FORMAT = "tractogram-truth"
TRUTH_VERSION = 1


@dataclass(frozen=True)
class BundleSpec:
    """One synthetic tract: centerline control points plus an FA model."""

    centerline: np.ndarray
    radius: float
    fiber_count: int
    label: str
    fa_profile: tuple[float, float, float]   # intercept, slope per week, noise sd

    def __post_init__(self):
        pts = np.asarray(self.centerline, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 3:
            raise ValueError("centerline must be (n >= 2, 3) control points")
        object.__setattr__(self, "centerline", pts)
        if not self.radius > 0:
            raise ValueError("bundle radius must be positive")
        if self.fiber_count < 1:
            raise ValueError("bundle needs at least one fiber")
        if not is_valid_tract_name(self.label):
            raise ValueError(f"bundle label {self.label!r} is not a taxonomy tract")
        if self.fa_profile[2] < 0:
            raise ValueError("FA noise sd cannot be negative")


@dataclass(frozen=True)
class PerturbationSpec:
    """Subject-level misalignment magnitudes (uniform draws in ±bound)."""

    translation_mm: float = 10.0
    rotation_deg: float = 10.0
    log_scale: float = 0.0

    def __post_init__(self):
        if min(self.translation_mm, self.rotation_deg, self.log_scale) < 0:
            raise ValueError("perturbation magnitudes cannot be negative")


@dataclass(frozen=True)
class CohortSpec:
    bundles: tuple[BundleSpec, ...]
    subjects: int
    age_range: tuple[float, float] = (30.0, 45.0)
    group: Group = Group.NEONATE
    sex_assignment: str = "alternating"          # or "random"
    slope_by_sex: dict[Sex, float] | None = None
    perturbation: PerturbationSpec = PerturbationSpec()
    min_points: int = 12
    max_points: int = 40
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "bundles", tuple(self.bundles))
        if not self.bundles:
            raise ValueError("cohort needs at least one bundle")
        if self.subjects < 2:
            raise ValueError("cohort needs at least 2 subjects")
        lo, hi = self.age_range
        if not hi > lo > 0:
            raise ValueError(f"age range must have positive width, got {self.age_range}")
        if self.sex_assignment not in ("alternating", "random"):
            raise ValueError(f"unknown sex assignment {self.sex_assignment!r}")
        if not 2 <= self.min_points <= self.max_points:
            raise ValueError("need 2 <= min_points <= max_points")
        for b in self.bundles:
            slopes = {b.fa_profile[1]}
            if self.slope_by_sex:
                slopes.update(self.slope_by_sex.values())
            for slope in slopes:
                for age in self.age_range:
                    clean = b.fa_profile[0] + slope * age
                    if not 0.0 <= clean <= 1.0:
                        raise ValueError(
                            f"bundle {b.label}: FA profile leaves [0,1] at age {age}"
                        )


@dataclass(frozen=True)
class SubjectGroundTruth:
    """What the generator knows: per-fiber labels, the applied transform,
    and the FA slope per bundle."""

    subject_id: str
    fiber_labels: tuple[str, ...]
    transform: AffineTransform
    fa_slopes: dict[str, float]


def _polyline_at_fractions(control: np.ndarray, fractions: np.ndarray) -> np.ndarray:
    """Points at given arclength fractions along a control polyline."""
    deltas = np.sqrt(((np.diff(control, axis=0)) ** 2).sum(axis=1))
    s = np.concatenate([[0.0], np.cumsum(deltas)])
    total = s[-1]
    if total <= 0:
        raise ValueError("centerline has zero length")
    target = fractions * total
    return np.stack([np.interp(target, s, control[:, k]) for k in range(3)], axis=1)


def _bundle_template(
    bundle: BundleSpec, bundle_index: int, spec: CohortSpec
) -> list[np.ndarray]:
    """The bundle's fixed fiber geometry, shared by every subject."""
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=spec.seed, spawn_key=(1000, bundle_index))
    )
    fibers = []
    for _ in range(bundle.fiber_count):
        n_pts = int(rng.integers(spec.min_points, spec.max_points + 1))
        t = np.linspace(0.0, 1.0, n_pts)
        base = _polyline_at_fractions(bundle.centerline, t)
        # displacement = sum_k c_k t^k with small random coefficients; the
        # constant term spreads fibers across the tube cross-section
        coeffs = rng.normal(0.0, bundle.radius / 2.0, size=(3, 3))
        offsets = np.polynomial.polynomial.polyval(t, coeffs.T).T
        reach = np.sqrt((offsets ** 2).sum(axis=1)).max()
        if reach > bundle.radius:
            offsets *= bundle.radius / reach
        points = base + offsets
        if rng.random() < 0.5:
            points = points[::-1].copy()
        fibers.append(points)
    return fibers


def _cohort_templates(spec: CohortSpec) -> list[list[np.ndarray]]:
    return [_bundle_template(b, i, spec) for i, b in enumerate(spec.bundles)]


def _bundle_slope(spec: CohortSpec, bundle: BundleSpec, sex: Sex) -> float:
    if spec.slope_by_sex is not None and sex in spec.slope_by_sex:
        return spec.slope_by_sex[sex]
    return bundle.fa_profile[1]


def generate_subject(
    spec: CohortSpec, index: int, _templates=None
) -> tuple[Tractogram, SubjectGroundTruth]:
    """One subject plus its ground truth; draw order is fixed, so the
    result is identical whether generated alone or within the cohort."""
    if not 0 <= index < spec.subjects:
        raise ValueError(f"subject index {index} outside cohort of {spec.subjects}")
    templates = _templates if _templates is not None else _cohort_templates(spec)
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=spec.seed, spawn_key=(index,))
    )

    lo, hi = spec.age_range
    age = float(rng.uniform(lo, hi))
    if spec.sex_assignment == "alternating":
        sex = Sex.FEMALE if index % 2 == 0 else Sex.MALE
    else:
        sex = Sex.FEMALE if rng.random() < 0.5 else Sex.MALE
    birth_age = float(age - rng.uniform(0.0, 2.0)) if spec.group is Group.NEONATE else None
    covariates = {
        "birth_weight": float(rng.normal(2.5, 0.3)),
        "head_circumference": float(rng.normal(30.0 + 0.4 * (age - lo), 1.0)),
    }

    streamlines = []
    labels = []
    slopes = {}
    for bundle, template in zip(spec.bundles, templates):
        slope = _bundle_slope(spec, bundle, sex)
        slopes[bundle.label] = slope
        intercept, _, noise_sd = bundle.fa_profile
        clean = intercept + slope * age
        for points in template:
            fa = clean + rng.normal(0.0, noise_sd, size=points.shape[0])
            fa = np.clip(fa, 0.0, 1.0)
            streamlines.append(Streamline(points=points, scalars={FA_CHANNEL: fa}))
            labels.append(bundle.label)

    pert = spec.perturbation
    angles = np.deg2rad(rng.uniform(-1.0, 1.0, size=3) * pert.rotation_deg)
    shift = rng.uniform(-1.0, 1.0, size=3) * pert.translation_mm
    log_s = float(rng.uniform(-1.0, 1.0) * pert.log_scale)
    transform = _perturbation_transform(streamlines, angles, shift, log_s)
    streamlines = [
        Streamline(points=transform.apply(s.points), scalars=dict(s.scalars))
        for s in streamlines
    ]

    subject_id = f"sub-{index:03d}"
    meta = SubjectMeta(
        age_at_scan=age, sex=sex, group=spec.group,
        birth_age=birth_age, covariates=covariates,
    )
    tractogram = Tractogram(subject_id, tuple(streamlines), meta)
    truth = SubjectGroundTruth(
        subject_id=subject_id,
        fiber_labels=tuple(labels),
        transform=transform,
        fa_slopes=slopes,
    )
    return tractogram, truth


def _perturbation_transform(streamlines, angles, shift, log_s) -> AffineTransform:
    """Similarity motion about the subject's untransformed centroid."""
    total = np.zeros(3)
    count = 0
    for s in streamlines:
        total += s.points.sum(axis=0)
        count += s.n_points
    center = total / count
    linear = rotation_matrix(*angles) * np.exp(log_s)
    return AffineTransform(linear, center - linear @ center + shift)


def generate_cohort(spec: CohortSpec) -> list[tuple[Tractogram, SubjectGroundTruth]]:
    """All subjects, bit-reproducible under the cohort seed."""
    templates = _cohort_templates(spec)
    return [
        generate_subject(spec, i, _templates=templates) for i in range(spec.subjects)
    ]


def save_ground_truth(truth: SubjectGroundTruth, path: str | Path) -> None:
    doc = {
        "format": TRUTH_FORMAT,
        "version": TRUTH_VERSION,
        "subject_id": truth.subject_id,
        "fiber_labels": list(truth.fiber_labels),
        "transform": truth.transform.to_matrix34(),
        "fa_slopes": truth.fa_slopes,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_ground_truth(path: str | Path) -> SubjectGroundTruth:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != TRUTH_FORMAT:
        raise ValueError(f"{path}: not a ground-truth sidecar")
    if doc.get("version") != TRUTH_VERSION:
        raise ValueError(f"{path}: unsupported ground-truth version {doc.get('version')}")
    return SubjectGroundTruth(
        subject_id=doc["subject_id"],
        fiber_labels=tuple(doc["fiber_labels"]),
        transform=AffineTransform.from_matrix34(np.array(doc["transform"])),
        fa_slopes={k: float(v) for k, v in doc["fa_slopes"].items()},
    )


# corners sit far enough apart that at registration bandwidths (~15 mm)
# wrong-bundle pairs are fully saturated in the log-kernel and contribute
# no gradient, leaving alignment driven by matched bundles only
_DESK_BUNDLES = (
    # label, center, direction, bow axis
    ("AF_left", (-70.0, -70.0, -70.0), (1.0, 0.3, 0.0), (0.0, 0.0, 1.0)),
    ("AF_right", (70.0, -70.0, -70.0), (1.0, -0.3, 0.0), (0.0, 0.0, 1.0)),
    ("CST_left", (-70.0, 70.0, -70.0), (0.0, 0.2, 1.0), (1.0, 0.0, 0.0)),
    ("CST_right", (70.0, 70.0, -70.0), (0.0, -0.2, 1.0), (1.0, 0.0, 0.0)),
    ("CC3", (-70.0, -70.0, 70.0), (0.0, 1.0, 0.2), (1.0, 0.0, 0.0)),
    ("MCP", (70.0, -70.0, 70.0), (1.0, 0.0, 0.4), (0.0, 1.0, 0.0)),
    ("ILF_left", (-70.0, 70.0, 70.0), (0.3, 1.0, 0.0), (0.0, 0.0, 1.0)),
    ("ILF_right", (70.0, 70.0, 70.0), (-0.3, 1.0, 0.0), (0.0, 0.0, 1.0)),
)


def _arc_centerline(center, direction, bow_axis, length=50.0, bow=10.0, n=25):
    """Quadratic Bezier arc sampled densely enough to act as a polyline."""
    center = np.asarray(center, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    b = np.asarray(bow_axis, dtype=np.float64)
    b = b / np.linalg.norm(b)
    p0 = center - 0.5 * length * d
    p2 = center + 0.5 * length * d
    p1 = center + bow * b
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) ** 2 * p0 + 2 * t * (1 - t) * p1 + t ** 2 * p2


def default_desk_bundles(
    fiber_count: int = 100,
    fa_slope: float = 0.012,
    fa_noise: float = 0.02,
) -> tuple[BundleSpec, ...]:
    """Eight well-separated tube bundles named from the taxonomy."""
    bundles = []
    for i, (label, center, direction, bow_axis) in enumerate(_DESK_BUNDLES):
        intercept = 0.30 + 0.015 * i
        bundles.append(
            BundleSpec(
                centerline=_arc_centerline(center, direction, bow_axis),
                radius=3.0,
                fiber_count=fiber_count,
                label=label,
                fa_profile=(intercept, fa_slope, fa_noise),
            )
        )
    return tuple(bundles)


def default_desk_cohort(
    subjects: int = 20,
    fiber_count: int = 100,
    seed: int = 0,
    perturbation: PerturbationSpec = PerturbationSpec(),
) -> CohortSpec:
    """The desk-scale benchmark cohort: 8 bundles x ``fiber_count`` fibers."""
    return CohortSpec(
        bundles=default_desk_bundles(fiber_count=fiber_count),
        subjects=subjects,
        perturbation=perturbation,
        seed=seed,
    )
