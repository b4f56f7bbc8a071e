"""Atlas-driven subject parcellation and tract identification rates.

Parcellating a subject registers it into atlas space, embeds every fiber
with the atlas's spectral model, assigns each to its nearest cluster, and
groups fibers by the clusters' anatomical labels.  Fibers landing in
unlabeled clusters are retained in the cluster assignment but excluded
from tracts.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .atlas import Atlas
from .embedding import assign_fibers, embed_fibers
from .fileio import write_tck
from .registration import RegistrationConfig, register_to_atlas
from .tractogram import AffineTransform, Tractogram, resample_all

logger = logging.getLogger(__name__)

DEFAULT_IDENTIFICATION_THRESHOLD = 10


@dataclass(frozen=True)
class ParcellationConfig:
    registration: RegistrationConfig | None = field(
        default_factory=RegistrationConfig
    )
    outlier_rejection: bool = False
    outlier_sigma: float = 2.0


@dataclass(frozen=True)
class Parcellation:
    """Per-fiber cluster assignment grouped into anatomical tracts."""

    subject_id: str
    cluster_indices: np.ndarray
    tract_fibers: dict[str, tuple[int, ...]]
    transform_used: AffineTransform

    def __post_init__(self):
        idx = np.array(self.cluster_indices, dtype=np.int64)
        idx.flags.writeable = False
        object.__setattr__(self, "cluster_indices", idx)
        seen: set[int] = set()
        for tract, fibers in self.tract_fibers.items():
            overlap = seen.intersection(fibers)
            if overlap:
                raise ValueError(f"fiber {min(overlap)} appears in multiple tracts")
            seen.update(fibers)

    @property
    def n_fibers(self) -> int:
        return int(self.cluster_indices.shape[0])

    def tract_counts(self) -> dict[str, int]:
        return {t: len(f) for t, f in self.tract_fibers.items()}

    @property
    def unlabeled_count(self) -> int:
        return self.n_fibers - sum(len(f) for f in self.tract_fibers.values())


@dataclass(frozen=True)
class IdentificationResult:
    """Which tracts met the minimum streamline count for one subject."""

    subject_id: str
    identified: dict[str, bool]
    threshold: int

    def __post_init__(self):
        if self.threshold < 1:
            raise ValueError("identification threshold must be >= 1")


def parcellate(
    subject: Tractogram,
    atlas: Atlas,
    cfg: ParcellationConfig = ParcellationConfig(),
) -> Parcellation:
    """Assign every subject fiber to an atlas cluster and group by tract.

    The atlas must carry at least one anatomical label.  Registration into
    atlas space is skipped when ``cfg.registration`` is None (subject
    already in atlas coordinates).
    """
    if not atlas.has_labels:
        raise ValueError("cannot parcellate with an unlabeled atlas")
    if cfg.registration is None:
        transform = AffineTransform.identity()
    else:
        transform = register_to_atlas(
            subject, atlas.nystrom.sample_fibers, cfg.registration
        )
    fibers = resample_all(subject.streamlines, atlas.points_per_fiber)
    fibers = transform.apply(fibers)
    embeddings = embed_fibers(fibers, atlas.nystrom)
    assignments = assign_fibers(embeddings, atlas.clusters)

    kept = np.ones(len(assignments), dtype=bool)
    if cfg.outlier_rejection:
        kept = _inlier_mask(embeddings, assignments, atlas, cfg.outlier_sigma)
        dropped = int((~kept).sum())
        if dropped:
            logger.info(
                "subject %s: %d fibers rejected as embedding outliers",
                subject.subject_id, dropped,
            )

    tract_fibers: dict[str, list[int]] = {
        name: [] for name in atlas.tract_names
    }
    for i, k in enumerate(assignments):
        label = atlas.labels[int(k)]
        if not label.is_unlabeled and kept[i]:
            tract_fibers[label.tract_name].append(i)
    return Parcellation(
        subject_id=subject.subject_id,
        cluster_indices=assignments,
        tract_fibers={t: tuple(f) for t, f in tract_fibers.items()},
        transform_used=transform,
    )


def _inlier_mask(embeddings, assignments, atlas, n_sigma):
    """Keep fibers within mean + n_sigma·std of their cluster's training spread."""
    train = np.asarray(atlas.provenance.get("training_cluster_assignments", []))
    mask = np.ones(len(assignments), dtype=bool)
    if train.size == 0:
        return mask
    d = np.sqrt(
        ((embeddings - atlas.clusters.centroids[assignments]) ** 2).sum(axis=1)
    )
    for k in range(atlas.n_clusters):
        sel = assignments == k
        if not np.any(sel):
            continue
        dk = d[sel]
        cutoff = dk.mean() + n_sigma * dk.std()
        keep = dk <= cutoff
        mask[np.nonzero(sel)[0][~keep]] = False
    return mask


def identify(
    parc: Parcellation, threshold: int = DEFAULT_IDENTIFICATION_THRESHOLD
) -> IdentificationResult:
    """A tract is identified when it holds at least ``threshold`` fibers."""
    counts = parc.tract_counts()
    return IdentificationResult(
        subject_id=parc.subject_id,
        identified={t: c >= threshold for t, c in counts.items()},
        threshold=threshold,
    )


def identification_rate(results: list[IdentificationResult], tract: str) -> float:
    """Percentage of subjects in which ``tract`` was identified."""
    if not results:
        raise ValueError("identification rate needs a nonempty cohort")
    hits = sum(1 for r in results if r.identified.get(tract, False))
    return 100.0 * hits / len(results)


def identification_rate_table(results: list[IdentificationResult]) -> dict[str, float]:
    """Per-tract identification rates over every tract seen in the cohort."""
    if not results:
        raise ValueError("identification rate needs a nonempty cohort")
    tracts = sorted({t for r in results for t in r.identified})
    return {t: identification_rate(results, t) for t in tracts}


def mean_identification_rate(results: list[IdentificationResult]) -> float:
    """Cohort mean of per-tract identification rates."""
    table = identification_rate_table(results)
    if not table:
        raise ValueError("no tracts present in identification results")
    return float(np.mean(list(table.values())))


PARCELLATION_FORMAT = "parcellation-index"
PARCELLATION_VERSION = 1


def save_parcellation(parc: Parcellation, path) -> None:
    """JSON index: per-fiber cluster assignment plus tract fiber lists."""
    doc = {
        "format": PARCELLATION_FORMAT,
        "version": PARCELLATION_VERSION,
        "subject_id": parc.subject_id,
        "cluster_indices": parc.cluster_indices.tolist(),
        "tracts": {t: list(f) for t, f in sorted(parc.tract_fibers.items())},
        "transform": parc.transform_used.to_matrix34(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_parcellation(path) -> Parcellation:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != PARCELLATION_FORMAT:
        raise ValueError(f"{path}: not a parcellation index")
    if doc.get("version") != PARCELLATION_VERSION:
        raise ValueError(f"{path}: unsupported parcellation version {doc.get('version')}")
    return Parcellation(
        subject_id=doc["subject_id"],
        cluster_indices=np.array(doc["cluster_indices"], dtype=np.int64),
        tract_fibers={t: tuple(f) for t, f in doc["tracts"].items()},
        transform_used=AffineTransform.from_matrix34(np.array(doc["transform"])),
    )


def write_ir_csv(results: list[IdentificationResult], path) -> None:
    """Per-tract identification rates as CSV (tract, rate, threshold)."""
    thresholds = {r.threshold for r in results}
    if len(thresholds) != 1:
        raise ValueError("identification results mix thresholds")
    threshold = thresholds.pop()
    table = identification_rate_table(results)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tract", "identification_rate", "threshold"])
        for tract, rate in table.items():
            writer.writerow([tract, repr(rate), threshold])


def read_ir_csv(path) -> dict[str, float]:
    """Tract -> identification rate, from a CSV written by write_ir_csv."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return {rec["tract"]: float(rec["identification_rate"]) for rec in reader}


def export_tract_tcks(parc: Parcellation, subject: Tractogram, out_dir) -> list:
    """One TCK per non-empty tract, in the subject's native space."""
    if parc.subject_id != subject.subject_id:
        raise ValueError("parcellation and tractogram belong to different subjects")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for tract, fiber_idx in sorted(parc.tract_fibers.items()):
        if not fiber_idx:
            continue
        path = out_dir / f"{tract}.tck"
        write_tck(path, [subject.streamlines[i] for i in fiber_idx])
        written.append(path)
    return written
