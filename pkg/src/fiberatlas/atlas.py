"""Fiber-cluster atlas construction, anatomical curation, and serialization.

An atlas bundles the spectral embedding model, the cluster model, one
anatomical label per cluster, and a small representative fiber sample per
cluster used for cluster correspondence.  Atlases are built unlabeled from
a cohort (subsample, groupwise registration, pooled embedding, clustering)
and gain labels either by transfer from a labeled reference atlas or by
direct assignment.

On disk an atlas is a bundle directory: a versioned, checksummed
``manifest.json`` plus a single ``arrays.bin`` of little-endian binary
arrays behind a magic prefix.  The format is deliberately inspectable and
language-neutral.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .embedding import ClusterModel, NystromModel, cluster, embed_fibers, fit_nystrom
from .metrics import DistanceVariant, FiberDistanceParams, pairwise_distance_matrix
from .registration import RegistrationConfig, register_group
from .taxonomy import UNLABELED, TractCategory, category_of
from .tractogram import (
    DEFAULT_POINTS_PER_FIBER,
    AffineTransform,
    Tractogram,
    apply_transform,
    resample_all,
    subsample_indices,
)

logger = logging.getLogger(__name__)

BUNDLE_FORMAT = "fiber-atlas-bundle"
BUNDLE_MAGIC = b"FBRATLAS"
FORMAT_MAJOR = 1
FORMAT_MINOR = 0


class AtlasBundleError(Exception):
    """Base for all atlas bundle I/O failures."""


class NotAnAtlasBundleError(AtlasBundleError):
    pass


class AtlasVersionError(AtlasBundleError):
    pass


class AtlasChecksumError(AtlasBundleError):
    pass


class AtlasTruncatedError(AtlasBundleError):
    pass


class AtlasBuildError(RuntimeError):
    """A build stage failed; carries the stage name for diagnosis."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"atlas build failed in stage {stage!r}: {cause}")
        self.stage = stage


@dataclass(frozen=True)
class AnatomicalLabel:
    """A taxonomy tract name paired with its anatomical category.

    The explicit unlabeled marker carries no category.
    """

    tract_name: str
    category: TractCategory | None

    def __post_init__(self):
        if self.tract_name == UNLABELED:
            if self.category is not None:
                raise ValueError("unlabeled marker must not carry a category")
        elif self.category is not category_of(self.tract_name):
            raise ValueError(
                f"category {self.category} inconsistent with tract "
                f"{self.tract_name!r}"
            )

    @classmethod
    def for_tract(cls, tract_name: str) -> AnatomicalLabel:
        if tract_name == UNLABELED:
            return cls.unlabeled()
        return cls(tract_name, category_of(tract_name))

    @classmethod
    def unlabeled(cls) -> AnatomicalLabel:
        return cls(UNLABELED, None)

    @property
    def is_unlabeled(self) -> bool:
        return self.tract_name == UNLABELED


@dataclass(frozen=True)
class Atlas:
    """Embedding + cluster models with per-cluster labels and representatives."""

    nystrom: NystromModel
    clusters: ClusterModel
    labels: tuple[AnatomicalLabel, ...]
    representative_fibers: tuple[np.ndarray, ...]
    provenance: dict

    def __post_init__(self):
        k = self.clusters.n_clusters
        if len(self.labels) != k:
            raise ValueError(f"{len(self.labels)} labels for {k} clusters")
        if len(self.representative_fibers) != k:
            raise ValueError("one representative fiber set per cluster required")
        if self.clusters.centroids.shape[1] != self.nystrom.n_dims:
            raise ValueError("cluster centroids do not match embedding dimension")
        p = self.nystrom.points_per_fiber
        for i, reps in enumerate(self.representative_fibers):
            if reps.ndim != 3 or reps.shape[1:] != (p, 3):
                raise ValueError(f"cluster {i} representatives are not (r, {p}, 3)")

    @property
    def n_clusters(self) -> int:
        return self.clusters.n_clusters

    @property
    def points_per_fiber(self) -> int:
        return self.nystrom.points_per_fiber

    @property
    def is_fully_labeled(self) -> bool:
        return all(not lab.is_unlabeled for lab in self.labels)

    @property
    def has_labels(self) -> bool:
        return any(not lab.is_unlabeled for lab in self.labels)

    @property
    def tract_names(self) -> tuple[str, ...]:
        return tuple(sorted({l.tract_name for l in self.labels if not l.is_unlabeled}))


@dataclass(frozen=True)
class AtlasBuildConfig:
    k: int
    embedding_dims: int = 10
    nystrom_sample_size: int = 200
    sigma: float = 30.0
    fibers_per_subject: int = 500
    points_per_fiber: int = DEFAULT_POINTS_PER_FIBER
    representatives_per_cluster: int = 10
    cluster_restarts: int = 8
    seed: int = 0
    registration: RegistrationConfig | None = RegistrationConfig()

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.representatives_per_cluster < 1:
            raise ValueError("need at least one representative per cluster")
        if self.cluster_restarts < 1:
            raise ValueError("need at least one clustering restart")


def build_atlas(tractograms: list[Tractogram], cfg: AtlasBuildConfig) -> Atlas:
    """Construct an unlabeled atlas from a cohort.

    Stages: per-subject subsampling, groupwise registration (skipped when
    ``cfg.registration`` is None for cohorts already in a common space),
    pooled resampling, Nystrom embedding, clustering.  Deterministic for a
    fixed config; stage failures are wrapped with the stage name.
    """
    if len(tractograms) < 2:
        raise ValueError("atlas construction needs at least 2 subjects")
    for tg in tractograms:
        if len(tg) < cfg.fibers_per_subject:
            raise ValueError(
                f"subject {tg.subject_id} has {len(tg)} fibers, "
                f"below the downsample target {cfg.fibers_per_subject}"
            )

    def stage(name, fn):
        try:
            return fn()
        except Exception as exc:
            raise AtlasBuildError(name, exc) from exc

    def do_subsample():
        picked = []
        picked_indices = []
        for s, tg in enumerate(tractograms):
            seed = np.random.SeedSequence(entropy=cfg.seed, spawn_key=(1, s))
            idx = subsample_indices(len(tg), cfg.fibers_per_subject, seed)
            fibers = tuple(tg.streamlines[i] for i in idx)
            picked.append(replace(tg, streamlines=fibers))
            picked_indices.append([int(i) for i in idx])
        return picked, picked_indices

    subsampled, sample_indices = stage("subsample", do_subsample)

    def do_register():
        if cfg.registration is None:
            return [AffineTransform.identity()] * len(subsampled), None, None
        result = register_group(subsampled, cfg.registration)
        return (
            list(result.transforms),
            [list(trace) for trace in result.objective_trace],
            result.converged,
        )

    transforms, objective_trace, reg_converged = stage("register", do_register)
    aligned = [apply_transform(tg, t) for tg, t in zip(subsampled, transforms)]

    def do_pool():
        blocks = [
            resample_all(tg.streamlines, cfg.points_per_fiber) for tg in aligned
        ]
        return np.concatenate(blocks, axis=0)

    pooled = stage("resample", do_pool)

    def do_embed():
        m = min(cfg.nystrom_sample_size, pooled.shape[0])
        model = fit_nystrom(
            pooled,
            m=m,
            n_dims=cfg.embedding_dims,
            sigma=cfg.sigma,
            seed=np.random.SeedSequence(entropy=cfg.seed, spawn_key=(2,)),
        )
        # same seed, same draw: recover which pooled rows the fit sampled
        picked = subsample_indices(
            pooled.shape[0], m, np.random.SeedSequence(entropy=cfg.seed, spawn_key=(2,))
        )
        return model, embed_fibers(pooled, model), [int(i) for i in picked]

    nystrom, embeddings, nystrom_indices = stage("embed", do_embed)

    def do_cluster():
        # a lone k-means++ init can merge well-separated tracts; restarts
        # keep the lowest-inertia solution and stay seed-deterministic
        return cluster(
            embeddings, cfg.k,
            seed=np.random.SeedSequence(entropy=cfg.seed, spawn_key=(3,)),
            n_restarts=cfg.cluster_restarts,
        )

    cluster_model, assignments = stage("cluster", do_cluster)

    reps, rep_indices = _pick_representatives(
        pooled, embeddings, assignments, cluster_model.centroids,
        cfg.representatives_per_cluster,
    )

    provenance = {
        "k": cfg.k,
        "embedding_dims": cfg.embedding_dims,
        "nystrom_sample_size": cfg.nystrom_sample_size,
        "sigma": cfg.sigma,
        "fibers_per_subject": cfg.fibers_per_subject,
        "points_per_fiber": cfg.points_per_fiber,
        "cluster_restarts": cfg.cluster_restarts,
        "seed": cfg.seed,
        "registration": _registration_provenance(cfg.registration),
        "subject_ids": [tg.subject_id for tg in tractograms],
        "subject_fiber_counts": [len(tg) for tg in tractograms],
        "subject_sample_indices": sample_indices,
        "subject_transforms": [t.to_matrix34() for t in transforms],
        "registration_objective_trace": objective_trace,
        "registration_converged": reg_converged,
        "nystrom_sample_indices": nystrom_indices,
        "training_cluster_assignments": assignments.tolist(),
        "representative_pool_indices": [r.tolist() for r in rep_indices],
    }
    labels = tuple(AnatomicalLabel.unlabeled() for _ in range(cfg.k))
    return Atlas(nystrom, cluster_model, labels, reps, provenance)


def _pick_representatives(pooled, embeddings, assignments, centroids, r):
    reps = []
    indices = []
    for k in range(centroids.shape[0]):
        members = np.nonzero(assignments == k)[0]
        if members.size == 0:
            reps.append(np.empty((0, pooled.shape[1], 3)))
            indices.append(np.empty(0, dtype=np.int64))
            continue
        d2 = ((embeddings[members] - centroids[k]) ** 2).sum(axis=1)
        order = members[np.argsort(d2, kind="stable")][:r]
        reps.append(pooled[order].copy())
        indices.append(order)
    return tuple(reps), indices


def _registration_provenance(reg: RegistrationConfig | None):
    if reg is None:
        return None
    return {
        "transform_family": reg.transform_family.value,
        "sigma_schedule": list(reg.sigma_schedule),
        "fibers_per_subject_sample": reg.fibers_per_subject_sample,
        "max_iters_per_scale": reg.max_iters_per_scale,
        "convergence_tol": reg.convergence_tol,
        "seed": reg.seed,
        "points_per_fiber": reg.points_per_fiber,
    }


def with_cluster_labels(atlas: Atlas, tract_names: list[str]) -> Atlas:
    """Replace the per-cluster labels; names must come from the taxonomy."""
    if len(tract_names) != atlas.n_clusters:
        raise ValueError(
            f"{len(tract_names)} names for {atlas.n_clusters} clusters"
        )
    labels = tuple(AnatomicalLabel.for_tract(name) for name in tract_names)
    return replace(atlas, labels=labels)


def transfer_labels(
    new_atlas: Atlas,
    reference: Atlas,
    params: FiberDistanceParams | None = None,
) -> Atlas:
    """Label each new cluster from its nearest reference cluster.

    Cluster-to-cluster distance is the mean of all pairwise fiber distances
    between the two representative sets; ties resolve to the lowest
    reference cluster index.  Pure and idempotent.
    """
    if not reference.is_fully_labeled:
        raise ValueError("reference atlas has unlabeled clusters")
    if new_atlas.points_per_fiber != reference.points_per_fiber:
        raise ValueError(
            f"point count mismatch: {new_atlas.points_per_fiber} vs "
            f"{reference.points_per_fiber}"
        )
    for i, reps in enumerate(new_atlas.representative_fibers):
        if reps.shape[0] == 0:
            raise ValueError(f"new atlas cluster {i} has no representative fibers")
    for j, reps in enumerate(reference.representative_fibers):
        if reps.shape[0] == 0:
            raise ValueError(f"reference cluster {j} has no representative fibers")
    if params is None:
        params = FiberDistanceParams(variant=DistanceVariant.SYMMETRIC_MEAN)

    labels = []
    for reps in new_atlas.representative_fibers:
        means = np.array([
            pairwise_distance_matrix(list(reps), list(ref_reps), params).mean()
            for ref_reps in reference.representative_fibers
        ])
        labels.append(reference.labels[int(np.argmin(means))])
    return replace(new_atlas, labels=tuple(labels))


def _array_record(name: str, arr: np.ndarray, dtype: str, offset: int):
    data = np.ascontiguousarray(arr, dtype=np.dtype(dtype)).tobytes()
    record = {
        "name": name,
        "dtype": dtype,
        "shape": list(arr.shape),
        "offset": offset,
        "nbytes": len(data),
    }
    return record, data


def save_atlas(atlas: Atlas, path: str | Path) -> Path:
    """Write an atlas bundle directory; returns its path."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)

    rep_counts = [int(r.shape[0]) for r in atlas.representative_fibers]
    if sum(rep_counts) > 0:
        stacked_reps = np.concatenate(
            [r for r in atlas.representative_fibers if r.shape[0] > 0], axis=0
        )
    else:
        stacked_reps = np.empty((0, atlas.points_per_fiber, 3))

    named = [
        ("sample_fibers", atlas.nystrom.sample_fibers, "<f8"),
        ("eigenvalues", atlas.nystrom.eigenvalues, "<f8"),
        ("sample_eigenvectors", atlas.nystrom.sample_eigenvectors, "<f8"),
        ("row_sum_normalizer", atlas.nystrom.row_sum_normalizer, "<f8"),
        ("centroids", atlas.clusters.centroids, "<f8"),
        ("member_counts", atlas.clusters.member_counts, "<i8"),
        ("inertia_trace", atlas.clusters.inertia_trace, "<f8"),
        ("representatives", stacked_reps, "<f8"),
    ]
    records = []
    chunks = [BUNDLE_MAGIC]
    offset = len(BUNDLE_MAGIC)
    for name, arr, dtype in named:
        record, data = _array_record(name, np.asarray(arr), dtype, offset)
        records.append(record)
        chunks.append(data)
        offset += len(data)

    payload = b"".join(chunks)
    (path / "arrays.bin").write_bytes(payload)

    dist = atlas.nystrom.distance
    manifest = {
        "format": BUNDLE_FORMAT,
        "version": {"major": FORMAT_MAJOR, "minor": FORMAT_MINOR},
        "binary_file": "arrays.bin",
        "checksum_sha256": hashlib.sha256(payload).hexdigest(),
        "arrays": records,
        "embedding": {
            "sigma": atlas.nystrom.sigma,
            "dropped_leading": atlas.nystrom.dropped_leading,
            "distance": {
                "variant": dist.variant.value,
                "flip_invariant": dist.flip_invariant,
                "sigma": dist.sigma,
            },
        },
        "labels": [
            {
                "tract_name": lab.tract_name,
                "category": None if lab.category is None else lab.category.value,
            }
            for lab in atlas.labels
        ],
        "representative_counts": rep_counts,
        "provenance": atlas.provenance,
    }
    with open(path / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return path


def load_atlas(path: str | Path) -> Atlas:
    """Read an atlas bundle directory, verifying format, version, checksum."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise NotAnAtlasBundleError(f"not an atlas bundle: no manifest in {path}")
    try:
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise NotAnAtlasBundleError(f"not an atlas bundle: unreadable manifest ({exc})")
    if manifest.get("format") != BUNDLE_FORMAT:
        raise NotAnAtlasBundleError(
            f"not an atlas bundle: format is {manifest.get('format')!r}"
        )
    version = manifest.get("version", {})
    major = version.get("major")
    if major != FORMAT_MAJOR:
        raise AtlasVersionError(
            f"bundle format version {major}.{version.get('minor')} is not "
            f"readable by this implementation (supports {FORMAT_MAJOR}.x)"
        )

    binary_path = path / manifest["binary_file"]
    if not binary_path.is_file():
        raise AtlasTruncatedError(f"bundle binary {binary_path.name} is missing")
    payload = binary_path.read_bytes()
    if not payload.startswith(BUNDLE_MAGIC):
        raise NotAnAtlasBundleError("not an atlas bundle: bad magic bytes")
    required = max(
        (rec["offset"] + rec["nbytes"] for rec in manifest["arrays"]),
        default=len(BUNDLE_MAGIC),
    )
    if len(payload) < required:
        raise AtlasTruncatedError(
            f"bundle binary holds {len(payload)} bytes, arrays require {required}"
        )
    digest = hashlib.sha256(payload).hexdigest()
    if digest != manifest["checksum_sha256"]:
        raise AtlasChecksumError(
            f"bundle checksum mismatch: manifest {manifest['checksum_sha256']}, "
            f"binary {digest}"
        )

    arrays = {}
    for rec in manifest["arrays"]:
        count = int(np.prod(rec["shape"], dtype=np.int64)) if rec["shape"] else 1
        flat = np.frombuffer(
            payload, dtype=np.dtype(rec["dtype"]), count=count, offset=rec["offset"]
        )
        arrays[rec["name"]] = flat.reshape(rec["shape"])

    emb = manifest["embedding"]
    dist = FiberDistanceParams(
        variant=DistanceVariant(emb["distance"]["variant"]),
        flip_invariant=emb["distance"]["flip_invariant"],
        sigma=emb["distance"]["sigma"],
    )
    nystrom = NystromModel(
        sample_fibers=arrays["sample_fibers"],
        sigma=emb["sigma"],
        eigenvalues=arrays["eigenvalues"],
        sample_eigenvectors=arrays["sample_eigenvectors"],
        row_sum_normalizer=arrays["row_sum_normalizer"],
        distance=dist,
        dropped_leading=emb["dropped_leading"],
    )
    clusters = ClusterModel(
        centroids=arrays["centroids"],
        member_counts=arrays["member_counts"],
        inertia_trace=arrays["inertia_trace"],
    )
    labels = tuple(
        AnatomicalLabel(
            rec["tract_name"],
            None if rec["category"] is None else TractCategory(rec["category"]),
        )
        for rec in manifest["labels"]
    )
    counts = manifest["representative_counts"]
    splits = np.cumsum(counts)[:-1]
    reps = tuple(
        np.asarray(block)
        for block in np.split(arrays["representatives"], splits, axis=0)
    )
    return Atlas(nystrom, clusters, labels, reps, manifest["provenance"])
