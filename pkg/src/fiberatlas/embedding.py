"""Nystrom-approximated spectral fiber embedding and K-way clustering.

A sample of m fibers defines a Gaussian affinity matrix whose
degree-normalised eigenvectors give each sample fiber an E-dimensional
"fingerprint".  Any other fiber embeds by the Nystrom out-of-sample
extension: its affinity row against the sample, degree-normalised and
projected onto the sample eigenvectors scaled by inverse eigenvalues.
Embedding a fiber that is in the sample reproduces its in-sample
coordinates, so in-sample and out-of-sample fibers live in one space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .metrics import FiberDistanceParams, affinity, pairwise_distance_matrix


class RankDeficientAffinityError(ValueError):
    """Affinity matrix cannot support the requested embedding dimension."""

    def __init__(self, requested: int, achievable: int):
        self.requested = requested
        self.achievable = achievable
        super().__init__(
            f"affinity matrix supports at most {achievable} embedding "
            f"dimensions, {requested} requested"
        )


@dataclass(frozen=True)
class NystromModel:
    """Spectral model fitted on a fiber sample.

    ``sample_eigenvectors`` columns are the top eigenvectors of
    D^(-1/2) A D^(-1/2) (eigenvalues descending, optional leading trivial
    eigenvector dropped); ``row_sum_normalizer`` holds the sample degree
    terms used for out-of-sample normalisation.
    """

    sample_fibers: np.ndarray          # (m, P, 3)
    sigma: float
    eigenvalues: np.ndarray            # (E,)
    sample_eigenvectors: np.ndarray    # (m, E)
    row_sum_normalizer: np.ndarray     # (m,)
    distance: FiberDistanceParams = field(default_factory=FiberDistanceParams)
    dropped_leading: bool = True

    def __post_init__(self):
        if np.any(np.diff(self.eigenvalues) > 0):
            raise ValueError("eigenvalues must be sorted descending")
        if self.eigenvalues.shape[0] > self.sample_fibers.shape[0]:
            raise ValueError("more embedding dimensions than sample fibers")
        if np.any(self.row_sum_normalizer <= 0):
            raise ValueError("degree terms must be positive")

    @property
    def n_dims(self) -> int:
        return int(self.eigenvalues.shape[0])

    @property
    def points_per_fiber(self) -> int:
        return int(self.sample_fibers.shape[1])


def _fix_eigenvector_signs(vectors: np.ndarray) -> np.ndarray:
    """Force each column's largest-magnitude component positive (reproducible serialization)."""
    out = vectors.copy()
    for k in range(out.shape[1]):
        i = int(np.argmax(np.abs(out[:, k])))
        if out[i, k] < 0:
            out[:, k] = -out[:, k]
    return out


def fit_nystrom(
    all_fibers: np.ndarray,
    m: int,
    n_dims: int,
    sigma: float,
    seed,
    distance: FiberDistanceParams | None = None,
    drop_leading: bool = True,
) -> NystromModel:
    """Fit the spectral model on m fibers sampled from ``all_fibers``.

    ``all_fibers`` is an (n, P, 3) array of resampled fibers.  With m = n
    the model is the exact spectral embedding (up to eigenvector sign).
    """
    fibers = np.asarray(all_fibers, dtype=np.float64)
    n = fibers.shape[0]
    if m > n:
        raise ValueError(f"sample size {m} exceeds fiber count {n}")
    if n_dims > m:
        raise ValueError(f"embedding dimension {n_dims} exceeds sample size {m}")
    if distance is None:
        distance = FiberDistanceParams(sigma=sigma)
    idx = np.sort(np.random.default_rng(seed).choice(n, size=m, replace=False))
    sample = fibers[idx]

    dist = pairwise_distance_matrix(sample, sample, distance)
    aff = affinity(dist, sigma)
    degrees = aff.sum(axis=1)
    norm = np.sqrt(np.outer(degrees, degrees))
    sym = aff / norm

    evals, evecs = np.linalg.eigh(sym)       # ascending
    evals = evals[::-1]
    evecs = evecs[:, ::-1]

    want = n_dims + (1 if drop_leading else 0)
    tol = m * np.finfo(np.float64).eps * max(abs(evals[0]), 1.0)
    achievable = int(np.sum(evals > tol)) - (1 if drop_leading else 0)
    if achievable < n_dims:
        raise RankDeficientAffinityError(n_dims, max(achievable, 0))
    keep = slice(1, want) if drop_leading else slice(0, want)
    return NystromModel(
        sample_fibers=sample,
        sigma=sigma,
        eigenvalues=evals[keep].copy(),
        sample_eigenvectors=_fix_eigenvector_signs(evecs[:, keep]),
        row_sum_normalizer=degrees,
        distance=distance,
        dropped_leading=drop_leading,
    )


def embed_fibers(fibers: np.ndarray, model: NystromModel) -> np.ndarray:
    """Nystrom out-of-sample extension for an (n, P, 3) fiber array -> (n, E)."""
    fibers = np.asarray(fibers, dtype=np.float64)
    if fibers.ndim == 2:
        fibers = fibers[None]
    if fibers.shape[1] != model.points_per_fiber:
        raise ValueError(
            f"fibers have {fibers.shape[1]} points, model expects {model.points_per_fiber}"
        )
    dist = pairwise_distance_matrix(fibers, model.sample_fibers, model.distance)
    rows = affinity(dist, model.sigma)                       # (n, m)
    row_deg = rows.sum(axis=1)
    # distant fibers have vanishing affinity rows and embed near zero;
    # the floor only guards the 0/0 case
    row_deg = np.maximum(row_deg, np.finfo(np.float64).tiny)
    normed = rows / np.sqrt(row_deg[:, None] * model.row_sum_normalizer[None, :])
    return normed @ (model.sample_eigenvectors / model.eigenvalues[None, :])


def embed(fiber: np.ndarray, model: NystromModel) -> np.ndarray:
    """Embed a single (P, 3) resampled fiber -> (E,) fingerprint vector."""
    return embed_fibers(np.asarray(fiber)[None], model)[0]


@dataclass(frozen=True)
class ClusterModel:
    """K-means result in embedding space."""

    centroids: np.ndarray        # (K, E)
    member_counts: np.ndarray    # (K,)
    inertia_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 1:
            raise ValueError("centroids must be a (K, E) matrix with K >= 1")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("centroids must be finite")
        if self.member_counts.shape[0] != self.centroids.shape[0]:
            raise ValueError("one member count per cluster required")

    @property
    def n_clusters(self) -> int:
        return int(self.centroids.shape[0])


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    closest = ((points - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            # all remaining points coincide with a centroid; pick uniformly
            centroids[i] = points[rng.integers(n)]
            continue
        centroids[i] = points[rng.choice(n, p=closest / total)]
        closest = np.minimum(closest, ((points - centroids[i]) ** 2).sum(axis=1))
    return centroids


def cluster(
    embeddings: np.ndarray,
    k: int,
    seed,
    max_iter: int = 300,
    n_restarts: int = 1,
) -> tuple[ClusterModel, np.ndarray]:
    """K-means with k-means++ seeding; deterministic for a fixed seed.

    Returns the fitted model and the per-fiber cluster assignment.  A single
    k-means++ run per seed is the default; restarts keep the lowest-inertia
    solution (first run wins ties).
    """
    points = np.asarray(embeddings, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("embeddings must be (n, E)")
    n = points.shape[0]
    if k > n:
        raise ValueError(f"cannot form {k} clusters from {n} fibers")
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    best: tuple[float, np.ndarray, np.ndarray, list[float]] | None = None
    for _ in range(max(1, n_restarts)):
        centroids = _kmeans_pp_init(points, k, rng)
        labels = np.zeros(n, dtype=np.int64)
        trace: list[float] = []
        for _ in range(max_iter):
            d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
            new_labels = np.argmin(d2, axis=1)
            trace.append(float(d2[np.arange(n), new_labels].sum()))
            moved = np.any(new_labels != labels) or not trace[:-1]
            labels = new_labels
            for j in range(k):
                mask = labels == j
                if np.any(mask):
                    centroids[j] = points[mask].mean(axis=0)
                else:
                    # deterministic empty-cluster repair: take the point
                    # farthest from its current centroid
                    far = int(np.argmax(d2[np.arange(n), labels]))
                    centroids[j] = points[far]
                    labels[far] = j
            if not moved and len(trace) > 1:
                break
        inertia = trace[-1]
        if best is None or inertia < best[0]:
            best = (inertia, centroids, labels, trace)
    assert best is not None
    _, centroids, labels, trace = best
    counts = np.bincount(labels, minlength=k)
    model = ClusterModel(
        centroids=centroids,
        member_counts=counts,
        inertia_trace=np.asarray(trace),
    )
    return model, labels


def assign_fibers(embeddings: np.ndarray, clusters: ClusterModel) -> np.ndarray:
    """Nearest-centroid index per embedding row; ties break to the lowest index."""
    points = np.asarray(embeddings, dtype=np.float64)
    if points.ndim == 1:
        points = points[None]
    if points.shape[1] != clusters.centroids.shape[1]:
        raise ValueError(
            f"embedding dimension {points.shape[1]} does not match "
            f"centroids ({clusters.centroids.shape[1]})"
        )
    d2 = ((points[:, None, :] - clusters.centroids[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def assign(embedding: np.ndarray, clusters: ClusterModel) -> int:
    """Cluster index of a single embedding vector."""
    return int(assign_fibers(np.asarray(embedding)[None], clusters)[0])
