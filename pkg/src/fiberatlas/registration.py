"""Entropy-surrogate groupwise alignment of tractograms.

All subjects are aligned into a shared space by minimising a kernelised
mean-closest-point cost over cross-subject fiber pairs.  The objective is
the negative mean log Gaussian affinity of pairwise MCP distances, driven
to a minimum by derivative-free coordinate descent over per-subject
transform parameters in a multiscale, coarse-to-fine bandwidth schedule.

The groupwise problem has two gauge freedoms: a common rigid motion leaves
the objective unchanged, and a common shrink would drive it to a degenerate
minimum.  Both are removed by constraining the subject transforms to mean
translation zero and mean log-scale zero; the scale constraint is enforced
throughout optimisation by compensated coordinate moves so the monotone
objective trace is meaningful.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np

from .metrics import DistanceVariant, FiberDistanceParams, pairwise_distance_matrix
from .tractogram import (
    DEFAULT_POINTS_PER_FIBER,
    AffineTransform,
    Tractogram,
    resample_all,
    subsample_indices,
)

logger = logging.getLogger(__name__)

LOG_EPSILON = 1e-12


class TransformFamily(enum.Enum):
    RIGID = "rigid"
    SIMILARITY = "similarity"
    AFFINE = "affine"


# parameter vector layouts per family: translation, rotation (radians),
# then family extras
_N_PARAMS = {
    TransformFamily.RIGID: 6,
    TransformFamily.SIMILARITY: 7,       # + isotropic log-scale
    TransformFamily.AFFINE: 12,          # + per-axis log-scales + shears
}
_SCALE_COORDS = {
    TransformFamily.RIGID: (),
    TransformFamily.SIMILARITY: (6,),
    TransformFamily.AFFINE: (6, 7, 8),
}


@dataclass(frozen=True)
class RegistrationConfig:
    transform_family: TransformFamily = TransformFamily.RIGID
    sigma_schedule: tuple[float, ...] = (30.0, 20.0, 10.0, 5.0)
    fibers_per_subject_sample: int = 200
    max_iters_per_scale: int = 10
    convergence_tol: float = 1e-4
    seed: int = 0
    points_per_fiber: int = DEFAULT_POINTS_PER_FIBER

    def __post_init__(self):
        if len(self.sigma_schedule) == 0:
            raise ValueError("sigma_schedule must be nonempty")
        if np.any(np.diff(self.sigma_schedule) >= 0):
            raise ValueError("sigma_schedule must be strictly decreasing")
        if self.fibers_per_subject_sample < 10:
            raise ValueError("need at least 10 sample fibers per subject")


@dataclass(frozen=True)
class GroupRegistrationResult:
    transforms: tuple[AffineTransform, ...]
    objective_trace: tuple[tuple[float, ...], ...]   # one trace per scale
    converged: bool


def rotation_matrix(rx: float, ry: float, rz: float) -> np.ndarray:
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def params_to_transform(
    params: np.ndarray, family: TransformFamily, center: np.ndarray
) -> AffineTransform:
    """Decode a parameter vector into p -> L @ (p - c) + c + t."""
    t = params[0:3]
    R = rotation_matrix(*params[3:6])
    if family is TransformFamily.RIGID:
        L = R
    elif family is TransformFamily.SIMILARITY:
        L = R * np.exp(params[6])
    else:
        S = np.eye(3)
        S[0, 1], S[0, 2], S[1, 2] = params[9], params[10], params[11]
        L = R @ np.diag(np.exp(params[6:9])) @ S
    return AffineTransform(L, center - L @ center + t)


def group_objective(
    samples: list[np.ndarray],
    transforms: list[AffineTransform],
    sigma: float,
    distance: FiberDistanceParams | None = None,
) -> float:
    """Negative mean log-affinity over all cross-subject fiber pairs.

    ``samples`` holds one (n_s, P, 3) resampled fiber array per subject.
    Lower is better; finite for any input because the affinity is floored
    before the log.
    """
    if len(samples) < 2:
        raise ValueError("group objective needs at least 2 subjects")
    if len(transforms) != len(samples):
        raise ValueError("one transform per subject required")
    if distance is None:
        distance = FiberDistanceParams(sigma=sigma)
    moved = [t.apply(s) for s, t in zip(samples, transforms)]
    total = 0.0
    n_pairs = 0
    for s in range(len(moved)):
        for t in range(s + 1, len(moved)):
            total += _pair_cost(moved[s], moved[t], sigma, distance)
            n_pairs += moved[s].shape[0] * moved[t].shape[0]
    return total / n_pairs


def _pair_cost(fibers_a, fibers_b, sigma: float, distance: FiberDistanceParams) -> float:
    d = pairwise_distance_matrix(fibers_a, fibers_b, distance)
    aff = np.exp(-(d * d) / (sigma * sigma))
    return float(-np.log(aff + LOG_EPSILON).sum())


class _GroupState:
    """Per-subject parameters with cached pair costs for fast partial updates."""

    def __init__(self, samples, family, sigma, distance, gauge_coupling=True):
        self.samples = samples
        self.family = family
        self.sigma = sigma
        self.distance = distance
        self.gauge_coupling = gauge_coupling
        self.n = len(samples)
        self.centers = [s.reshape(-1, 3).mean(axis=0) for s in samples]
        self.params = np.zeros((self.n, _N_PARAMS[family]))
        self._moved: list[np.ndarray | None] = [None] * self.n
        self._pair: dict[tuple[int, int], float | None] = {
            (s, t): None for s in range(self.n) for t in range(s + 1, self.n)
        }
        self._n_pairs = sum(
            samples[s].shape[0] * samples[t].shape[0]
            for s in range(self.n)
            for t in range(s + 1, self.n)
        )

    def transform(self, s: int) -> AffineTransform:
        return params_to_transform(self.params[s], self.family, self.centers[s])

    def invalidate(self, s: int) -> None:
        self._moved[s] = None
        for key in self._pair:
            if s in key:
                self._pair[key] = None

    def set_params(self, new_params: np.ndarray) -> None:
        changed = np.any(new_params != self.params, axis=1)
        self.params = new_params.copy()
        for s in np.nonzero(changed)[0]:
            self.invalidate(int(s))

    def objective(self) -> float:
        for s in range(self.n):
            if self._moved[s] is None:
                self._moved[s] = self.transform(s).apply(self.samples[s])
        total = 0.0
        for (s, t), cost in self._pair.items():
            if cost is None:
                cost = _pair_cost(
                    self._moved[s], self._moved[t], self.sigma, self.distance
                )
                self._pair[(s, t)] = cost
            total += cost
        return total / self._n_pairs


def _coordinate_direction(state: _GroupState, subject: int, coord: int) -> np.ndarray:
    """Unit move of one coordinate, scale-compensated across other subjects.

    Scale coordinates are coupled so the cohort mean log-scale stays zero:
    pushing one subject's scale up pushes everyone else's down.
    """
    direction = np.zeros_like(state.params)
    direction[subject, coord] = 1.0
    scale_coords = _SCALE_COORDS[state.family]
    if state.gauge_coupling and coord in scale_coords and state.n > 1:
        share = -1.0 / (len(scale_coords) * (state.n - 1))
        for other in range(state.n):
            if other != subject:
                for q in scale_coords:
                    direction[other, q] += share
    return direction


def _line_search(
    state: _GroupState,
    direction: np.ndarray,
    step: float,
    f0: float,
    max_expansions: int = 6,
) -> tuple[float, float]:
    """Adaptive forward/backward search along one direction.

    Returns (new objective, suggested next step).  Only improving moves are
    accepted, so the objective never increases.
    """
    base = state.params.copy()

    def value_at(alpha: float) -> float:
        state.set_params(base + alpha * direction)
        return state.objective()

    for sign in (1.0, -1.0):
        alpha = sign * step
        f = value_at(alpha)
        if f < f0:
            best_alpha, best_f = alpha, f
            for _ in range(max_expansions):
                alpha *= 2.0
                f = value_at(alpha)
                if f < best_f:
                    best_alpha, best_f = alpha, f
                else:
                    break
            state.set_params(base + best_alpha * direction)
            state.objective()
            return best_f, min(abs(best_alpha), 4.0 * step)
    state.set_params(base)
    return f0, step * 0.5


_INITIAL_STEPS = {"translation": 0.25, "rotation": 0.04, "scale": 0.04, "shear": 0.02}


def _initial_steps(family: TransformFamily, sigma: float) -> np.ndarray:
    steps = np.empty(_N_PARAMS[family])
    steps[0:3] = _INITIAL_STEPS["translation"] * sigma
    steps[3:6] = _INITIAL_STEPS["rotation"]
    if family is TransformFamily.SIMILARITY:
        steps[6] = _INITIAL_STEPS["scale"]
    elif family is TransformFamily.AFFINE:
        steps[6:9] = _INITIAL_STEPS["scale"]
        steps[9:12] = _INITIAL_STEPS["shear"]
    return steps


def _optimize_scale(
    state: _GroupState,
    movable: list[int],
    max_iters: int,
    tol: float,
) -> tuple[list[float], bool]:
    """Coordinate-descent sweeps at one bandwidth until converged."""
    steps = np.tile(_initial_steps(state.family, state.sigma), (state.n, 1))
    current = state.objective()
    trace = [current]
    converged = False
    for _ in range(max_iters):
        before = current
        for s in movable:
            for q in range(state.params.shape[1]):
                direction = _coordinate_direction(state, s, q)
                current, steps[s, q] = _line_search(state, direction, steps[s, q], current)
        trace.append(current)
        rel = (before - current) / max(abs(before), 1e-30)
        if rel < tol:
            converged = True
            break
    return trace, converged


def _draw_samples(tractograms, cfg: RegistrationConfig, scale_index: int):
    """Fresh per-subject fiber samples for one scale, resampled to P points."""
    samples = []
    for s, tg in enumerate(tractograms):
        n = min(cfg.fibers_per_subject_sample, len(tg))
        seed = np.random.SeedSequence(entropy=cfg.seed, spawn_key=(scale_index, s))
        idx = subsample_indices(len(tg), n, seed)
        fibers = [tg.streamlines[i] for i in idx]
        samples.append(resample_all(fibers, cfg.points_per_fiber))
    return samples


def _check_not_degenerate(samples) -> None:
    for s, sample in enumerate(samples):
        pts = sample.reshape(-1, 3)
        if float(pts.std(axis=0).max()) < 1e-9:
            raise ValueError(f"degenerate subject {s}: sample has no spatial extent")


def _moment_init(state: _GroupState, targets: list[np.ndarray] | None = None) -> None:
    """Centroid (and RMS-radius, for scaling families) alignment as a start.

    Without ``targets`` each subject is matched to the pooled cohort moments;
    scale parameters are mean-centred afterwards to respect the gauge.
    """
    cents = [s.reshape(-1, 3).mean(axis=0) for s in state.samples]
    rms = [
        float(np.sqrt(((s.reshape(-1, 3) - c) ** 2).sum(axis=1).mean()))
        for s, c in zip(state.samples, cents)
    ]
    goal_c = np.mean(cents, axis=0)
    goal_r = float(np.mean(rms))
    params = state.params.copy()
    scale_coords = _SCALE_COORDS[state.family]
    for s in range(state.n):
        if scale_coords and rms[s] > 0:
            params[s, list(scale_coords)] = np.log(goal_r / rms[s])
        # rotation/scale act about the sample centroid, so a pure translation
        # suffices to align centroids
        params[s, 0:3] = goal_c - cents[s]
    if scale_coords:
        mean_ls = params[:, list(scale_coords)].mean()
        params[:, list(scale_coords)] -= mean_ls
    state.set_params(params)


def register_group(
    tractograms: list[Tractogram],
    cfg: RegistrationConfig = RegistrationConfig(),
) -> GroupRegistrationResult:
    """Align all subjects into a common space via per-subject transforms.

    Runs the coarse-to-fine bandwidth schedule, carrying parameters across
    scales; per-scale fiber samples are drawn fresh from the fixed seed.
    Non-convergence is reported in the result, not raised.
    """
    if len(tractograms) < 2:
        raise ValueError("groupwise registration needs at least 2 subjects")
    for tg in tractograms:
        if len(tg) < min(cfg.fibers_per_subject_sample, 10):
            raise ValueError(f"subject {tg.subject_id} has too few fibers")

    # flip candidates equal the unflipped MCP (min of identical values), so
    # skipping them halves the cost without changing any objective value
    distance = FiberDistanceParams(
        variant=DistanceVariant.SYMMETRIC_MEAN, flip_invariant=False
    )
    params = None
    centers = None
    traces: list[tuple[float, ...]] = []
    all_converged = True
    state = None
    for k, sigma in enumerate(cfg.sigma_schedule):
        samples = _draw_samples(tractograms, cfg, k)
        _check_not_degenerate(samples)
        state = _GroupState(samples, cfg.transform_family, sigma, distance)
        if params is None:
            _moment_init(state)
        else:
            # carry transforms across scales; centers moved with the new
            # sample, so re-express the translation part
            state.centers = centers
            state.set_params(params)
        trace, converged = _optimize_scale(
            state, list(range(state.n)), cfg.max_iters_per_scale, cfg.convergence_tol
        )
        traces.append(tuple(trace))
        all_converged = all_converged and converged
        params = state.params.copy()
        centers = state.centers
        logger.info(
            "registration scale sigma=%.1f: objective %.6f -> %.6f (%d sweeps)",
            sigma, trace[0], trace[-1], len(trace) - 1,
        )

    # exact gauge projection: a common translation is objective-invariant
    transforms = [state.transform(s) for s in range(state.n)]
    mean_t = np.mean([t.translation for t in transforms], axis=0)
    transforms = [
        AffineTransform(t.linear, t.translation - mean_t) for t in transforms
    ]
    return GroupRegistrationResult(
        transforms=tuple(transforms),
        objective_trace=tuple(traces),
        converged=all_converged,
    )


def register_to_atlas(
    subject: Tractogram,
    atlas_fibers: np.ndarray,
    cfg: RegistrationConfig = RegistrationConfig(),
) -> AffineTransform:
    """Single transform taking the subject into a fixed atlas space.

    Minimises the same kernelised MCP objective between the transformed
    subject sample and the atlas fiber sample; the atlas side never moves.
    """
    atlas_fibers = np.asarray(atlas_fibers, dtype=np.float64)
    if atlas_fibers.ndim != 3 or atlas_fibers.shape[0] == 0:
        raise ValueError("atlas fiber sample must be a nonempty (n, P, 3) array")
    if atlas_fibers.shape[1] != cfg.points_per_fiber:
        atlas_fibers = resample_all(atlas_fibers, cfg.points_per_fiber)
    distance = FiberDistanceParams(
        variant=DistanceVariant.SYMMETRIC_MEAN, flip_invariant=False
    )
    params = None
    center = None
    for k, sigma in enumerate(cfg.sigma_schedule):
        n = min(cfg.fibers_per_subject_sample, len(subject))
        seed = np.random.SeedSequence(entropy=cfg.seed, spawn_key=(k, 0))
        idx = subsample_indices(len(subject), n, seed)
        sample = resample_all([subject.streamlines[i] for i in idx], cfg.points_per_fiber)
        _check_not_degenerate([sample])
        # the atlas is a fixed target, so there is no gauge freedom to couple
        state = _GroupState(
            [sample, atlas_fibers], cfg.transform_family, sigma, distance,
            gauge_coupling=False,
        )
        if params is None:
            _moment_init(state)
            # the atlas is pinned: undo any init on its side and fold the
            # whole correction into the subject
            atlas_params = state.params[1].copy()
            fixed = state.params.copy()
            fixed[1] = 0.0
            scale_coords = list(_SCALE_COORDS[cfg.transform_family])
            if scale_coords:
                fixed[0, scale_coords] -= atlas_params[scale_coords]
            fixed[0, 0:3] -= atlas_params[0:3]
            state.set_params(fixed)
        else:
            state.centers[0] = center
            full = np.zeros_like(state.params)
            full[0] = params
            state.set_params(full)
        _optimize_scale(state, [0], cfg.max_iters_per_scale, cfg.convergence_tol)
        params = state.params[0].copy()
        center = state.centers[0]
    return params_to_transform(params, cfg.transform_family, center)
