"""Shared fixtures and the acceptance-report terminal hook."""

import numpy as np
import pytest

from fiberatlas import (
    AtlasBuildConfig,
    BundleSpec,
    CohortSpec,
    PerturbationSpec,
    build_atlas,
    generate_cohort,
)

# test_acceptance.py appends "PASS criterion N: ..." lines here; the hook
# below prints them after the run so they survive pytest's capture.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_fibers(rng, n, points=15, spread=60.0):
    """Random smooth-ish polylines: a line plus a low-frequency wiggle."""
    start = rng.uniform(-spread, spread, size=(n, 1, 3))
    direction = rng.normal(size=(n, 1, 3))
    direction /= np.linalg.norm(direction, axis=2, keepdims=True)
    t = np.linspace(0.0, 1.0, points)[None, :, None]
    wiggle = rng.normal(scale=2.0, size=(n, 1, 3)) * np.sin(np.pi * t)
    return start + 40.0 * t * direction + wiggle


@pytest.fixture(scope="session")
def small_cohort():
    """Four unperturbed subjects over the eight stock bundles, 30 fibers each."""
    spec = CohortSpec(
        bundles=_small_bundles(),
        subjects=4,
        perturbation=PerturbationSpec(0.0, 0.0, 0.0),
        seed=7,
    )
    return generate_cohort(spec)


def _small_bundles():
    from fiberatlas import default_desk_bundles

    return tuple(
        BundleSpec(b.centerline, b.radius, 30, b.label, b.fa_profile)
        for b in default_desk_bundles()
    )


@pytest.fixture(scope="session")
def small_atlas(small_cohort):
    """Atlas over the unperturbed small cohort; no registration needed."""
    cfg = AtlasBuildConfig(
        k=8,
        embedding_dims=8,
        nystrom_sample_size=120,
        sigma=30.0,
        fibers_per_subject=240,
        points_per_fiber=15,
        representatives_per_cluster=5,
        seed=3,
        registration=None,
    )
    return build_atlas([t for t, _ in small_cohort], cfg)
