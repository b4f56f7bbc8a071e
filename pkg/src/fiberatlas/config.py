"""Pipeline configuration: YAML loading, static validation, typed assembly.

A config file describes every stage of a run.  ``validate_config`` checks
all module preconditions statically and reports every violation at once;
``build_pipeline_config`` turns a validated mapping into typed stage
configs.  Parse errors surface the YAML line and column.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import yaml

from .atlas import AtlasBuildConfig
from .parcellation import DEFAULT_IDENTIFICATION_THRESHOLD, ParcellationConfig
from .registration import RegistrationConfig, TransformFamily
from .synth import CohortSpec, PerturbationSpec, default_desk_bundles

CONFIG_FORMAT_VERSION = 1

LABEL_MODES = ("ground-truth", "reference")
RESPONSES = ("mean_fa", "mean_md", "nos")


class ConfigParseError(ValueError):
    """Unparseable config file; carries 1-based line/column when known."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = f" at line {line}, column {column}" if line is not None else ""
        super().__init__(f"{message}{where}")


class ConfigValidationError(ValueError):
    """One or more static validation failures, all listed."""

    def __init__(self, problems: list[str]):
        self.problems = tuple(problems)
        super().__init__(
            "invalid configuration:\n" + "\n".join(f"  - {p}" for p in problems)
        )


@dataclass(frozen=True)
class PipelineConfig:
    """Typed, validated parameters for a full pipeline run."""

    format_version: int
    synth: CohortSpec | None
    input_paths: tuple[Path, ...]
    atlas: AtlasBuildConfig
    label_mode: str
    reference_path: Path | None
    parcellation: ParcellationConfig
    threshold: int
    response: str
    covariates: tuple[str, ...]
    correct_over: int | None
    jobs: int


def load_config_mapping(path: str | Path) -> dict:
    """Parse the YAML file into a mapping, reporting position on failure."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        if mark is not None:
            raise ConfigParseError(
                f"cannot parse {path}: {getattr(exc, 'problem', exc)}",
                line=mark.line + 1, column=mark.column + 1,
            ) from exc
        raise ConfigParseError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigParseError(f"{path}: config root must be a mapping")
    return doc


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check_registration(section, where: str, problems: list[str]) -> None:
    if section is None:
        return
    if not isinstance(section, dict):
        problems.append(f"{where}: must be a mapping or null")
        return
    family = section.get("family", "rigid")
    if family not in [f.value for f in TransformFamily]:
        problems.append(f"{where}.family: unknown transform family {family!r}")
    schedule = section.get("sigma_schedule", [30.0, 20.0, 10.0, 5.0])
    if (
        not isinstance(schedule, list)
        or not schedule
        or not all(_is_num(s) and s > 0 for s in schedule)
    ):
        problems.append(f"{where}.sigma_schedule: must be a nonempty list of positive numbers")
    elif any(b >= a for a, b in zip(schedule, schedule[1:])):
        problems.append(f"{where}.sigma_schedule: must be strictly decreasing")
    sample = section.get("fibers_per_subject_sample", 200)
    if not isinstance(sample, int) or sample < 10:
        problems.append(f"{where}.fibers_per_subject_sample: must be an integer >= 10")
    iters = section.get("max_iters_per_scale", 10)
    if not isinstance(iters, int) or iters < 1:
        problems.append(f"{where}.max_iters_per_scale: must be a positive integer")
    points = section.get("points_per_fiber", 15)
    if not isinstance(points, int) or points < 2:
        problems.append(f"{where}.points_per_fiber: must be an integer >= 2")


def validate_config(doc: dict) -> list[str]:
    """All static precondition violations in the mapping; empty means valid."""
    problems: list[str] = []

    version = doc.get("format_version")
    if version != CONFIG_FORMAT_VERSION:
        problems.append(
            f"format_version: expected {CONFIG_FORMAT_VERSION}, got {version!r}"
        )

    synth = doc.get("synth")
    inputs = doc.get("input")
    if (synth is None) == (inputs is None):
        problems.append("exactly one of 'synth' and 'input' sections is required")

    subject_count = None
    fibers_available = None
    if synth is not None:
        if not isinstance(synth, dict):
            problems.append("synth: must be a mapping")
            synth = {}
        subjects = synth.get("subjects", 20)
        if not isinstance(subjects, int) or subjects < 2:
            problems.append("synth.subjects: must be an integer >= 2")
        else:
            subject_count = subjects
        fibers = synth.get("fiber_count", 100)
        if not isinstance(fibers, int) or fibers < 1:
            problems.append("synth.fiber_count: must be a positive integer")
        else:
            fibers_available = 8 * fibers    # the built-in desk bundle set
        for key, default in (
            ("translation_mm", 10.0), ("rotation_deg", 10.0), ("log_scale", 0.0)
        ):
            v = synth.get(key, default)
            if not _is_num(v) or v < 0:
                problems.append(f"synth.{key}: must be a nonnegative number")
        if not isinstance(synth.get("seed", 0), int):
            problems.append("synth.seed: must be an integer")

    if inputs is not None:
        paths = inputs.get("tractograms") if isinstance(inputs, dict) else None
        if not isinstance(paths, list) or not paths:
            problems.append("input.tractograms: must be a nonempty list of paths")
        else:
            subject_count = len(paths)
            for p in paths:
                if not Path(p).is_file():
                    problems.append(f"input.tractograms: {p} is not a readable file")

    atlas = doc.get("atlas")
    if not isinstance(atlas, dict):
        problems.append("atlas: section is required")
        atlas = {}
    k = atlas.get("k")
    if not isinstance(k, int) or k < 1:
        problems.append("atlas.k: must be a positive integer")
    dims = atlas.get("embedding_dims", 10)
    if not isinstance(dims, int) or dims < 1:
        problems.append("atlas.embedding_dims: must be a positive integer")
    m = atlas.get("nystrom_sample_size", 200)
    if not isinstance(m, int) or m < 2:
        problems.append("atlas.nystrom_sample_size: must be an integer >= 2")
    elif isinstance(dims, int) and dims >= m:
        problems.append("atlas.embedding_dims: must be smaller than nystrom_sample_size")
    sigma = atlas.get("sigma", 30.0)
    if not _is_num(sigma) or sigma <= 0:
        problems.append("atlas.sigma: must be a positive number")
    per_subject = atlas.get("fibers_per_subject", 500)
    if not isinstance(per_subject, int) or per_subject < 1:
        problems.append("atlas.fibers_per_subject: must be a positive integer")
    ppf = atlas.get("points_per_fiber", 15)
    if not isinstance(ppf, int) or ppf < 2:
        problems.append("atlas.points_per_fiber: must be an integer >= 2")
    restarts = atlas.get("cluster_restarts", 8)
    if not isinstance(restarts, int) or restarts < 1:
        problems.append("atlas.cluster_restarts: must be a positive integer")
    if not isinstance(atlas.get("seed", 0), int):
        problems.append("atlas.seed: must be an integer")
    _check_registration(atlas.get("registration"), "atlas.registration", problems)

    if fibers_available is not None and isinstance(per_subject, int):
        if per_subject > fibers_available:
            problems.append(
                f"atlas.fibers_per_subject ({per_subject}) exceeds fibers generated "
                f"per subject ({fibers_available})"
            )
        elif subject_count is not None and isinstance(k, int):
            pooled = subject_count * per_subject
            if k > pooled:
                problems.append(
                    f"atlas.k ({k}) exceeds pooled fiber count ({pooled})"
                )
            if isinstance(m, int) and m > pooled:
                problems.append(
                    f"atlas.nystrom_sample_size ({m}) exceeds pooled fiber count ({pooled})"
                )

    label = doc.get("label", {})
    if not isinstance(label, dict):
        problems.append("label: must be a mapping")
        label = {}
    mode = label.get("mode", "ground-truth")
    if mode not in LABEL_MODES:
        problems.append(f"label.mode: must be one of {LABEL_MODES}, got {mode!r}")
    if mode == "ground-truth" and synth is None:
        problems.append("label.mode: ground-truth labeling requires a synth section")
    if mode == "reference":
        ref = label.get("reference")
        if not ref or not Path(ref).is_dir():
            problems.append("label.reference: must point to an existing atlas bundle directory")

    parcel = doc.get("parcellate", {})
    if not isinstance(parcel, dict):
        problems.append("parcellate: must be a mapping")
        parcel = {}
    threshold = parcel.get("threshold", DEFAULT_IDENTIFICATION_THRESHOLD)
    if not isinstance(threshold, int) or threshold < 1:
        problems.append("parcellate.threshold: must be a positive integer")
    if "registration" in parcel and parcel["registration"] is not None:
        _check_registration(parcel["registration"], "parcellate.registration", problems)

    stats = doc.get("stats", {})
    if not isinstance(stats, dict):
        problems.append("stats: must be a mapping")
        stats = {}
    response = stats.get("response", "mean_fa")
    if response not in RESPONSES:
        problems.append(f"stats.response: must be one of {RESPONSES}, got {response!r}")
    covs = stats.get("covariates", [])
    if not isinstance(covs, list) or not all(isinstance(c, str) for c in covs):
        problems.append("stats.covariates: must be a list of covariate names")
    over = stats.get("correct_over")
    if over is not None and (not isinstance(over, int) or over < 1):
        problems.append("stats.correct_over: must be a positive integer or null")

    run = doc.get("run", {})
    if not isinstance(run, dict):
        problems.append("run: must be a mapping")
        run = {}
    jobs = run.get("jobs", 1)
    if not isinstance(jobs, int) or jobs < 1:
        problems.append("run.jobs: must be a positive integer")

    return problems


def _build_registration(section) -> RegistrationConfig | None:
    if section is None:
        return None
    return RegistrationConfig(
        transform_family=TransformFamily(section.get("family", "rigid")),
        sigma_schedule=tuple(section.get("sigma_schedule", (30.0, 20.0, 10.0, 5.0))),
        fibers_per_subject_sample=section.get("fibers_per_subject_sample", 200),
        max_iters_per_scale=section.get("max_iters_per_scale", 10),
        convergence_tol=section.get("convergence_tol", 1e-4),
        seed=section.get("seed", 0),
        points_per_fiber=section.get("points_per_fiber", 15),
    )


def build_pipeline_config(doc: dict) -> PipelineConfig:
    """Typed config from a mapping; raises ConfigValidationError when invalid."""
    problems = validate_config(doc)
    if problems:
        raise ConfigValidationError(problems)

    synth_section = doc.get("synth")
    cohort = None
    if synth_section is not None:
        cohort = CohortSpec(
            bundles=default_desk_bundles(
                fiber_count=synth_section.get("fiber_count", 100)
            ),
            subjects=synth_section.get("subjects", 20),
            perturbation=PerturbationSpec(
                translation_mm=synth_section.get("translation_mm", 10.0),
                rotation_deg=synth_section.get("rotation_deg", 10.0),
                log_scale=synth_section.get("log_scale", 0.0),
            ),
            seed=synth_section.get("seed", 0),
        )

    inputs = doc.get("input") or {}
    atlas_sec = doc["atlas"]
    reg_section = atlas_sec.get("registration")
    atlas_cfg = AtlasBuildConfig(
        k=atlas_sec["k"],
        embedding_dims=atlas_sec.get("embedding_dims", 10),
        nystrom_sample_size=atlas_sec.get("nystrom_sample_size", 200),
        sigma=atlas_sec.get("sigma", 30.0),
        fibers_per_subject=atlas_sec.get("fibers_per_subject", 500),
        points_per_fiber=atlas_sec.get("points_per_fiber", 15),
        cluster_restarts=atlas_sec.get("cluster_restarts", 8),
        seed=atlas_sec.get("seed", 0),
        registration=_build_registration(reg_section),
    )

    label = doc.get("label", {})
    parcel = doc.get("parcellate", {})
    parcel_cfg = ParcellationConfig(
        registration=_build_registration(
            parcel.get("registration", reg_section)
        ),
    )
    stats = doc.get("stats", {})
    run = doc.get("run", {})
    return PipelineConfig(
        format_version=doc["format_version"],
        synth=cohort,
        input_paths=tuple(Path(p) for p in inputs.get("tractograms", [])),
        atlas=atlas_cfg,
        label_mode=label.get("mode", "ground-truth"),
        reference_path=Path(label["reference"]) if label.get("reference") else None,
        parcellation=parcel_cfg,
        threshold=parcel.get("threshold", DEFAULT_IDENTIFICATION_THRESHOLD),
        response=stats.get("response", "mean_fa"),
        covariates=tuple(stats.get("covariates", [])),
        correct_over=stats.get("correct_over"),
        jobs=run.get("jobs", 1),
    )


def default_config_mapping() -> dict:
    """The desk-scale default run, as a plain mapping (YAML-serializable)."""
    return {
        "format_version": CONFIG_FORMAT_VERSION,
        "run": {"jobs": 1},
        "synth": {
            "subjects": 20,
            "fiber_count": 100,
            "seed": 0,
            "translation_mm": 10.0,
            "rotation_deg": 10.0,
            "log_scale": 0.0,
        },
        "atlas": {
            "k": 8,
            "embedding_dims": 10,
            "nystrom_sample_size": 200,
            "sigma": 30.0,
            "fibers_per_subject": 400,
            "points_per_fiber": 15,
            "seed": 0,
            "registration": {
                "family": "rigid",
                "sigma_schedule": [15.0, 8.0],
                "fibers_per_subject_sample": 25,
                "max_iters_per_scale": 6,
                "convergence_tol": 1e-3,
                "seed": 0,
                "points_per_fiber": 10,
            },
        },
        "label": {"mode": "ground-truth"},
        "parcellate": {
            "threshold": DEFAULT_IDENTIFICATION_THRESHOLD,
            "registration": {
                "family": "rigid",
                "sigma_schedule": [15.0, 8.0],
                "fibers_per_subject_sample": 25,
                "max_iters_per_scale": 6,
                "convergence_tol": 1e-3,
                "seed": 0,
                "points_per_fiber": 10,
            },
        },
        "stats": {"response": "mean_fa", "covariates": []},
    }
