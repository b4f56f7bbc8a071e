"""Config-driven end-to-end runs with a resumable, checksummed manifest.

Stages execute in a fixed order (cohort, atlas-build, label, parcellate,
measure, stats); each records its outputs and their SHA-256 digests in the
run manifest as it completes.  Re-running with the same config skips
stages whose outputs are still intact, so interrupted runs pick up where
they stopped.  Outputs are deterministic functions of the config, which
makes two independent runs byte-comparable.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .atlas import Atlas, build_atlas, load_atlas, save_atlas, transfer_labels, with_cluster_labels
from .config import PipelineConfig, build_pipeline_config
from .fileio import load_tractogram, save_tractogram
from .measures import (
    TractMeasureTable,
    compare_groups,
    extract_measures,
    fit_all_tracts,
    read_measure_csv,
    write_comparison_csv,
    write_glm_csv,
    write_glm_summary_json,
    write_measure_csv,
)
from .parcellation import (
    identification_rate_table,
    identify,
    load_parcellation,
    parcellate,
    save_parcellation,
    write_ir_csv,
)
from .synth import generate_cohort, load_ground_truth, save_ground_truth
from .taxonomy import UNLABELED
from .tractogram import Sex

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
RUN_FORMAT = "pipeline-run"
RUN_VERSION = 1

STAGE_ORDER = ("cohort", "atlas-build", "label", "parcellate", "measure", "stats")


class StageError(RuntimeError):
    """A pipeline stage failed; partial outputs are left in place."""

    def __init__(self, stage: str, cause: BaseException, subject_id: str | None = None):
        self.stage = stage
        self.subject_id = subject_id
        who = f" (subject {subject_id})" if subject_id else ""
        super().__init__(f"stage {stage!r} failed{who}: {cause}")


@dataclass
class _RunContext:
    cfg: PipelineConfig
    root: Path
    plot_data: bool

    @property
    def cohort_dir(self) -> Path:
        return self.root / "cohort"

    @property
    def atlas_dir(self) -> Path:
        return self.root / "atlas"

    @property
    def labeled_atlas_dir(self) -> Path:
        return self.root / "atlas-labeled"

    @property
    def parcel_dir(self) -> Path:
        return self.root / "parcellations"

    @property
    def stats_dir(self) -> Path:
        return self.root / "stats"

    @property
    def plot_dir(self) -> Path:
        return self.root / "plot-data"


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(doc: dict) -> str:
    """Digest of the output-determining config sections.

    The ``run`` section (jobs, logging) controls execution mechanics, not
    results, so overriding it never invalidates a resumable run.
    """
    doc = {k: v for k, v in doc.items() if k != "run"}
    return hashlib.sha256(
        json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def _collect(ctx: _RunContext, paths: list[Path]) -> dict[str, str]:
    return {
        str(p.relative_to(ctx.root)): _sha256(p) for p in sorted(paths)
    }


def _subject_files(ctx: _RunContext) -> list[Path]:
    return sorted(ctx.cohort_dir.glob("*.tck"))


def _load_cohort(ctx: _RunContext):
    return [load_tractogram(p) for p in _subject_files(ctx)]


def _persist_subject(tractogram, out_dir: Path) -> list[Path]:
    sid = tractogram.subject_id
    save_tractogram(out_dir / f"{sid}.tck", tractogram)
    return [
        out_dir / f"{sid}.tck",
        out_dir / f"{sid}.json",
        out_dir / f"{sid}.scalars.bin",
    ]


def write_synth_cohort(spec, out_dir) -> list[Path]:
    """Generate and save a synthetic cohort with its truth sidecars."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for tractogram, truth in generate_cohort(spec):
        written += _persist_subject(tractogram, out_dir)
        truth_path = out_dir / f"{tractogram.subject_id}.truth.json"
        save_ground_truth(truth, truth_path)
        written.append(truth_path)
    return written


def ingest_cohort(paths, out_dir) -> list[Path]:
    """Validate external tractograms and normalize them into one directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    seen: set[str] = set()
    for p in paths:
        tractogram = load_tractogram(p)
        if tractogram.subject_id in seen:
            raise ValueError(f"duplicate subject id {tractogram.subject_id!r}")
        seen.add(tractogram.subject_id)
        written += _persist_subject(tractogram, out_dir)
    return written


def _stage_cohort(ctx: _RunContext) -> list[Path]:
    if ctx.cfg.synth is not None:
        return write_synth_cohort(ctx.cfg.synth, ctx.cohort_dir)
    return ingest_cohort(ctx.cfg.input_paths, ctx.cohort_dir)


def _stage_atlas_build(ctx: _RunContext) -> list[Path]:
    cohort = _load_cohort(ctx)
    atlas = build_atlas(cohort, ctx.cfg.atlas)
    save_atlas(atlas, ctx.atlas_dir)
    return [ctx.atlas_dir / "manifest.json", ctx.atlas_dir / "arrays.bin"]


def ground_truth_cluster_names(atlas: Atlas, cohort_dir) -> list[str]:
    """Per-cluster majority of the generator's true fiber labels.

    The build provenance records which original fiber each pooled training
    fiber came from; the truth sidecars supply that fiber's bundle label.
    """
    cohort_dir = Path(cohort_dir)
    prov = atlas.provenance
    subject_ids = prov["subject_ids"]
    sample_indices = prov["subject_sample_indices"]
    assignments = prov["training_cluster_assignments"]

    truth_labels = {}
    for sid in subject_ids:
        truth = load_ground_truth(cohort_dir / f"{sid}.truth.json")
        truth_labels[sid] = truth.fiber_labels

    pooled_labels: list[str] = []
    for sid, indices in zip(subject_ids, sample_indices):
        labels = truth_labels[sid]
        pooled_labels.extend(labels[i] for i in indices)
    if len(pooled_labels) != len(assignments):
        raise ValueError(
            "provenance inconsistency: pooled fiber count does not match "
            "training assignments"
        )

    votes: list[Counter] = [Counter() for _ in range(atlas.n_clusters)]
    for cluster_idx, label in zip(assignments, pooled_labels):
        votes[cluster_idx][label] += 1
    names = []
    for counter in votes:
        if not counter:
            names.append(UNLABELED)
            continue
        # deterministic majority: largest count, then lexicographic
        best = sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]
        names.append(best)
    return names


def _stage_label(ctx: _RunContext) -> list[Path]:
    atlas = load_atlas(ctx.atlas_dir)
    if ctx.cfg.label_mode == "ground-truth":
        names = ground_truth_cluster_names(atlas, ctx.cohort_dir)
        labeled = with_cluster_labels(atlas, names)
    else:
        reference = load_atlas(ctx.cfg.reference_path)
        labeled = transfer_labels(atlas, reference)
    save_atlas(labeled, ctx.labeled_atlas_dir)
    return [ctx.labeled_atlas_dir / "manifest.json", ctx.labeled_atlas_dir / "arrays.bin"]


def _stage_parcellate(ctx: _RunContext) -> list[Path]:
    atlas = load_atlas(ctx.labeled_atlas_dir)
    files = _subject_files(ctx)
    ctx.parcel_dir.mkdir(parents=True, exist_ok=True)

    def one(path: Path) -> Path:
        tractogram = load_tractogram(path)
        try:
            t0 = time.perf_counter()
            parc = parcellate(tractogram, atlas, ctx.cfg.parcellation)
            out = ctx.parcel_dir / f"{tractogram.subject_id}.parcellation.json"
            save_parcellation(parc, out)
            logger.info(
                "stage=parcellate subject=%s wall=%.2fs",
                tractogram.subject_id, time.perf_counter() - t0,
            )
            return out
        except Exception as exc:
            raise StageError("parcellate", exc, subject_id=tractogram.subject_id) from exc

    if ctx.cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=ctx.cfg.jobs) as pool:
            return list(pool.map(one, files))
    return [one(p) for p in files]


def _stage_measure(ctx: _RunContext) -> list[Path]:
    rows = []
    for path in _subject_files(ctx):
        tractogram = load_tractogram(path)
        parc = load_parcellation(
            ctx.parcel_dir / f"{tractogram.subject_id}.parcellation.json"
        )
        rows.extend(extract_measures(parc, tractogram))
    table = TractMeasureTable(tuple(rows))
    out = ctx.root / "measures.csv"
    write_measure_csv(table, out)
    return [out]


def _stage_stats(ctx: _RunContext) -> list[Path]:
    ctx.stats_dir.mkdir(parents=True, exist_ok=True)
    outputs: list[Path] = []
    table = read_measure_csv(ctx.root / "measures.csv")

    results = fit_all_tracts(
        table,
        response=ctx.cfg.response,
        covariates=list(ctx.cfg.covariates),
        correct_over=ctx.cfg.correct_over,
    )
    glm_csv = ctx.stats_dir / "glm.csv"
    write_glm_csv(results, glm_csv)
    summary = ctx.stats_dir / "glm_summary.json"
    write_glm_summary_json(results, list(ctx.cfg.covariates), summary)
    outputs += [glm_csv, summary]

    parcs = [
        load_parcellation(p)
        for p in sorted(ctx.parcel_dir.glob("*.parcellation.json"))
    ]
    identifications = [identify(p, ctx.cfg.threshold) for p in parcs]
    ir_csv = ctx.stats_dir / "ir.csv"
    write_ir_csv(identifications, ir_csv)
    outputs.append(ir_csv)

    by_sex = _split_by_sex(table)
    comparison = None
    if by_sex is not None:
        comparison = compare_groups(
            by_sex[0], by_sex[1], covariates=list(ctx.cfg.covariates),
            response=ctx.cfg.response,
        )
        compare_csv = ctx.stats_dir / "compare.csv"
        write_comparison_csv(comparison, compare_csv)
        outputs.append(compare_csv)
    else:
        logger.info(
            "stage=stats group comparison skipped: need 3+ subjects of each sex"
        )

    if ctx.plot_data:
        outputs += _write_plot_data(ctx, table, results, parcs, comparison)
    return outputs


def _split_by_sex(table: TractMeasureTable):
    female = [r for r in table.rows if r.meta.sex is Sex.FEMALE]
    male = [r for r in table.rows if r.meta.sex is Sex.MALE]
    # the per-group fit needs at least 3 subjects on each side
    if len({r.subject_id for r in female}) < 3 or len({r.subject_id for r in male}) < 3:
        return None
    return TractMeasureTable(tuple(female)), TractMeasureTable(tuple(male))


def write_scatter_csv(table: TractMeasureTable, path) -> None:
    """Raw (age, mean FA) points per tract, for measure-vs-age scatters."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "tract", "age_at_scan", "mean_fa"])
        for r in table.rows:
            if r.mean_fa is not None:
                writer.writerow(
                    [r.subject_id, r.tract, repr(r.meta.age_at_scan), repr(r.mean_fa)]
                )


def write_beta_csv(results, path) -> None:
    """Per-tract age slopes with confidence bounds, for slope charts."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tract", "beta", "ci_low", "ci_high", "p_bonferroni"])
        for r in results:
            writer.writerow([
                r.tract, repr(r.beta), repr(r.ci_low), repr(r.ci_high),
                "" if r.p_bonferroni is None else repr(r.p_bonferroni),
            ])


def write_ir_threshold_csv(parcs, path, thresholds=(5, 10, 15)) -> None:
    """Identification rates side by side across thresholds."""
    tables = {
        t: identification_rate_table([identify(p, t) for p in parcs])
        for t in thresholds
    }
    tracts = sorted(tables[thresholds[0]])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tract"] + [f"ir_threshold_{t}" for t in thresholds])
        for tract in tracts:
            writer.writerow([tract] + [repr(tables[t][tract]) for t in thresholds])


def _write_plot_data(ctx, table, results, parcs, comparison) -> list[Path]:
    """Per-figure CSVs: scatter, slopes, IRs across thresholds, group betas."""
    ctx.plot_dir.mkdir(parents=True, exist_ok=True)
    written = []

    scatter = ctx.plot_dir / "fa_age_scatter.csv"
    write_scatter_csv(table, scatter)
    written.append(scatter)

    betas = ctx.plot_dir / "age_beta_by_tract.csv"
    write_beta_csv(results, betas)
    written.append(betas)

    ir_path = ctx.plot_dir / "ir_by_tract.csv"
    write_ir_threshold_csv(parcs, ir_path)
    written.append(ir_path)

    if comparison is not None:
        betas_path = ctx.plot_dir / "sex_group_betas.csv"
        write_comparison_csv(comparison, betas_path)
        written.append(betas_path)
    return written


_STAGES = {
    "cohort": _stage_cohort,
    "atlas-build": _stage_atlas_build,
    "label": _stage_label,
    "parcellate": _stage_parcellate,
    "measure": _stage_measure,
    "stats": _stage_stats,
}


def _fresh_manifest(doc: dict) -> dict:
    return {
        "format": RUN_FORMAT,
        "version": RUN_VERSION,
        "config_hash": config_hash(doc),
        "config": doc,
        "stages": {},
    }


def _stage_intact(ctx: _RunContext, record: dict) -> bool:
    if record.get("status") != "done":
        return False
    for rel, digest in record.get("outputs", {}).items():
        path = ctx.root / rel
        if not path.is_file() or _sha256(path) != digest:
            return False
    return True


def run_pipeline(
    doc: dict,
    out_dir: str | Path,
    plot_data: bool = False,
    force: bool = False,
) -> Path:
    """Execute every stage; returns the manifest path.

    ``doc`` is the raw config mapping (already parsed); it is validated
    here before any compute.  An existing run directory resumes if its
    manifest carries the same config hash, unless ``force`` restarts.
    """
    cfg = build_pipeline_config(doc)
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    manifest_path = root / MANIFEST_NAME

    manifest = None
    if manifest_path.is_file() and not force:
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
        if manifest.get("config_hash") != config_hash(doc):
            raise ValueError(
                f"{root} holds a run with a different config; "
                "use force to restart it"
            )
    if manifest is None:
        manifest = _fresh_manifest(doc)

    ctx = _RunContext(cfg=cfg, root=root, plot_data=plot_data)
    for name in STAGE_ORDER:
        record = manifest["stages"].get(name, {})
        if _stage_intact(ctx, record):
            logger.info("stage=%s skipped (outputs intact)", name)
            continue
        t0 = time.perf_counter()
        try:
            outputs = _STAGES[name](ctx)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc
        duration = time.perf_counter() - t0
        manifest["stages"][name] = {
            "status": "done",
            "duration_s": duration,
            "outputs": _collect(ctx, outputs),
        }
        with open(manifest_path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2)
            fh.write("\n")
        logger.info("stage=%s wall=%.2fs outputs=%d", name, duration, len(outputs))
    return manifest_path


def output_checksums(manifest_path: str | Path) -> dict[str, str]:
    """Flat relpath -> digest map over all stages, for run comparison."""
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    merged: dict[str, str] = {}
    for record in manifest["stages"].values():
        merged.update(record.get("outputs", {}))
    return merged
