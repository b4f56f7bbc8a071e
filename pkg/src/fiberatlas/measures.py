"""Per-tract diffusion measures and the developmental statistics layer.

Measures are extracted per (subject, tract): streamline count plus
point-weighted means of the FA and MD channels.  The analysis layer fits
ordinary least squares developmental models (measure vs age, optional
mean-centered covariates), corrects across tracts with Bonferroni, runs
paired t-tests, and compares slopes between groups.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .parcellation import Parcellation
from .stats import ols_fit, student_t_ppf, student_t_two_sided_p
from .taxonomy import category_of, is_valid_tract_name
from .tractogram import FA_CHANNEL, MD_CHANNEL, Group, Sex, SubjectMeta, Tractogram

logger = logging.getLogger(__name__)

AGE_PREDICTOR = "age"


@dataclass(frozen=True)
class TractMeasureRow:
    """Measures for one (subject, tract) pair; means absent when empty."""

    subject_id: str
    tract: str
    nos: int
    mean_fa: float | None
    mean_md: float | None
    meta: SubjectMeta

    def __post_init__(self):
        if self.nos < 0:
            raise ValueError("NoS cannot be negative")
        if self.nos == 0 and (self.mean_fa is not None or self.mean_md is not None):
            raise ValueError("zero-fiber tract cannot carry mean measures")
        if self.mean_fa is not None and not 0.0 <= self.mean_fa <= 1.0:
            raise ValueError(f"mean FA out of [0,1]: {self.mean_fa}")

    def value(self, response: str) -> float | None:
        if response == "nos":
            return float(self.nos)
        if response == "mean_fa":
            return self.mean_fa
        if response == "mean_md":
            return self.mean_md
        raise ValueError(f"unknown response measure {response!r}")


@dataclass(frozen=True)
class TractMeasureTable:
    rows: tuple[TractMeasureRow, ...]

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))
        seen = set()
        for row in self.rows:
            key = (row.subject_id, row.tract)
            if key in seen:
                raise ValueError(f"duplicate measure row for {key}")
            seen.add(key)

    def __len__(self) -> int:
        return len(self.rows)

    def tracts(self) -> tuple[str, ...]:
        return tuple(sorted({r.tract for r in self.rows}))

    def for_tract(self, tract: str) -> tuple[TractMeasureRow, ...]:
        return tuple(r for r in self.rows if r.tract == tract)

    def merged_with(self, other: TractMeasureTable) -> TractMeasureTable:
        return TractMeasureTable(self.rows + other.rows)


def extract_measures(parc: Parcellation, subject: Tractogram) -> list[TractMeasureRow]:
    """One measure row per tract in the parcellation.

    Means are point-weighted: every point of every assigned fiber counts
    equally, matching a flat concatenation of the channel values.  MD is
    reported only when every assigned fiber carries it.
    """
    if parc.subject_id != subject.subject_id:
        raise ValueError("parcellation and tractogram belong to different subjects")
    if any(FA_CHANNEL not in s.scalars for s in subject.streamlines):
        raise ValueError(f"subject {subject.subject_id} is missing the FA channel")

    rows = []
    for tract in sorted(parc.tract_fibers):
        fiber_ids = parc.tract_fibers[tract]
        if len(fiber_ids) == 0:
            rows.append(
                TractMeasureRow(subject.subject_id, tract, 0, None, None, subject.meta)
            )
            continue
        fibers = [subject.streamlines[i] for i in fiber_ids]
        fa = np.concatenate([f.scalars[FA_CHANNEL] for f in fibers])
        mean_md = None
        if all(MD_CHANNEL in f.scalars for f in fibers):
            md = np.concatenate([f.scalars[MD_CHANNEL] for f in fibers])
            mean_md = float(md.mean())
        rows.append(
            TractMeasureRow(
                subject.subject_id, tract, len(fibers), float(fa.mean()),
                mean_md, subject.meta,
            )
        )
    return rows


@dataclass(frozen=True)
class GLMResult:
    """Age-slope fit for one tract's measure."""

    tract: str
    response: str
    beta: float
    intercept: float
    covariate_betas: dict[str, float]
    beta_se: float
    t_stat: float
    p_value: float
    ci_low: float
    ci_high: float
    n: int
    n_dropped: int
    p_bonferroni: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.p_value <= 1.0:
            raise ValueError(f"p value out of range: {self.p_value}")


def glm_fit(
    rows,
    response: str = "mean_fa",
    predictor: str = AGE_PREDICTOR,
    covariates: list[str] | None = None,
) -> GLMResult:
    """OLS of a tract measure on age with optional subject covariates.

    Covariates are mean-centered so the intercept reads as the expected
    response at age zero for an average subject; centering leaves the
    slope untouched.  Subjects missing the response or any covariate are
    dropped with a logged count.
    """
    rows = list(rows)
    if predictor != AGE_PREDICTOR:
        raise ValueError(f"unsupported predictor {predictor!r}")
    covariates = list(covariates or [])
    tract = rows[0].tract if rows else ""
    if any(r.tract != tract for r in rows):
        raise ValueError("glm_fit expects rows for a single tract")

    ys, ages, covs = [], [], []
    dropped = 0
    for r in rows:
        y = r.value(response)
        if y is None or any(c not in r.meta.covariates for c in covariates):
            dropped += 1
            continue
        ys.append(y)
        ages.append(r.meta.age_at_scan)
        covs.append([r.meta.covariates[c] for c in covariates])
    if dropped:
        logger.info("glm %s/%s: dropped %d of %d subjects", tract, response,
                    dropped, len(rows))

    n = len(ys)
    if n <= len(covariates) + 2:
        raise ValueError(
            f"need more than {len(covariates) + 2} usable subjects, have {n}"
        )
    y = np.array(ys)
    x = np.empty((n, 2 + len(covariates)))
    x[:, 0] = 1.0
    x[:, 1] = ages
    if covariates:
        c = np.array(covs)
        x[:, 2:] = c - c.mean(axis=0)

    names = ["intercept", AGE_PREDICTOR, *covariates]
    fit = ols_fit(x, y, names)
    if fit.perfect_fit:
        ci_low = ci_high = float(fit.beta[1])
    else:
        margin = student_t_ppf(0.975, fit.df_resid) * fit.se[1]
        ci_low, ci_high = float(fit.beta[1] - margin), float(fit.beta[1] + margin)
    return GLMResult(
        tract=tract,
        response=response,
        beta=float(fit.beta[1]),
        intercept=float(fit.beta[0]),
        covariate_betas={c: float(b) for c, b in zip(covariates, fit.beta[2:])},
        beta_se=float(fit.se[1]),
        t_stat=float(fit.t_stat[1]),
        p_value=float(fit.p_value[1]),
        ci_low=ci_low,
        ci_high=ci_high,
        n=n,
        n_dropped=dropped,
    )


def bonferroni(p_values, m: int) -> list[float]:
    """Classic correction: each p becomes min(1, p*m)."""
    p_values = list(p_values)
    if m < len(p_values):
        raise ValueError(f"test count {m} below list length {len(p_values)}")
    return [min(1.0, p * m) for p in p_values]


def fit_all_tracts(
    table: TractMeasureTable,
    response: str = "mean_fa",
    covariates: list[str] | None = None,
    correct_over: int | None = None,
) -> list[GLMResult]:
    """Per-tract developmental fits with Bonferroni across the tract set.

    ``correct_over`` overrides the correction count (e.g. the full
    taxonomy size when only a subset of tracts was measured).
    """
    results = [
        glm_fit(table.for_tract(t), response=response, covariates=covariates)
        for t in table.tracts()
    ]
    m = correct_over if correct_over is not None else len(results)
    corrected = bonferroni([r.p_value for r in results], m)
    return [replace(r, p_bonferroni=p) for r, p in zip(results, corrected)]


class TTestResult(NamedTuple):
    t: float
    df: int
    p: float


def paired_ttest(x, y) -> TTestResult:
    """Two-sided paired t-test on matched samples."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("paired t-test needs two equal-length 1-D samples")
    n = x.shape[0]
    if n < 3:
        raise ValueError("paired t-test needs at least 3 pairs")
    d = x - y
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        raise ValueError("degenerate paired sample: differences have zero variance")
    t = float(d.mean()) / (sd / np.sqrt(n))
    df = n - 1
    return TTestResult(t, df, student_t_two_sided_p(t, df))


@dataclass(frozen=True)
class GroupComparison:
    """Side-by-side per-tract slopes for two cohorts."""

    response: str
    betas_a: dict[str, float]
    betas_b: dict[str, float]
    category_means_a: dict[str, float]
    category_means_b: dict[str, float]
    excluded_tracts: tuple[str, ...]


def compare_groups(
    table_a: TractMeasureTable,
    table_b: TractMeasureTable,
    covariates: list[str] | None = None,
    response: str = "mean_fa",
) -> GroupComparison:
    """Fit the same developmental model in both groups, tract by tract.

    Tracts absent from either group are excluded and listed.  Category
    means average member-tract slopes for tracts named in the taxonomy.
    """
    tracts_a, tracts_b = set(table_a.tracts()), set(table_b.tracts())
    shared = sorted(tracts_a & tracts_b)
    excluded = tuple(sorted(tracts_a ^ tracts_b))
    if excluded:
        logger.info("group comparison excludes %d unshared tracts", len(excluded))
    if not shared:
        raise ValueError("no tract present in both groups")

    betas_a, betas_b = {}, {}
    for tract in shared:
        fa = glm_fit(table_a.for_tract(tract), response=response, covariates=covariates)
        fb = glm_fit(table_b.for_tract(tract), response=response, covariates=covariates)
        betas_a[tract] = fa.beta
        betas_b[tract] = fb.beta

    def category_means(betas: dict[str, float]) -> dict[str, float]:
        sums: dict[str, list[float]] = {}
        for tract, beta in betas.items():
            if is_valid_tract_name(tract):
                sums.setdefault(category_of(tract).value, []).append(beta)
        return {c: float(np.mean(v)) for c, v in sorted(sums.items())}

    return GroupComparison(
        response=response,
        betas_a=betas_a,
        betas_b=betas_b,
        category_means_a=category_means(betas_a),
        category_means_b=category_means(betas_b),
        excluded_tracts=excluded,
    )


MEASURE_CSV_COLUMNS = (
    "subject_id", "tract", "nos", "mean_fa", "mean_md",
    "age_at_scan", "sex", "group", "birth_age",
)


def write_measure_csv(table: TractMeasureTable, path: str | Path) -> None:
    """CSV with the documented fixed column order; covariates appended
    as cov_<name> columns sorted by name."""
    cov_names = sorted({c for r in table.rows for c in r.meta.covariates})
    header = list(MEASURE_CSV_COLUMNS) + [f"cov_{c}" for c in cov_names]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for r in table.rows:
            row = [
                r.subject_id, r.tract, r.nos,
                "" if r.mean_fa is None else repr(r.mean_fa),
                "" if r.mean_md is None else repr(r.mean_md),
                repr(r.meta.age_at_scan), r.meta.sex.value, r.meta.group.value,
                "" if r.meta.birth_age is None else repr(r.meta.birth_age),
            ]
            row += [
                "" if c not in r.meta.covariates else repr(r.meta.covariates[c])
                for c in cov_names
            ]
            writer.writerow(row)


GLM_CSV_COLUMNS = (
    "tract", "response", "beta", "intercept", "beta_se", "t_stat",
    "p_value", "p_bonferroni", "ci_low", "ci_high", "n", "n_dropped",
)


def write_glm_csv(results: list[GLMResult], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(GLM_CSV_COLUMNS)
        for r in results:
            writer.writerow([
                r.tract, r.response, repr(r.beta), repr(r.intercept),
                repr(r.beta_se), repr(r.t_stat), repr(r.p_value),
                "" if r.p_bonferroni is None else repr(r.p_bonferroni),
                repr(r.ci_low), repr(r.ci_high), r.n, r.n_dropped,
            ])


def write_glm_summary_json(
    results: list[GLMResult], covariates: list[str], path: str | Path
) -> None:
    doc = {
        "format": "glm-summary",
        "version": 1,
        "covariates": list(covariates),
        "n_tracts": len(results),
        "results": [
            {
                "tract": r.tract,
                "response": r.response,
                "beta": r.beta,
                "intercept": r.intercept,
                "covariate_betas": r.covariate_betas,
                "beta_se": r.beta_se,
                "p_value": r.p_value,
                "p_bonferroni": r.p_bonferroni,
                "ci": [r.ci_low, r.ci_high],
                "n": r.n,
            }
            for r in results
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def write_comparison_csv(comparison: GroupComparison, path: str | Path) -> None:
    """Tract rows first, then category-mean rows, then exclusions."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scope", "name", "beta_a", "beta_b"])
        for tract in sorted(comparison.betas_a):
            writer.writerow([
                "tract", tract,
                repr(comparison.betas_a[tract]), repr(comparison.betas_b[tract]),
            ])
        for cat in comparison.category_means_a:
            writer.writerow([
                "category", cat,
                repr(comparison.category_means_a[cat]),
                repr(comparison.category_means_b[cat]),
            ])
        for tract in comparison.excluded_tracts:
            writer.writerow(["excluded", tract, "", ""])


def read_measure_csv(path: str | Path) -> TractMeasureTable:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(
            reader.fieldnames[: len(MEASURE_CSV_COLUMNS)]
        ) != MEASURE_CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected measure CSV header")
        rows = []
        for rec in reader:
            covariates = {
                k[len("cov_"):]: float(v)
                for k, v in rec.items()
                if k.startswith("cov_") and v != ""
            }
            meta = SubjectMeta(
                age_at_scan=float(rec["age_at_scan"]),
                sex=Sex(rec["sex"]),
                group=Group(rec["group"]),
                birth_age=float(rec["birth_age"]) if rec["birth_age"] else None,
                covariates=covariates,
            )
            rows.append(
                TractMeasureRow(
                    subject_id=rec["subject_id"],
                    tract=rec["tract"],
                    nos=int(rec["nos"]),
                    mean_fa=float(rec["mean_fa"]) if rec["mean_fa"] else None,
                    mean_md=float(rec["mean_md"]) if rec["mean_md"] else None,
                    meta=meta,
                )
            )
    return TractMeasureTable(tuple(rows))
