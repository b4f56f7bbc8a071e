"""Streamline atlas construction, parcellation, and developmental statistics.

The package covers the full path from raw tractograms to population
statistics: fiber distances and Gaussian affinities, groupwise streamline
registration, Nystrom spectral embedding with k-means clustering into an
annotated atlas, atlas-driven subject parcellation, per-tract diffusion
measures, and GLM-based developmental analyses.  A synthetic cohort
generator supplies verifiable ground truth throughout.
"""

from .atlas import (
    AnatomicalLabel,
    Atlas,
    AtlasBuildConfig,
    AtlasBuildError,
    AtlasBundleError,
    AtlasChecksumError,
    AtlasTruncatedError,
    AtlasVersionError,
    NotAnAtlasBundleError,
    build_atlas,
    load_atlas,
    save_atlas,
    transfer_labels,
    with_cluster_labels,
)
from .config import (
    ConfigParseError,
    ConfigValidationError,
    PipelineConfig,
    build_pipeline_config,
    default_config_mapping,
    load_config_mapping,
    validate_config,
)
from .embedding import (
    ClusterModel,
    NystromModel,
    RankDeficientAffinityError,
    assign,
    assign_fibers,
    cluster,
    embed,
    embed_fibers,
    fit_nystrom,
)
from .fileio import (
    TractogramFormatError,
    load_tractogram,
    read_tck,
    save_tractogram,
    write_tck,
)
from .measures import (
    GLMResult,
    GroupComparison,
    TractMeasureRow,
    TractMeasureTable,
    TTestResult,
    bonferroni,
    compare_groups,
    extract_measures,
    fit_all_tracts,
    glm_fit,
    paired_ttest,
    read_measure_csv,
    write_measure_csv,
)
from .metrics import (
    DistanceVariant,
    FiberDistanceParams,
    affinity,
    mcp,
    mcp_directed,
    mcp_matrix,
    pairwise_distance_matrix,
)
from .parcellation import (
    DEFAULT_IDENTIFICATION_THRESHOLD,
    IdentificationResult,
    Parcellation,
    ParcellationConfig,
    export_tract_tcks,
    identification_rate,
    identification_rate_table,
    identify,
    load_parcellation,
    mean_identification_rate,
    parcellate,
    read_ir_csv,
    save_parcellation,
    write_ir_csv,
)
from .pipeline import (
    StageError,
    ground_truth_cluster_names,
    ingest_cohort,
    output_checksums,
    run_pipeline,
    write_synth_cohort,
)
from .registration import (
    GroupRegistrationResult,
    RegistrationConfig,
    TransformFamily,
    group_objective,
    params_to_transform,
    register_group,
    register_to_atlas,
)
from .stats import (
    CollinearDesignError,
    OLSFit,
    ols_fit,
    regularized_incomplete_beta,
    student_t_cdf,
    student_t_ppf,
    student_t_two_sided_p,
)
from .synth import (
    BundleSpec,
    CohortSpec,
    PerturbationSpec,
    SubjectGroundTruth,
    default_desk_bundles,
    default_desk_cohort,
    generate_cohort,
    generate_subject,
    load_ground_truth,
    save_ground_truth,
)
from .taxonomy import (
    TRACT_NAMES,
    UNLABELED,
    TractCategory,
    category_of,
    hemisphere_of,
    is_valid_label,
    is_valid_tract_name,
    names_in_category,
)
from .tractogram import (
    DEFAULT_POINTS_PER_FIBER,
    FA_CHANNEL,
    MD_CHANNEL,
    AffineTransform,
    Group,
    Sex,
    Streamline,
    SubjectMeta,
    Tractogram,
    apply_transform,
    clean_streamlines,
    resample,
    resample_all,
    subsample,
    subsample_indices,
)

__version__ = "0.1.0"
