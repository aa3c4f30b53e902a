"""Patch-based statistical priors for disparity images.

Learned and hand-crafted densities over 8x8 disparity patches, optionally
conditioned on the aligned intensity patch, with posterior-mean and MAP
restoration, and a two-stage pipeline for denoising and hole filling on
full images.
"""

from .conditional import (
    Dl2IntModel,
    HmmModel,
    conditional_log_likelihood,
    conditional_log_likelihood_per_pixel,
)
from .core import (
    PATCH_SIDE,
    PATCH_SIZE,
    Channel,
    DcDecomposition,
    ImageGrid,
    Patch,
    PixelMask,
    extract_patches,
    patch_grid,
    reassemble_average,
    remove_dc,
    remove_dc_rows,
)
from .data import (
    SceneRecord,
    SyntheticSpec,
    collect_patch_pairs,
    generate_synthetic,
    generate_synthetic_images,
    load_dataset,
    load_image,
    load_scene,
    read_pfm,
    save_png,
    write_pfm,
    write_scene,
)
from .errors import (
    ConfigError,
    DataError,
    DegenerateComponentError,
    DepthPriorError,
    DimensionError,
    ModelFormatError,
    UncoveredPixelError,
)
from .evaluation import (
    BenchmarkRow,
    LogLikRow,
    corner_inpainting_spec,
    evaluate_denoising,
    evaluate_inpainting,
    evaluate_loglik,
    evaluate_restoration,
)
from .inference import (
    DegradationSpec,
    RestorationResult,
    bls_gaussian,
    bls_gmm,
    bls_gmm_batch,
    degrade,
    degrade_batch,
    map_dl1,
    map_gmm,
    psnr,
    restore_patches,
)
from .models import (
    Dl1Model,
    Dl2Model,
    GaussianModel,
    GmmModel,
    IdentityModel,
    dl1_energy,
    load_model,
    log_likelihood,
    log_likelihood_per_pixel,
    nats_to_bits,
    sample,
    save_model,
)
from .operators import (
    DerivativeOperator,
    IntensityWeights,
    PrecisionMatrix,
    build_derivative_operator,
    build_dl2_precision,
    build_dl2int_precision,
    build_intensity_weights,
)
from .pipeline import (
    GlobalSystem,
    HoleRegion,
    PipelineResult,
    RestorationJob,
    SolveResult,
    conjugate_gradient,
    find_holes,
    restore_image,
    restore_image_global,
    solve_global,
)
from .training import (
    DatasetSplit,
    TrainConfig,
    TrainResult,
    estimate_transition,
    split_components,
    train_gmm,
    train_gmm_sweep,
    train_hmm,
    tune_dl1,
    tune_dl2,
    tune_dl2int,
)

__version__ = "0.1.0"
