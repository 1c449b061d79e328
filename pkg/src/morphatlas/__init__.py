"""Diffeomorphic atlas building on periodic grids with pluggable priors."""

__version__ = "0.1.0"

from .atlas import (
    AtlasConfig,
    AtlasState,
    Cohort,
    atlas_energy,
    build_atlas,
    shrink_velocity,
    update_atlas,
)
from .errors import (
    DiffeomorphismError,
    MorphAtlasError,
    NonConvergenceError,
    ProviderError,
    ShapeMismatchError,
    VolumeFormatError,
    ZeroVarianceError,
)
from .flow import (
    IntegrationConfig,
    ShootResult,
    epdiff_rhs,
    geodesic_shoot,
    momentum_conservation_residual,
    svf_exponential,
)
from .grid import (
    DeformationPair,
    GridShape,
    ScalarImage,
    VectorField,
    compose_maps,
    interpolate,
    jacobian_determinant,
    warp_image,
)
from .io import (
    SynthConfig,
    load_cohort,
    read_volume,
    synthesize_cohort,
    write_volume,
)
from .priors import (
    FilePriorProvider,
    OraclePriorProvider,
    PriorRequest,
    PriorResponse,
    SubprocessPriorProvider,
    validate_provider,
)
from .registration import (
    RegistrationConfig,
    ncc,
    oracle_register,
    registration_energy,
)
from .spectral import (
    MetricConfig,
    MetricOperator,
    MomentumField,
    apply_K,
    apply_L,
    divergence,
    jacobian_matrix,
    sobolev_norm_sq,
)

__all__ = [name for name in dir() if not name.startswith("_")]
