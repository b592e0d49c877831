"""Test-time-training fast-weight layers and their linear-attention forms."""

from .errors import (
    BadVariant,
    EquivalenceError,
    IncompatibleMode,
    IndexOrder,
    IoFailure,
    ScheduleLengthMismatch,
    ShapeMismatch,
    TTTError,
    UnknownSuite,
    UnsupportedConfig,
    ZeroGradient,
)
from .fastweight import (
    Chunk,
    FastWeightConfig,
    FastWeightState,
    Trajectory,
    UpdateSchedule,
    grads_chunk,
    init_state,
    random_chunks,
    recurrent_forward,
    split_chunks,
    swiglu_forward,
)
from .linear_form import (
    EffectiveTerm,
    LinearState,
    effective_terms_from_trajectory,
    linear_eval,
    rebuild_outputs,
    variant6_attention,
)
from .numerics import ns_orthogonalize, row_l2_normalize, silu
from .parallel import (
    ParallelPlan,
    demonstrate_non_associativity,
    parallel_forward,
    parallel_forward_bilinear,
    parallel_forward_scan,
)
from .variants import reduction_report, run_variant, variant_config

__version__ = "0.1.0"
