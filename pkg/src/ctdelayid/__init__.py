"""Continuous-time transfer-function and time-delay estimation from sampled
data, using instrumental-variable iterations and a redundant multi-filter
search that escapes local minima of the delay cost."""

from .models import (
    CtModel,
    EstimationResult,
    ModelError,
    ParamVector,
    SampledDataset,
    StateSpace,
    bandwidth,
    reflect_unstable,
    tf_to_ss,
)
from .engine import (
    DiscretizationCache,
    Drive,
    EngineError,
    build_cache,
    choose_delta,
    drive_from_samples,
    expm_pair,
    filter_signal_delayed,
    hybrid_step,
    rk4_pair,
    run_filter,
    simulate_output,
    svf_derivatives,
)
from .signals import (
    ExcitationSpec,
    PrbsSignal,
    SamplingSpec,
    SignalError,
    make_dataset,
    prbs,
    sample_schedule,
)
from .filters import (
    FilterBank,
    beta_lower_bound,
    butterworth,
    convergence_radius,
    design_bank,
    extrema_locations,
    ideal_cost_curve,
    min_filter_count,
    predicted_basin_minimum,
)
from .srivc import (
    EstimationError,
    RegressionMatrices,
    default_skip_time,
    ls_init,
    srivc_estimate,
    srivc_iterate,
)
from .delay_gn import (
    GnConfig,
    estimate_with_filter,
    filtered_cost,
    gn_gradient_hessian,
)
from .redundancy import (
    RedundancyConfig,
    estimate,
    j0,
    normalized_fit,
    redundant_minimize_generic,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
