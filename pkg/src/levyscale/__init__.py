"""Averaging experiments for slow-fast systems driven by alpha-stable Levy noise."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ArgumentError,
    BlowUpError,
    CapacityError,
    ConfigurationError,
    IllConditionedError,
    LevyscaleError,
    ModelError,
    NumericalError,
    ParameterError,
    PrerequisiteError,
    ScheduleError,
)
from .noise import (  # noqa: E402
    RngStream,
    StableNoiseSpec,
    empirical_cf_check,
    increment_sequence,
    isotropic_stable_increment,
    levy_measure_constant,
    stable_increment_1d,
)
from .model import (  # noqa: E402
    DEFAULT_SCHEDULES,
    ModelSpec,
    ScaleSchedule,
    make_linear_benchmark,
    make_model,
    make_schedule,
    make_sine_benchmark,
    validate_structural_conditions,
)
from .integrator import simulate_averaged, simulate_coupled, simulate_frozen  # noqa: E402
from .ergodics import (  # noqa: E402
    FrozenEnsemble,
    contraction_diagnostic,
    estimate_bbar,
    mixing_diagnostic,
    sample_invariant,
    uniform_moment_scan,
)
from .corrector import (  # noqa: E402
    averaged_corrector,
    estimate_grad_u,
    estimate_u,
    fractional_laplacian_1d,
    poisson_residual,
)
from .stats import fit_rate, median_of_means  # noqa: E402
from .harness import (  # noqa: E402
    ExperimentConfig,
    ErrorReport,
    run_strong_experiment,
    run_weak_experiment,
    theoretical_predictor,
)
