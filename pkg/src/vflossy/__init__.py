"""Universal variable-to-fixed length lossy source coding."""

from .errors import (
    BudgetError,
    CapacityError,
    ConvergenceError,
    GradientMismatchError,
    InfeasibleError,
    IntegrityError,
    QuantizationError,
    ValidationError,
    VFLossyError,
)
from .rd_core import (
    DistortionSpec,
    Pmf,
    RDResult,
    RDSensitivity,
    dball_log_measure,
    operational_rate,
    rate_distortion,
    rd_sensitivity,
)
from .typespace import TypeClass, empirical_lossy_rate, enumerate_types, is_transitional, transitional_set
from .covering import Covering, cover_exact, cover_randomized, covering_rate_report
from .dictionary import (
    BuildConfig,
    Dictionary,
    DictionaryBuilder,
    DictionaryStore,
    build_dictionary,
    choose_gamma,
    load,
    save,
)
from .codec import ParseResult, Parser, decode, encode_stream, parse_first
from .analysis import (
    BoundInputs,
    TrialRecord,
    epsilon_coding_rate,
    extension_rate_delta_scan,
    overflow_probability,
    sample_stream,
    theorem_bound,
    type_deviation_mass,
)

__version__ = "0.1.0"
