"""CW-pumped entanglement-based QKD: rate model, optimizer, simulator, estimation."""

__version__ = "0.1.0"

from .corrections import (DetectorBank, DetectorSpec, accidental_probability_exact,
                          bank_rate_report, basis_dependent_key_rates, deadtime_efficiency,
                          true_coincidence_probability_exact)
from .errors import (CWQKDError, EventGuardError, InsufficientDataError, NoPeakError,
                     NoSignalError, SchemaError, TruncationError, ZeroKeyError)
from .estimation import EstimatedParameters, estimate_all
from .model import (JitterModel, LinkParameters, OperatingPoint, RateBreakdown, qber,
                    rate_breakdown, secure_key_rate)
from .optimizer import Bounds, Optimum, SweepSpec, optimize_operating_point, sweep_loss_curve
from .simulator import (Histogram, SimulationConfig, build_histogram, count_coincidences,
                        generate_tag_streams)
from .tagstream import TagStream

__all__ = [
    "DetectorBank", "DetectorSpec", "accidental_probability_exact", "bank_rate_report",
    "basis_dependent_key_rates", "deadtime_efficiency", "true_coincidence_probability_exact",
    "CWQKDError", "EventGuardError", "InsufficientDataError", "NoPeakError", "NoSignalError",
    "SchemaError", "TruncationError", "ZeroKeyError", "EstimatedParameters", "estimate_all",
    "JitterModel", "LinkParameters", "OperatingPoint", "RateBreakdown", "qber",
    "rate_breakdown", "secure_key_rate", "Bounds", "Optimum", "SweepSpec",
    "optimize_operating_point", "sweep_loss_curve", "Histogram", "SimulationConfig",
    "build_histogram", "count_coincidences", "generate_tag_streams", "TagStream",
]
