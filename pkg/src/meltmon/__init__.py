"""In-process monitoring for direct metal laser melting.

Photodiode streams are classified against per-index Gaussian process models
with a multiple-model hypothesis test, and part defect severity is predicted by
stepwise OLS on aggregated sensor features and laser parameters.
"""

from .errors import DataError, MeltmonError
from .mmht import (
    UNKNOWN,
    Classification,
    DefectMap,
    KernelSelection,
    KernelSpec,
    build_layer_kernel,
    build_part_kernels,
    build_square_kernels,
    calibrate_unknown_floor,
    classify_kernels,
    classify_layer,
    confusion_matrix,
    kernel_log_likelihood,
    log_likelihood_point,
    posteriors,
    unknown_log_likelihood,
)
from .process_models import ModelSet, ProcessModel, fit_model, load_model_set, model_params_at, save_model_set
from .quality_regression import (
    DefectRecord,
    DefectRegressor,
    PartFeatures,
    extract_part_features,
    predict_defect,
    r_squared,
    stepwise_ols,
    vif,
)
from .sensor_data import (
    PlateTrendMap,
    SensorSample,
    StrikeSegmentedStream,
    fit_plate_trend,
    normalize,
    segment_strikes,
)
from .simulator import BuildSpec, PartSpec, ProcessSpec, inject_local_anomaly, simulate_build

__version__ = "0.1.0"
