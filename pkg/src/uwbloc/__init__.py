"""UWB TOA localization testbed with NLOS bias modeling and mitigation.

Pipeline: synthetic waveform corpus -> feature extraction -> joint
(bias, feature) density estimation -> LS / ML / iterative localization ->
Monte-Carlo RMSE benchmark over the LOS probability.
"""

from .constants import SPEED_OF_LIGHT
from .corpus import (
    ChannelState,
    CorpusConfig,
    WaveformRecord,
    draw_bias,
    generate_corpus,
    generate_waveform,
    load_corpus,
    save_corpus,
)
from .density import (
    Axis,
    DensityModel,
    FittedLos,
    FittedNlos,
    HistogramGrid,
    build_histogram,
    convolve_bias_axis,
    estimate_density_model,
    evaluate_likelihood,
    fit_analytic,
    interpolate_smooth,
)
from .errors import (
    CorpusFormatError,
    CorpusVersionError,
    DegenerateLikelihoodError,
    DegenerateSignalError,
)
from .features import (
    DistanceFreeFeatures,
    FeatureModelParams,
    FeatureVector,
    correlation_coefficient,
    delay_spread,
    energy,
    extract_all,
    fit_feature_models,
    kurtosis,
    max_amplitude,
    mean_excess_delay,
    rise_time,
    to_distance_free,
)
from .harness import (
    ExperimentConfig,
    TrialResult,
    build_experiment,
    place_anchor,
    run_trial,
    sweep,
)
from .localize import (
    BiasCorrection,
    GridSpec,
    PositionEstimate,
    Scenario,
    iterative_bias_correct,
    ls_localize,
    ml_it_localize,
    ml_localize,
    ve_localize,
)
from .modelio import load_density_model, save_density_model
from .ranging import NoiseModel, RangingObservation, noise_stddev, simulate_toa, threshold_toa

__version__ = "0.1.0"
