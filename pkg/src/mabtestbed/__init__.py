"""Contextual Thompson Sampling testbed: bandit core, simulation, evaluation,
log analytics and a personalization service."""

from .bandit import (
    ArmSet,
    ContextSchema,
    ContextVariable,
    EncodingError,
    FeatureEncoding,
    NoiseParams,
    ParameterError,
    PolicyTag,
    PosteriorState,
    arm_selection_probability,
    encode_features,
    init_posterior,
    noise_scale,
    sample_coefficients,
    select_arm_ts,
    select_arm_uniform,
    select_policy,
    update_posterior,
    update_posterior_batch,
)
from .logs import AssignmentLog, AssignmentRecord, LogParseError, read_log, scale_rating, write_csv
from .simulation import (
    TABLE_NOISE,
    RewardModel,
    TrialConfig,
    builtin_scenario,
    run_replications,
    run_trial,
    scenario_config,
)
from .evaluation import (
    EffectSpec,
    credible_interval,
    estimate_fpr,
    estimate_power,
    evaluate_scenario,
    reward_report,
)

__version__ = "0.1.0"
