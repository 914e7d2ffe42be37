"""Cell-free and user-centric multi-antenna MIMO simulator with SLM power control."""

from ._validation import ParameterError
from .association import (
    AssociationMap,
    IllConditionedWarning,
    ServingClusterer,
    build_association,
    build_beamformers,
)
from .geometry import (
    ChannelSet,
    LargeScaleGains,
    NetworkTopology,
    PathLossParams,
    draw_channels,
    large_scale_gains,
    path_loss_db,
    path_loss_matrix,
    place_nodes,
    shadowing_field,
    torus_distance,
)
from .optimize import (
    DownlinkPowerControl,
    OptimizationTrace,
    SolverConfig,
    UplinkPowerControl,
    project_capped_simplex,
    slm_min_rate_dl,
    slm_min_rate_ul,
    slm_sum_rate_dl,
    slm_sum_rate_ul,
    solve_concave_block,
    solve_maxmin_block,
    uniform_dl,
    uniform_ul,
)
from .rates import (
    DlEffectiveChannels,
    PowerAllocation,
    UlEffectiveChannels,
    dl_effective_channels,
    dl_rates,
    ul_effective_channels,
    ul_rates,
)
from .simulate import (
    ConfigError,
    RateReport,
    SimulationConfig,
    emit_results,
    run_campaign,
    run_drop,
)
from .training import (
    NoiseModel,
    PilotBook,
    estimate_channels,
    generate_pilots,
    noise_variance,
    pm_estimate,
    training_observation,
)

__version__ = "0.1.0"
