"""Bayesian spatial occupancy models on stream and river networks."""

from .covariance import (
    CovarianceMatrix,
    CovarianceSpec,
    Euclidean,
    Nugget,
    TailDown,
    TailUp,
    assemble,
    cholesky_lower,
    euclidean_exp,
    tail_down_exp,
    tail_up_exp,
    tail_up_weights,
)
from .model import (
    DesignMatrix,
    DetectionHistory,
    ModelState,
    OccupancyModel,
    Priors,
    occupancy_probabilities,
    site_log_likelihood,
)
from .network import (
    Connectivity,
    Edge,
    PairDistance,
    PairDistanceTable,
    SitePlacement,
    StreamNetwork,
    classify_pair,
    distance_tables,
    validate_network,
)
from .inference import SamplerConfig, ess_update_u, run_chains, rwm_update_hyper
from .diagnostics import ess, rhat
from .simulation import (
    SimulationDesign,
    generate_network,
    relative_bias,
    run_study,
    simulate_dataset,
)

__version__ = "0.1.0"
