"""Grid-world multi-agent order dispatching: simulator, action-selection
value network with distribution-matching regularization, baselines and an
experiment harness."""

from .domain import (
    ConfigError,
    ContractViolation,
    DomainError,
    FeatureCodec,
    GridTopology,
    Observation,
    Order,
    TopologyKind,
    Vehicle,
    neighbors,
    virtual_order,
)
from .env import EnvConfig, OrderDispatchEnv, StepOutcome, advance_mu
from .klmatch import (
    DispatchFlow,
    FlowDerived,
    GridDistribution,
    experience_kl_coefficient,
    kl_divergence,
    kl_policy_gradient,
    smooth,
    vehicle_distribution,
)
from .policies import (
    AssignmentMatrix,
    BoltzmannPolicy,
    GridDecision,
    boltzmann_probs,
    hungarian_match,
    nod_policy,
    select_orders_for_grid,
    top_m_match,
)
from .qnet import ArchSpec, OptimizerState, QNetworkParams, forward, backward, init_params, soft_update
from .trainer import Experience, ReplayBuffer, Trainer, TrainerConfig, compute_target, loss_gradients, sample_batch
from .harness import ExperimentSpec, ResultRow, aggregate, emit_plots, report, run_cell, run_experiment

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
