"""Data-driven optimal consensus tracking for leader-follower swarms.

Learns distributed tracking controllers for heterogeneous discrete-time
linear agents purely from measured input/output data (windowed
Q-learning with value iteration), and ships a model-based oracle suite
that verifies exact error reconstruction, Riccati equivalence,
convergence envelopes, closed-loop stability, and unilateral (Nash)
optimality of the learned policies.
"""
from .graph import Digraph, in_degree, is_strongly_connected, laplacian, neighbors
from .dynamics import (
    CostWeights,
    MasModel,
    SwarmState,
    error_output,
    error_system_matrices,
    rollout_cost,
    stage_cost,
    step,
    tracking_error,
)
from .estimator import (
    EstimatorMatrices,
    IoWindow,
    NotObservable,
    RankDeficient,
    build_block_matrices,
    build_estimator,
    observability_index,
    reconstruct_error,
)
from .qkernel import (
    KernelLayout,
    PolicyGains,
    QKernel,
    SingularCoupling,
    SingularGain,
    SwarmController,
    control,
    evaluate,
    extract_blocks,
    joint_controls,
    policy_gains,
)
from .learner import (
    LearnerConfig,
    LearningReport,
    RankDeficientData,
    Sample,
    collect_samples,
    policy_improvement,
    run,
    value_update,
)
from .oracle import (
    BoundCheckConfig,
    HypothesisViolated,
    NotConverged,
    StateValueKernel,
    check_nash,
    check_stability,
    check_vi_bounds,
    dare_solve,
    model_based_vi,
)
from .scenario import ParseError, Scenario, ValidationError, load_scenario

__version__ = "0.1.0"
