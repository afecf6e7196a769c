"""Information-theoretic credit assignment measures for tabular finite-horizon MDPs.

Exact results come from enumerating every positive-probability trajectory;
larger problems fall back to a categorical return recursion or to seeded
Monte Carlo plug-in estimates.  Information quantities are in nats.
"""
from .credit import (
    MEASURES,
    CreditReport,
    PropositionVerdict,
    check_propositions,
    credit_reports,
    directed_info_credit,
    epsilon_sparsity_classify,
    hca_credit,
    hindsight_table,
    history_cmi,
    information_sparsity,
    leave_one_out_cmi,
    pairwise_credit,
    pairwise_table,
    return_sequence_mi,
    stepwise_reward_entropy,
)
from .engine import (
    BudgetExceededError,
    ReturnDist,
    TrajectoryTable,
    categorical_return_dp,
    enumerate_trajectories,
    occupancy,
    return_distribution,
    value_functions,
)
from .estimators import ExactCreditAnalyzer, PluginCreditEstimator
from .info import InformationError, JointTable, conditional_entropy, conditional_mi, kl, mutual_information
from .mdp import (
    ConstantOffset,
    InvalidMdpError,
    Mdp,
    NegatedDistance,
    PolicySet,
    PotentialBased,
    TabularPolicy,
    apply_shaping,
    load_mdp,
    make_bandit,
    make_chain,
    make_gridworld,
    random_mdp,
    save_mdp,
    uniform_policy,
)
from .sampling import SampleBatch, convergence_sweep, plugin_measures, sample_trajectories

__version__ = "0.1.0"
