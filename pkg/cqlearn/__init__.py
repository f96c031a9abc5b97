from cqlearn.mdp import ConstraintSpec, FiniteMdp, extract_policy_spe, safe_set
from cqlearn.planning import brute_force_constrained_optimum, constrained_policy_iteration
from cqlearn.tabular import Algorithm, run_tabular_training
from cqlearn.envs.mdps import build_fig3_mdp, build_tree_mdp
from cqlearn.version import __version__
