from .traffic import HighwayAction, HighwayState, Vehicle
from .idm import IdmParams, idm_acceleration
from .mdps import TreeMdpParams, build_fig3_mdp, build_tree_mdp
