from .net import MlpNet, MultiHeadNet
from .optim import Adam, Sgd, TargetNetwork
from .replay import ReplayBuffer, collect_fixed_batch
from .agents import Method, cdqn_update, dqn_update, loss_penalty_update, msc_update, reward_shaping_update
from .evaluation import EvaluationMetrics, evaluate_policy
