"""Meta-trained recurrent black-box optimizers.

Train an LSTM query policy by gradient descent on functions drawn from a
Gaussian-process prior, then run it as a derivative-free optimizer next to
random-search and GP expected-improvement baselines.
"""

__version__ = "0.1.0"

from .gp import GpSampleFunction, Kernel, Posterior, expected_improvement, posterior_at
from .policy import (
    LstmPolicy,
    PolicyState,
    SearchSpace,
    load_checkpoint,
    propose_eval,
    save_checkpoint,
)
from .trajectory import Trajectory
from .training import AdamState, LossKind, TrainConfig, adam_step, rollout_loss, train

__all__ = [
    "AdamState",
    "GpSampleFunction",
    "Kernel",
    "LossKind",
    "LstmPolicy",
    "PolicyState",
    "Posterior",
    "SearchSpace",
    "TrainConfig",
    "Trajectory",
    "adam_step",
    "expected_improvement",
    "load_checkpoint",
    "posterior_at",
    "propose_eval",
    "rollout_loss",
    "save_checkpoint",
    "train",
]
