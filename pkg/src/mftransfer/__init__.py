"""Mean-field transfer learning: MFLD training, generalization estimates and bounds."""
from .measures import DataSet, MixedDataView, ParticleCloud
from .mfnet import Activation, OuterLoss
from .priors import GibbsPrior, TiltedPrior
from .tasks import TaskSpec, gen_task
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "DataSet", "MixedDataView", "ParticleCloud", "Activation", "OuterLoss",
    "GibbsPrior", "TiltedPrior", "TaskSpec", "gen_task", "TrainConfig", "train",
]
