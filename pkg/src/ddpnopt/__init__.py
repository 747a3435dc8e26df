"""DDPNOpt: neural-network training as layer-wise differential dynamic programming."""
from .errors import (ConfigError, DataError, DDPError, InfeasibleDimensionError, NumericalError,
                     ShapeError, UnsupportedModeError)
from .network import Activation, Affine, Conv, LayerSpec, NetworkSpec, mlp, simulate
from .losses import CrossEntropyLoss, MMCLoss, MSELoss, make_loss, make_mm_centers
from .ddp_core import DDPOptions, backward_pass, forward_pass
from .factorized import factored_backward_pass
from .preconditioners import AdaptiveDiag, DenseCurvature, Identity, KroneckerGN
from .optimizers import (AdamMethod, DDPNOptMethod, OptimizerConfig, RMSpropMethod, SGDMethod,
                         init_weights, make_optimizer, train)
from .data import Dataset, gaussian_clusters, load_csv
from .analysis import feedback_spectrum, leading_right_singular_vector, update_decomposition

__version__ = "0.1.0"
