"""BatchNorm optimization-landscape experiments on a small numpy autodiff core."""

__version__ = "0.1.0"

from .tensor_core import Graph, Rng, fd_grad, hvp  # noqa: E402
from .networks import NetworkState, build_dln, build_mlp  # noqa: E402
from .training import TrainConfig, train  # noqa: E402

__all__ = ["Graph", "Rng", "fd_grad", "hvp", "NetworkState", "build_dln", "build_mlp",
           "TrainConfig", "train", "__version__"]
