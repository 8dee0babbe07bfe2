"""AFENet: adaptive frequency-enhanced segmentation on a small numpy autograd core."""
import os as _os

# Cap BLAS/OpenMP pools before numpy loads; 1 thread keeps reductions reproducible.
_threads = _os.environ.get("AFENET_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, _threads)

from .network import AfeNet, ModelConfig, build_model, desk_config, full_config  # noqa: E402
from .tensor import Tensor, backward, grad_check  # noqa: E402

__all__ = ["AfeNet", "ModelConfig", "Tensor", "backward", "build_model", "desk_config",
           "full_config", "grad_check"]
__version__ = "0.1.0"
