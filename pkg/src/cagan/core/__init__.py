from . import tensor as ops
from .checkpoint import CheckpointError, file_sha256, load_tensors, save_tensors
from .nn import BatchNorm, Conv2d, Linear, Module, ModuleDict
from .optim import Adam, adam_step
from .rng import Rng, stream_id
from .tensor import Tensor, no_grad

__all__ = [
    "Adam", "BatchNorm", "CheckpointError", "Conv2d", "Linear", "Module", "ModuleDict",
    "Rng", "Tensor", "adam_step", "file_sha256", "load_tensors", "no_grad", "ops",
    "save_tensors", "stream_id",
]
