from . import ops
from .optim import AdamWState, adamw_step, cosine_lr
from .tensor import Parameter, Tensor, backward, grad_enabled, no_grad

__all__ = [
    "ops",
    "Tensor",
    "Parameter",
    "backward",
    "no_grad",
    "grad_enabled",
    "AdamWState",
    "adamw_step",
    "cosine_lr",
]
