"""Reverse-mode autodiff over float32 numpy arrays, with 3D conv-net ops."""

from dataclasses import dataclass

from .functional import box_sum3d, channel_stats, conv3d, maxpool3d, upsample_nearest3d
from .gradcheck import check_gradients
from .tensor import (
    DTYPE,
    Op,
    Tensor,
    add,
    as_tensor,
    backward,
    build_tape,
    div,
    is_grad_enabled,
    mean,
    mul,
    neg,
    no_grad,
    power,
    precision,
    relu,
    reshape,
    sqrt,
    square,
    sub,
    tabs,
    tsum,
)


@dataclass(eq=False)
class Parameter:
    """A named trainable tensor."""

    name: str
    tensor: Tensor

    def __post_init__(self):
        self.tensor.requires_grad = True
        self.tensor.name = self.name


__all__ = [
    "DTYPE",
    "Op",
    "Parameter",
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "box_sum3d",
    "build_tape",
    "channel_stats",
    "check_gradients",
    "conv3d",
    "div",
    "is_grad_enabled",
    "maxpool3d",
    "mean",
    "mul",
    "neg",
    "no_grad",
    "power",
    "precision",
    "relu",
    "reshape",
    "sqrt",
    "square",
    "sub",
    "tabs",
    "tsum",
    "upsample_nearest3d",
]
