"""Dense tensor engine with reverse-mode autodiff and double backward."""

from .tensor import (
    DEFAULT_DTYPE,
    GraphFreedError,
    NumericDomainError,
    ShapeError,
    Tensor,
    UnsupportedOpError,
    backward,
    collect_graph_ops,
    enable_grad,
    is_grad_enabled,
    no_grad,
)
from . import ops
from .ops import CERTIFIED_SECOND_ORDER, OP_REGISTRY, as_tensor, ones, zeros
from .gradcheck import (
    finite_diff_check,
    grad_norm_sq,
    run_op_suite,
    run_second_order_suite,
    second_order_check,
)
from .serialize import (
    SerializationError,
    load_tensor,
    read_checkpoint,
    read_tensor,
    save_tensor,
    write_checkpoint,
    write_tensor,
)

__all__ = [
    "DEFAULT_DTYPE",
    "GraphFreedError",
    "NumericDomainError",
    "ShapeError",
    "Tensor",
    "UnsupportedOpError",
    "backward",
    "collect_graph_ops",
    "enable_grad",
    "is_grad_enabled",
    "no_grad",
    "ops",
    "CERTIFIED_SECOND_ORDER",
    "OP_REGISTRY",
    "as_tensor",
    "ones",
    "zeros",
    "finite_diff_check",
    "grad_norm_sq",
    "run_op_suite",
    "run_second_order_suite",
    "second_order_check",
    "SerializationError",
    "load_tensor",
    "read_checkpoint",
    "read_tensor",
    "save_tensor",
    "write_checkpoint",
    "write_tensor",
]
