from . import ops
from .store import ParameterStore
from .tensor import (
    DTYPE,
    GraphConsumedError,
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    get_dtype,
    grad_enabled,
    no_grad,
    precision,
    release_graph,
)

__all__ = [
    "DTYPE",
    "GraphConsumedError",
    "ParameterStore",
    "ShapeError",
    "Tensor",
    "as_tensor",
    "backward",
    "get_dtype",
    "grad_enabled",
    "no_grad",
    "precision",
    "ops",
    "release_graph",
]
