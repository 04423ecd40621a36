"""
Parameter containers and the small layer set the models are built from.
"""
import logging
from typing import Dict, Iterator, Mapping, Optional, Tuple

import numpy as np

from core.errors import CheckpointError, DegenerateInputError, DimensionError
from core.tensor import (
    Tensor,
    add,
    expand_rows,
    matmul,
    parameter,
)

logger = logging.getLogger(__name__)

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape: Optional[Tuple[int, ...]] = None) -> np.ndarray:
    """Uniform on [-a, a] with a = sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape if shape is not None else (fan_in, fan_out))


class Module:
    """
    Base class for anything holding trainable tensors.

    Parameters are discovered from instance attributes: a `Tensor` with
    `requires_grad=True`, a child `Module`, or a list of modules. Names are
    dotted attribute paths in definition order. Non-trainable state (running
    statistics, frozen lookup tables) is declared in `buffer_names`.
    """

    buffer_names: Tuple[str, ...] = ()

    def __init__(self) -> None:
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name in self.buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {f"param/{name}": p.data.copy() for name, p in self.named_parameters()}
        state.update({f"buffer/{name}": np.array(b, copy=True) for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        expected = {f"param/{n}" for n in params} | {f"buffer/{n}" for n, _ in self.named_buffers()}
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise CheckpointError(
                f"state does not match model: missing={sorted(missing)[:5]} unexpected={sorted(unexpected)[:5]}"
            )
        for name, p in params.items():
            value = np.asarray(state[f"param/{name}"], dtype=np.float64)
            if value.shape != p.shape:
                raise CheckpointError(f"parameter '{name}' has shape {value.shape}, model expects {p.shape}")
            p.data = value.copy()
        for name, current in list(self.named_buffers()):
            value = np.asarray(state[f"buffer/{name}"])
            if value.shape != np.shape(current):
                raise CheckpointError(f"buffer '{name}' has shape {value.shape}, model expects {np.shape(current)}")
            owner, attr = self._resolve(name)
            setattr(owner, attr, value.copy())

    def _resolve(self, dotted: str) -> Tuple["Module", str]:
        owner: Module = self
        *path, attr = dotted.split(".")
        for part in path:
            owner = owner[int(part)] if part.isdigit() else getattr(owner, part)
        return owner, attr


def add_bias(y: Tensor, bias: Tensor) -> Tensor:
    """Add a bias vector to a vector or to every row of a matrix."""
    if y.ndim == 1:
        return add(y, bias)
    return add(y, expand_rows(bias, y.shape[0]))


class Linear(Module):
    """y = x W + b, with W stored as (in_features, out_features)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = parameter(glorot_uniform(rng, in_features, out_features))
        self.bias = parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise DimensionError(f"Linear expects {self.in_features} input features, got {x.shape}")
        y = matmul(x, self.weight)
        return add_bias(y, self.bias) if self.bias is not None else y


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPSILON,
) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """
    Batch normalisation over the rows of a (batch, d) matrix.

    Returns the output and the (possibly updated) running statistics. Train
    mode normalises with the biased batch variance and folds the unbiased one
    into the running variance.
    """
    if x.ndim != 2 or x.shape[1] != gamma.shape[0]:
        raise DimensionError(f"batch_norm: expected (batch, {gamma.shape[0]}), got {x.shape}")
    n = x.shape[0]
    g_data, b_data = gamma.data, beta.data

    if training:
        if n < 2:
            raise DegenerateInputError("batch_norm needs at least 2 rows in train mode")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = (x.data - mu) * inv_std
        new_mean = (1.0 - momentum) * running_mean + momentum * mu
        new_var = (1.0 - momentum) * running_var + momentum * var * n / (n - 1)

        def backward(g: np.ndarray):
            dx_hat = g * g_data
            dx = inv_std / n * (n * dx_hat - dx_hat.sum(axis=0) - x_hat * (dx_hat * x_hat).sum(axis=0))
            return dx, (g * x_hat).sum(axis=0), g.sum(axis=0)
    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        x_hat = (x.data - running_mean) * inv_std
        new_mean, new_var = running_mean, running_var

        def backward(g: np.ndarray):
            return g * g_data * inv_std, (g * x_hat).sum(axis=0), g.sum(axis=0)

    out = Tensor._from_op(x_hat * g_data + b_data, (x, gamma, beta), "batch_norm", backward)
    return out, new_mean, new_var


class BatchNorm1d(Module):
    buffer_names = ("running_mean", "running_var")

    def __init__(self, num_features: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPSILON):
        super().__init__()
        self.gamma = parameter(np.ones(num_features))
        self.beta = parameter(np.zeros(num_features))
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        out, self.running_mean, self.running_var = batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )
        return out
