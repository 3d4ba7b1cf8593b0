"""Parameter containers and the few layer functions shared by the resampler and decoder."""
from __future__ import annotations

import math

import numpy as np

from .numkit import Tensor, layer_norm, matmul, softmax
from .numkit.tensor import add, gelu, reshape, scale, transpose


class ParamSet:
    """Ordered name -> Tensor mapping with freeze/serialize helpers."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def new(self, name: str, data: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=trainable, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def items(self):
        return self.params.items()

    def set_frozen(self, frozen: bool) -> None:
        for t in self.params.values():
            t.requires_grad = not frozen
            t.grad = None

    @property
    def frozen(self) -> bool:
        return not any(t.requires_grad for t in self.params.values())

    def count(self) -> int:
        return sum(t.size for t in self.params.values())

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + k: t.data for k, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        for k, t in self.params.items():
            arr = state[prefix + k]
            if arr.shape != t.shape:
                raise ValueError(f"{prefix + k}: checkpoint shape {arr.shape} != {t.shape}")
            t.data = np.array(arr, dtype=np.float64)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None


def init_linear(ps: ParamSet, name: str, d_in: int, d_out: int, rng: np.random.Generator,
                gain: float = 1.0, trainable: bool = True) -> None:
    ps.new(f"{name}.w", rng.normal(0.0, gain / math.sqrt(d_in), size=(d_in, d_out)), trainable)
    ps.new(f"{name}.b", np.zeros(d_out), trainable)


def init_norm(ps: ParamSet, name: str, d: int, trainable: bool = True) -> None:
    ps.new(f"{name}.w", np.ones(d), trainable)
    ps.new(f"{name}.b", np.zeros(d), trainable)


def linear(x: Tensor, ps: ParamSet, name: str) -> Tensor:
    return add(matmul(x, ps[f"{name}.w"]), ps[f"{name}.b"])


def norm(x: Tensor, ps: ParamSet, name: str) -> Tensor:
    return layer_norm(x, ps[f"{name}.w"], ps[f"{name}.b"])


def split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = reshape(x, (*lead, n, heads, d // heads))
    nd = x.ndim
    return transpose(x, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))


def merge_heads(x: Tensor) -> Tensor:
    nd = x.ndim
    x = transpose(x, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
    *lead, n, h, dh = x.shape
    return reshape(x, (*lead, n, h * dh))


def attend(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over the last two axes; returns (output, weights)."""
    dh = q.shape[-1]
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(dh))
    if mask is not None:
        scores = add(scores, Tensor(mask))
    probs = softmax(scores)
    return matmul(probs, v), probs


def mlp(x: Tensor, ps: ParamSet, name: str) -> Tensor:
    return linear(gelu(linear(x, ps, f"{name}.fc1")), ps, f"{name}.fc2")


def sinusoid_2d(p: int, d: int) -> np.ndarray:
    """Fixed (p*p, d) positional code: half the channels encode rows, half columns."""
    if d % 4:
        raise ValueError(f"2-D positional code needs d divisible by 4, got {d}")
    quarter = d // 4
    freqs = 1.0 / (100.0 ** (np.arange(quarter) / quarter))
    pos = np.arange(p)[:, None] * freqs[None, :]
    enc = np.concatenate([np.sin(pos), np.cos(pos)], axis=1)  # (p, d/2)
    rows = np.repeat(enc, p, axis=0)
    cols = np.tile(enc, (p, 1))
    return np.concatenate([rows, cols], axis=1)
