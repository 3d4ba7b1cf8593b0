"""Kernel backend selection.

Each kernel comes from the compiled extension when it is built and measured
faster than numpy there (see benchmarks/bench_kernels.py), otherwise from the
numpy fallback. Set ``VPGKIT_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os

from . import _pykernels as python_backend

compiled_backend = None
if os.environ.get("VPGKIT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled_backend  # type: ignore[no-redef]
    except ImportError:  # extension not built
        compiled_backend = None

KERNELS = ("softmax_fwd", "softmax_bwd", "layernorm_fwd", "layernorm_bwd", "gelu_fwd", "gelu_bwd",
           "xent_fwd_bwd", "lcs_length")
# compiled wins on one core; the rest lose to numpy's vectorized exp/tanh
COMPILED_FASTER = frozenset({"softmax_bwd", "layernorm_fwd", "layernorm_bwd", "gelu_bwd", "lcs_length"})

_table: dict = {}
BACKEND = "python"


def use_backend(name: str) -> None:
    """Select kernels: "auto" (per-kernel fastest), "cython" (all compiled) or "python"."""
    global BACKEND
    if name in ("auto", "cython") and compiled_backend is None:
        raise RuntimeError("compiled kernels are not built")
    if name == "auto":
        pick = lambda k: compiled_backend if k in COMPILED_FASTER else python_backend
    elif name == "cython":
        pick = lambda k: compiled_backend
    elif name == "python":
        pick = lambda k: python_backend
    else:
        raise ValueError(f"unknown backend {name!r}")
    _table.update({k: getattr(pick(k), k) for k in KERNELS})
    BACKEND = name


use_backend("auto" if compiled_backend is not None else "python")


def softmax_fwd(x):
    return _table["softmax_fwd"](x)


def softmax_bwd(y, dy):
    return _table["softmax_bwd"](y, dy)


def layernorm_fwd(x, eps):
    return _table["layernorm_fwd"](x, eps)


def layernorm_bwd(xhat, rstd, dxhat):
    return _table["layernorm_bwd"](xhat, rstd, dxhat)


def gelu_fwd(x):
    return _table["gelu_fwd"](x)


def gelu_bwd(x, dy):
    return _table["gelu_bwd"](x, dy)


def xent_fwd_bwd(logits, targets, weights):
    return _table["xent_fwd_bwd"](logits, targets, weights)


def lcs_length(a, b):
    return _table["lcs_length"](a, b)
