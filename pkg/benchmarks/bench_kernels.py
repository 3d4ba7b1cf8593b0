"""Compare the compiled kernels with the numpy/pure-Python fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Prints one line per kernel with the median time of each backend and the
speedup, plus an end-to-end training step timing under each backend.
"""
from __future__ import annotations

import argparse
import json
import statistics
import time

import numpy as np

from vpgkit.numkit import _pykernels as py
from vpgkit.numkit import kernels

try:
    from vpgkit.numkit import _ckernels as cy
except ImportError:
    cy = None


def _time(fn, repeat: int) -> float:
    fn()
    samples = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t)
    return statistics.median(samples)


def kernel_cases(rng):
    x = rng.normal(size=(4096, 64))
    y = py.softmax_fwd(x)
    dy = rng.normal(size=x.shape)
    xhat, rstd = py.layernorm_fwd(x, 1e-5)
    logits = rng.normal(size=(2048, 70))
    targets = rng.integers(0, 70, size=2048)
    weights = (rng.random(2048) < 0.3).astype(np.float64)
    a = [int(t) for t in rng.integers(0, 12, size=20)]
    b = [int(t) for t in rng.integers(0, 12, size=20)]
    return {
        "softmax_fwd": lambda m: m.softmax_fwd(x),
        "softmax_bwd": lambda m: m.softmax_bwd(y, dy),
        "layernorm_fwd": lambda m: m.layernorm_fwd(x, 1e-5),
        "layernorm_bwd": lambda m: m.layernorm_bwd(xhat, rstd, dy),
        "gelu_fwd": lambda m: m.gelu_fwd(x),
        "gelu_bwd": lambda m: m.gelu_bwd(x, dy),
        "xent_fwd_bwd": lambda m: m.xent_fwd_bwd(logits, targets, weights),
        "lcs_length(20x20)": lambda m: m.lcs_length(a, b),
    }


def train_step_time(repeat: int) -> float:
    from vpgkit import trainpipe as tp
    from vpgkit.decoder import ModelConfig
    from vpgkit.vpgc import Backbone, VPGCModel

    bb = Backbone(ModelConfig(), seed=0)
    bb.freeze()
    pairs, _ = tp.build_dataset(16, bb, seed=0)
    cache = tp.TaskCache(bb, pairs, tp.caption_pool(16, 1))
    model = VPGCModel(bb)
    step = iter(range(10 ** 6))
    mix = tp.MixConfig(steps=10 ** 6)
    return _time(lambda: tp.train(model, cache, mix, start_step=(s := next(step)), stop_step=s + 1), repeat)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", help="also write results as JSON")
    args = ap.parse_args(argv)
    if cy is None:
        print("compiled kernels not built; only the fallback can be timed")
    rng = np.random.default_rng(0)
    results = {}
    print(f"{'kernel':<20}{'python (ms)':>14}{'cython (ms)':>14}{'speedup':>10}  auto")
    for name, fn in kernel_cases(rng).items():
        t_py = _time(lambda: fn(py), args.repeat)
        t_cy = _time(lambda: fn(cy), args.repeat) if cy is not None else float("nan")
        results[name] = {"python_ms": 1e3 * t_py, "cython_ms": 1e3 * t_cy}
        auto = "cython" if name.split("(")[0] in kernels.COMPILED_FASTER else "python"
        print(f"{name:<20}{1e3 * t_py:>14.3f}{1e3 * t_cy:>14.3f}{t_py / t_cy:>9.2f}x  {auto}")
    for backend in (["python", "cython", "auto"] if cy is not None else ["python"]):
        kernels.use_backend(backend)
        t = train_step_time(max(3, args.repeat // 4))
        results[f"train_step[{backend}]"] = {"ms": 1e3 * t}
        print(f"train step ({backend}): {1e3 * t:.1f} ms")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2, sort_keys=True)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
