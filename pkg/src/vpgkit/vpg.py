"""Frozen image encoder and the query resampler that turns patch features into visual prompts."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .layers import (
    ParamSet, attend, init_linear, init_norm, linear, merge_heads, mlp, norm,
    sinusoid_2d, split_heads,
)
from .numkit import Tensor
from .numkit.tensor import ShapeError, add, reshape, slice_
from .scenegen import Raster


@dataclass(frozen=True)
class FeatureGrid:
    """(P*P, d_v) patch features in row-major cell order."""
    features: np.ndarray
    p: int
    source_hw: tuple[int, int]

    @property
    def grid(self) -> np.ndarray:
        return self.features.reshape(self.p, self.p, -1)


@dataclass(frozen=True)
class AttentionTrace:
    """Cross-attention weights, shape (layers, K, P*P)."""
    maps: np.ndarray
    p: int

    def map(self, layer: int, query: int) -> np.ndarray:
        return self.maps[layer, query].reshape(self.p, self.p)


class ImageEncoder:
    """Frozen patch embedding: linear map of each patch's pixels plus a fixed 2-D position code."""

    def __init__(self, d_v: int = 64, patch: int = 8, image_size: int = 64, seed: int = 0):
        if image_size % patch:
            raise ValueError(f"image size {image_size} not divisible by patch {patch}")
        self.d_v, self.patch, self.image_size = d_v, patch, image_size
        self.p = image_size // patch
        rng = np.random.default_rng([seed, 101])
        patch_dim = 3 * patch * patch
        self.weight = rng.normal(0.0, 1.0 / np.sqrt(patch_dim), size=(patch_dim, d_v))
        self.pos = sinusoid_2d(self.p, d_v)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {"encoder.weight": self.weight, "encoder.pos": self.pos}

    def load_state_dict(self, state) -> None:
        self.weight = np.array(state["encoder.weight"])
        self.pos = np.array(state["encoder.pos"])

    def patches(self, raster: Raster) -> np.ndarray:
        if raster.height != self.image_size or raster.width != self.image_size:
            raise ShapeError(f"encoder expects {self.image_size}x{self.image_size}, "
                             f"got {raster.height}x{raster.width}")
        x = raster.pixels.astype(np.float64) / 127.5 - 1.0
        p, s = self.p, self.patch
        return x.reshape(p, s, p, s, 3).transpose(0, 2, 1, 3, 4).reshape(p * p, s * s * 3)

    def encode(self, raster: Raster) -> FeatureGrid:
        feats = self.patches(raster) @ self.weight + self.pos
        return FeatureGrid(feats, self.p, (raster.height, raster.width))


def encode_image(raster: Raster, encoder: ImageEncoder) -> FeatureGrid:
    return encoder.encode(raster)


@dataclass(frozen=True)
class ResamplerConfig:
    n_queries: int = 8
    d: int = 64
    d_v: int = 64
    d_out: int = 64
    n_layers: int = 2
    heads: int = 1
    mlp_ratio: int = 2
    final_norm: bool = True


class Resampler:
    """Learnable queries alternating cross-attention to image features, self-attention and an MLP."""

    def __init__(self, config: ResamplerConfig = ResamplerConfig(), seed: int = 0):
        if config.n_queries < 1:
            raise ValueError("resampler needs K >= 1 queries")
        self.config = c = config
        rng = np.random.default_rng([seed, 202])
        ps = self.params = ParamSet()
        ps.new("queries", rng.normal(0.0, 1.0, size=(c.n_queries, c.d)))
        init_norm(ps, "feat_norm", c.d_v)
        for i in range(c.n_layers):
            b = f"block{i}"
            init_norm(ps, f"{b}.ln_cross", c.d)
            init_linear(ps, f"{b}.cross.q", c.d, c.d, rng)
            init_linear(ps, f"{b}.cross.k", c.d_v, c.d, rng)
            init_linear(ps, f"{b}.cross.v", c.d_v, c.d, rng)
            init_linear(ps, f"{b}.cross.o", c.d, c.d, rng, gain=0.5)
            init_norm(ps, f"{b}.ln_self", c.d)
            init_linear(ps, f"{b}.self.qkv", c.d, 3 * c.d, rng)
            init_linear(ps, f"{b}.self.o", c.d, c.d, rng, gain=0.5)
            init_norm(ps, f"{b}.ln_mlp", c.d)
            init_linear(ps, f"{b}.mlp.fc1", c.d, c.mlp_ratio * c.d, rng)
            init_linear(ps, f"{b}.mlp.fc2", c.mlp_ratio * c.d, c.d, rng, gain=0.5)
        if c.final_norm:
            init_norm(ps, "ln_out", c.d)
        init_linear(ps, "proj", c.d, c.d_out, rng)

    def freeze(self) -> None:
        self.params.set_frozen(True)

    @property
    def frozen(self) -> bool:
        return self.params.frozen

    def forward(self, feats: Tensor, queries: Tensor | None = None) -> tuple[Tensor, np.ndarray]:
        """Batched pass.

        ``feats`` is (B, P*P, d_v); ``queries`` is (K, d) or (B, K, d) and
        defaults to the resampler's own bank. Returns prompts (B, K, d_out)
        and the cross-attention trace (B, layers, K, P*P).
        """
        c = self.config
        ps = self.params
        if queries is None:
            queries = ps["queries"]
        if queries.shape[-2] < 1:
            raise ValueError("resample needs at least one query")
        if queries.shape[-1] != c.d or feats.shape[-1] != c.d_v:
            raise ShapeError(f"resampler widths: queries {queries.shape}, features {feats.shape}, "
                             f"expected d={c.d}, d_v={c.d_v}")
        x = queries if queries.ndim == 3 else reshape(queries, (1, *queries.shape))
        kv = norm(feats, ps, "feat_norm")
        traces = []
        for i in range(c.n_layers):
            b = f"block{i}"
            h = norm(x, ps, f"{b}.ln_cross")
            q = split_heads(linear(h, ps, f"{b}.cross.q"), c.heads)
            k = split_heads(linear(kv, ps, f"{b}.cross.k"), c.heads)
            v = split_heads(linear(kv, ps, f"{b}.cross.v"), c.heads)
            o, probs = attend(q, k, v)
            traces.append(probs.data.mean(axis=-3))
            x = add(x, linear(merge_heads(o), ps, f"{b}.cross.o"))
            h = norm(x, ps, f"{b}.ln_self")
            qkv = linear(h, ps, f"{b}.self.qkv")
            q = split_heads(slice_(qkv, (Ellipsis, slice(0, c.d))), c.heads)
            k = split_heads(slice_(qkv, (Ellipsis, slice(c.d, 2 * c.d))), c.heads)
            v = split_heads(slice_(qkv, (Ellipsis, slice(2 * c.d, 3 * c.d))), c.heads)
            o, _ = attend(q, k, v)
            x = add(x, linear(merge_heads(o), ps, f"{b}.self.o"))
            x = add(x, mlp(norm(x, ps, f"{b}.ln_mlp"), ps, f"{b}.mlp"))
        if c.final_norm:
            x = norm(x, ps, "ln_out")
        prompts = linear(x, ps, "proj")
        trace = np.stack(traces, axis=1)
        if trace.shape[0] != feats.shape[0]:
            trace = np.broadcast_to(trace, (feats.shape[0], *trace.shape[1:])).copy()
        return prompts, trace


def resample(grid: FeatureGrid, queries: np.ndarray | Tensor | None,
             resampler: Resampler) -> tuple[np.ndarray, AttentionTrace]:
    """Single-image convenience wrapper: (K, d_out) prompts and the trace."""
    feats = Tensor(grid.features[None])
    q = None if queries is None else (queries if isinstance(queries, Tensor) else Tensor(queries))
    prompts, trace = resampler.forward(feats, q)
    return prompts.data[0], AttentionTrace(trace[0], grid.p)


def avg_attention(trace: AttentionTrace) -> np.ndarray:
    """Global map: mean over layers and queries, returned as (P, P)."""
    if trace.maps.size == 0:
        raise ValueError("empty attention trace")
    return trace.maps.mean(axis=(0, 1)).reshape(trace.p, trace.p)


class LinearVPG:
    """One prompt per grid cell: a linear projection of the cell's feature."""

    def __init__(self, d_v: int = 64, d: int = 64, seed: int = 0):
        rng = np.random.default_rng([seed, 303])
        self.params = ParamSet()
        init_linear(self.params, "proj", d_v, d, rng)

    def freeze(self) -> None:
        self.params.set_frozen(True)

    def forward(self, feats: Tensor) -> Tensor:
        return linear(feats, self.params, "proj")


def linear_vpg(grid: FeatureGrid, vpg: LinearVPG) -> np.ndarray:
    return vpg.forward(Tensor(grid.features)).data


# ---------------------------------------------------------------------------
# attention dumps


def write_trace_csv(path, trace: AttentionTrace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "query", "row", "col", "weight"])
        n_layers, k, _ = trace.maps.shape
        for layer in range(n_layers):
            for q in range(k):
                m = trace.map(layer, q)
                for r in range(trace.p):
                    for c in range(trace.p):
                        w.writerow([layer, q, r, c, repr(float(m[r, c]))])


def write_heatmap_ppm(path, heat: np.ndarray) -> None:
    """Grayscale heatmap as a P6 file, one pixel per grid cell, min-max scaled."""
    lo, hi = float(heat.min()), float(heat.max())
    norm_ = (heat - lo) / (hi - lo) if hi > lo else np.zeros_like(heat)
    gray = np.round(norm_ * 255).astype(np.uint8)
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    h, w = heat.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())
