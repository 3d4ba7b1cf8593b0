"""Toy causal transformer decoder over interleaved text tokens and visual prompts.

The forward pass can be split at any layer boundary (``forward_to`` /
``forward_from``) so that hidden states can be read and rewritten between
layers without re-running any layer.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import ParamSet, attend, init_linear, init_norm, linear, merge_heads, mlp, norm, split_heads
from .numkit import Tensor, cross_entropy
from .numkit.tensor import ShapeError, add, embedding, mul, scatter_add_rows, slice_

NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    d: int = 64
    heads: int = 4
    vocab_size: int = 70
    n_queries: int = 8
    insert_layer: int | None = None
    max_len: int = 256
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if self.insert_layer is None and self.n_layers % 2:
            raise ValueError("default insert layer L/2 needs an even layer count")
        if not 1 <= self.intercept < self.n_layers:
            raise ValueError(f"insert_layer must be in [1, {self.n_layers - 1}], got {self.intercept}")

    @property
    def intercept(self) -> int:
        return self.n_layers // 2 if self.insert_layer is None else self.insert_layer


@dataclass
class MixedSequence:
    """Ordered TEXT / IMAGE segments. TEXT holds token ids; IMAGE holds an image index."""
    segments: list[tuple[str, object]] = field(default_factory=list)

    def text(self, ids) -> "MixedSequence":
        self.segments.append(("text", [int(i) for i in ids]))
        return self

    def image(self, index: int) -> "MixedSequence":
        self.segments.append(("image", int(index)))
        return self

    @property
    def image_indices(self) -> list[int]:
        return [s[1] for s in self.segments if s[0] == "image"]

    def layout(self, k: int, img_token: int) -> tuple[list[int], dict[int, tuple[int, int]]]:
        """Flat token ids (``img_token`` at prompt slots) and image -> (start, stop) slot map."""
        ids: list[int] = []
        slots: dict[int, tuple[int, int]] = {}
        for kind, val in self.segments:
            if kind == "text":
                ids.extend(val)
            elif kind == "image":
                if val in slots:
                    raise ValueError(f"image {val} appears twice")
                slots[val] = (len(ids), len(ids) + k)
                ids.extend([img_token] * k)
            else:
                raise ValueError(f"unknown segment kind {kind!r}")
        return ids, slots


@dataclass
class SequenceBatch:
    """Right-padded batch of assembled sequences.

    ``slot_index[b, j]`` lists the K positions of image j of example b, in
    the order images appear in ``image_order[b]``.
    """
    ids: np.ndarray          # (B, N) int
    slot_index: np.ndarray   # (B, J, K) int
    last_input: np.ndarray   # (B,) position of the final instruction token
    targets: np.ndarray      # (B, N) next-token ids
    loss_mask: np.ndarray    # (B, N) 1.0 at supervised positions
    image_order: list[list[int]]

    @property
    def n_images(self) -> int:
        return self.slot_index.shape[1]


def build_batch(sequences: list[MixedSequence], responses: list[list[int]] | None,
                k: int, img_token: int, eos: int, pad: int, add_eos: bool = True) -> SequenceBatch:
    """Assemble instructions (and optional responses) into one padded batch.

    Every sequence must contain the same number of images. Responses get an
    end marker appended; targets are shifted by one so that position t
    predicts token t+1.
    """
    rows, slots_all, lasts, resp_spans, orders = [], [], [], [], []
    for i, seq in enumerate(sequences):
        ids, slots = seq.layout(k, img_token)
        lasts.append(len(ids) - 1)
        order = seq.image_indices
        orders.append(order)
        slots_all.append([list(range(*slots[j])) for j in order])
        resp = list(responses[i]) if responses is not None else []
        if responses is not None and add_eos:
            resp.append(eos)
        resp_spans.append((len(ids), len(ids) + len(resp)))
        rows.append(ids + resp)
    n_img = {len(s) for s in slots_all}
    if len(n_img) != 1:
        raise ValueError(f"batch mixes image counts {sorted(n_img)}")
    n = max(len(r) for r in rows)
    B = len(rows)
    ids = np.full((B, n), pad, dtype=np.int64)
    targets = np.full((B, n), pad, dtype=np.int64)
    mask = np.zeros((B, n))
    for b, r in enumerate(rows):
        ids[b, :len(r)] = r
        targets[b, :len(r) - 1] = r[1:]
        lo, hi = resp_spans[b]
        # position t predicts token t+1: supervise the last instruction token through the end marker's predecessor
        mask[b, lo - 1:hi - 1] = 1.0
    slot_index = np.array(slots_all, dtype=np.int64).reshape(B, n_img.pop(), k)
    return SequenceBatch(ids, slot_index, np.array(lasts, dtype=np.int64), targets, mask, orders)


@dataclass
class LayerState:
    layer: int
    hidden: Tensor  # (B, N, d)


class Decoder:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = c = config
        rng = np.random.default_rng([seed, 404])
        ps = self.params = ParamSet()
        ps.new("tok_emb", rng.normal(0.0, 1.0, size=(c.vocab_size, c.d)))
        ps.new("pos_emb", rng.normal(0.0, 0.1, size=(c.max_len, c.d)))
        out_gain = 1.0 / np.sqrt(2 * c.n_layers)
        for i in range(c.n_layers):
            b = f"layer{i}"
            init_norm(ps, f"{b}.ln1", c.d)
            init_linear(ps, f"{b}.attn.qkv", c.d, 3 * c.d, rng)
            init_linear(ps, f"{b}.attn.o", c.d, c.d, rng, gain=out_gain)
            init_norm(ps, f"{b}.ln2", c.d)
            init_linear(ps, f"{b}.mlp.fc1", c.d, c.mlp_ratio * c.d, rng)
            init_linear(ps, f"{b}.mlp.fc2", c.mlp_ratio * c.d, c.d, rng, gain=out_gain)
        init_norm(ps, "ln_f", c.d)
        init_linear(ps, "head", c.d, c.vocab_size, rng)
        self.layer_calls = np.zeros(c.n_layers, dtype=np.int64)
        self._mask_cache: dict[int, np.ndarray] = {}

    def freeze(self) -> None:
        self.params.set_frozen(True)

    def reset_counters(self) -> None:
        self.layer_calls[:] = 0

    def _causal(self, n: int) -> np.ndarray:
        m = self._mask_cache.get(n)
        if m is None:
            m = np.triu(np.full((n, n), NEG_INF), k=1)
            self._mask_cache[n] = m
        return m

    def assemble(self, batch: SequenceBatch, prompts: Tensor | None) -> Tensor:
        """Embed tokens, place visual prompts verbatim in their slots, add position codes.

        ``prompts`` is (B, J*K, d) in slot order, or None for text-only batches.
        """
        c = self.config
        B, n = batch.ids.shape
        if n > c.max_len:
            raise ShapeError(f"sequence length {n} exceeds max_len {c.max_len}")
        emb = embedding(self.params["tok_emb"], batch.ids)
        n_slots = batch.slot_index.shape[1] * batch.slot_index.shape[2]
        if n_slots:
            if prompts is None or prompts.shape != (B, n_slots, c.d):
                got = None if prompts is None else prompts.shape
                raise ShapeError(f"assemble: expected prompts of shape {(B, n_slots, c.d)}, got {got}")
            keep = np.ones((B, n, 1))
            flat_slots = batch.slot_index.reshape(B, n_slots)
            keep[np.arange(B)[:, None], flat_slots] = 0.0
            emb = scatter_add_rows(mul(emb, Tensor(keep)), flat_slots, prompts)
        elif prompts is not None and prompts.size:
            raise ShapeError("assemble: prompts given for a sequence without image segments")
        return add(emb, slice_(self.params["pos_emb"], slice(0, n)))

    def _layer(self, i: int, x: Tensor) -> Tensor:
        c = self.config
        ps = self.params
        b = f"layer{i}"
        self.layer_calls[i] += 1
        h = norm(x, ps, f"{b}.ln1")
        qkv = linear(h, ps, f"{b}.attn.qkv")
        q = split_heads(slice_(qkv, (Ellipsis, slice(0, c.d))), c.heads)
        k = split_heads(slice_(qkv, (Ellipsis, slice(c.d, 2 * c.d))), c.heads)
        v = split_heads(slice_(qkv, (Ellipsis, slice(2 * c.d, 3 * c.d))), c.heads)
        o, _ = attend(q, k, v, self._causal(x.shape[-2]))
        x = add(x, linear(merge_heads(o), ps, f"{b}.attn.o"))
        return add(x, mlp(norm(x, ps, f"{b}.ln2"), ps, f"{b}.mlp"))

    def forward_to(self, h0: Tensor, layer: int, state: LayerState | None = None) -> LayerState:
        """Run layers up to and including ``layer`` (1-based); layer 0 is the input itself."""
        L = self.config.n_layers
        if not 0 <= layer <= L:
            raise ValueError(f"layer {layer} outside [0, {L}]")
        start = 0 if state is None else state.layer
        x = h0 if state is None else state.hidden
        if start > layer:
            raise ValueError(f"cannot run backwards from layer {start} to {layer}")
        for i in range(start, layer):
            x = self._layer(i, x)
        return LayerState(layer, x)

    def readout(self, x: Tensor) -> Tensor:
        return linear(norm(x, self.params, "ln_f"), self.params, "head")

    def forward_from(self, state: LayerState, start: int) -> Tensor:
        """Apply the remaining layers after ``start`` plus the output head; returns logits."""
        if state.layer != start:
            raise ValueError(f"state is at layer {state.layer}, asked to resume from {start}")
        final = self.forward_to(None, self.config.n_layers, state)
        return self.readout(final.hidden)

    def forward(self, h0: Tensor) -> Tensor:
        return self.forward_from(self.forward_to(h0, 0), 0)


def lm_loss(logits: Tensor, targets, loss_mask) -> Tensor:
    """Mean next-token cross-entropy over supervised positions."""
    return cross_entropy(logits, targets, loss_mask)
