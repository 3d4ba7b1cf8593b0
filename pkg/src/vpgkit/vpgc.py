"""Guided completion of visual prompts at an intermediate decoder layer.

The decoder runs up to its intercept layer; the last instruction token's
hidden state is projected into a guidance vector, added to a new query bank,
and the frozen resampler is re-run with those queries. Its output is
projected and added onto the image-slot rows, and the decoder resumes. The
reintegration projection starts at zero, so an untrained module leaves the
backbone's output unchanged.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .decoder import Decoder, LayerState, MixedSequence, ModelConfig, SequenceBatch, build_batch
from .layers import ParamSet, init_linear, linear
from .numkit import Tensor
from .numkit.tensor import ShapeError, add, gather_rows, mul, reshape, scatter_add_rows
from .vocab import Vocab, default_vocab
from .vpg import ImageEncoder, LinearVPG, Resampler, ResamplerConfig

VARIANTS = ("qformer", "linear", "heuristic", "off")


@dataclass(frozen=True)
class VPGCConfig:
    variant: str = "qformer"
    insert_layer: int | None = None
    zero_init_both: bool = True
    bottom_fraction: float = 0.5
    query_noise: float = 0.01

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 0 < self.bottom_fraction <= 1:
            raise ValueError(f"bottom_fraction must be in (0, 1], got {self.bottom_fraction}")


class Backbone:
    """Frozen pieces: encoder, visual prompt generator(s) and the language decoder."""

    def __init__(self, config: ModelConfig, vocab: Vocab | None = None, vpg: str = "qformer",
                 patch: int = 8, image_size: int = 64, resampler_layers: int = 2,
                 resampler_heads: int = 1, seed: int = 0):
        if vpg not in ("qformer", "linear"):
            raise ValueError(f"vpg must be 'qformer' or 'linear', got {vpg!r}")
        self.vocab = vocab or default_vocab()
        if config.vocab_size != len(self.vocab):
            raise ValueError(f"config vocab_size {config.vocab_size} != vocabulary size {len(self.vocab)}")
        self.config = config
        self.vpg = vpg
        self.encoder = ImageEncoder(d_v=config.d, patch=patch, image_size=image_size, seed=seed)
        self.p = self.encoder.p
        self.resampler = Resampler(ResamplerConfig(
            n_queries=config.n_queries, d=config.d, d_v=config.d, d_out=config.d,
            n_layers=resampler_layers, heads=resampler_heads), seed=seed)
        self.linear_vpg = LinearVPG(config.d, config.d, seed=seed)
        self.decoder = Decoder(config, seed=seed)
        self.meta = {"vpg": vpg, "patch": patch, "image_size": image_size,
                     "resampler_layers": resampler_layers, "resampler_heads": resampler_heads,
                     "seed": seed}

    @property
    def slots_per_image(self) -> int:
        return self.config.n_queries if self.vpg == "qformer" else self.p * self.p

    def freeze(self) -> None:
        self.resampler.freeze()
        self.linear_vpg.freeze()
        self.decoder.freeze()

    def param_sets(self) -> dict[str, ParamSet]:
        return {"resampler": self.resampler.params, "linear_vpg": self.linear_vpg.params,
                "decoder": self.decoder.params}

    def state_dict(self) -> dict[str, np.ndarray]:
        out = dict(self.encoder.state_dict())
        for prefix, ps in self.param_sets().items():
            out.update(ps.state_dict(prefix + "."))
        return out

    def load_state_dict(self, state) -> None:
        self.encoder.load_state_dict(state)
        for prefix, ps in self.param_sets().items():
            ps.load_state_dict(state, prefix + ".")

    def visual_prompts(self, feats: np.ndarray) -> tuple[Tensor, np.ndarray | None]:
        """Plain VPG pass. ``feats`` is (B, J, P*P, d_v); returns (B, J*slots, d) and the trace."""
        B, J, n, dv = feats.shape
        flat = Tensor(feats.reshape(B * J, n, dv))
        if self.vpg == "qformer":
            prompts, trace = self.resampler.forward(flat)
            trace = trace.reshape(B, J, *trace.shape[1:])
        else:
            prompts, trace = self.linear_vpg.forward(flat), None
        return reshape(prompts, (B, J * prompts.shape[1], prompts.shape[2])), trace

    def encode_batch(self, rasters_per_example) -> np.ndarray:
        return np.stack([np.stack([self.encoder.encode(r).features for r in rs])
                         for rs in rasters_per_example])

    def batch(self, sequences: list[MixedSequence], responses=None, add_eos: bool = True) -> SequenceBatch:
        v = self.vocab
        return build_batch(sequences, responses, self.slots_per_image, v.img, v.eos, v.pad,
                           add_eos=add_eos)


class VPGCWeights:
    """The only trainable state: new queries plus the guidance and reintegration linears."""

    def __init__(self, backbone: Backbone, config: VPGCConfig = VPGCConfig(), seed: int = 0):
        d = backbone.config.d
        dv = backbone.encoder.d_v
        rng = np.random.default_rng([seed, 505])
        self.variant = config.variant
        ps = self.params = ParamSet()
        if config.variant == "qformer":
            base = backbone.resampler.params["queries"].data
            ps.new("queries", base + rng.normal(0.0, config.query_noise, size=base.shape))
        if config.variant in ("qformer", "linear"):
            init_linear(ps, "guide", d, d, rng)
            if config.zero_init_both:
                ps["guide.w"].data = np.zeros((d, d))
        if config.variant == "linear":
            init_linear(ps, "filter", d, d, rng)
            init_linear(ps, "visual", dv, d, rng)
        if config.variant in ("qformer", "linear"):
            ps.new("reint.w", np.zeros((d, d)))
            ps.new("reint.b", np.zeros(d))
        if config.variant == "heuristic":
            ps.new("heur.w", np.zeros((dv, d)))
            ps.new("heur.b", np.zeros(d))

    def count(self) -> int:
        return self.params.count()

    def tensors(self) -> dict[str, Tensor]:
        return dict(self.params.items())


def expected_param_count(k: int, d: int) -> int:
    return k * d + 2 * (d * d + d)


# ---------------------------------------------------------------------------
# mechanism steps


def extract_guidance(state: LayerState, last_input, weights: ParamSet, insert_layer: int) -> Tensor:
    """g = W_g h + b_g, with h the last instruction token's hidden row at the intercept layer."""
    if state.layer != insert_layer:
        raise ValueError(f"guidance must be read at layer {insert_layer}, state is at {state.layer}")
    last_input = np.asarray(last_input, dtype=np.int64)
    if np.any(last_input >= state.hidden.shape[1]):
        raise ShapeError(f"last input position {last_input.max()} beyond sequence length "
                         f"{state.hidden.shape[1]}")
    h = gather_rows(state.hidden, last_input)
    return linear(h, weights, "guide")


def condition_queries(g: Tensor, queries: Tensor) -> Tensor:
    """Add the guidance vector to every query: (B, d) + (K, d) -> (B, K, d)."""
    if g.shape[-1] != queries.shape[-1]:
        raise ShapeError(f"guidance width {g.shape[-1]} != query width {queries.shape[-1]}")
    if g.ndim == 1:
        return add(queries, g)
    return add(reshape(g, (g.shape[0], 1, g.shape[1])), queries)


def complete_details(feats: np.ndarray, conditioned: Tensor, resampler: Resampler) -> Tensor:
    """Re-run the frozen resampler on every image with the conditioned queries.

    ``feats`` is (B, J, P*P, d_v); ``conditioned`` is (B, K, d). Returns
    (B, J*K, d_out) in slot order.
    """
    B, J, n, dv = feats.shape
    if conditioned.ndim != 3 or conditioned.shape[0] != B:
        raise ShapeError(f"conditioned queries {conditioned.shape} do not match batch of {B}")
    K, d = conditioned.shape[1:]
    per_image = add(reshape(conditioned, (B, 1, K, d)), Tensor(np.zeros((1, J, 1, 1))))
    prompts, _ = resampler.forward(Tensor(feats.reshape(B * J, n, dv)), reshape(per_image, (B * J, K, d)))
    return reshape(prompts, (B, J * K, prompts.shape[-1]))


def splice(state: LayerState, slot_index: np.ndarray, delta: Tensor) -> LayerState:
    """Add ``delta`` (B, J*K, d) onto the image-slot rows; every other row is copied unchanged."""
    B = state.hidden.shape[0]
    flat = np.asarray(slot_index, dtype=np.int64).reshape(B, -1)
    return LayerState(state.layer, scatter_add_rows(state.hidden, flat, delta))


def reintegrate(state: LayerState, slot_index: np.ndarray, vbar: Tensor, weights: ParamSet) -> LayerState:
    """Image-slot rows become V + W_r V̄ + b_r."""
    return splice(state, slot_index, linear(vbar, weights, "reint"))


def heuristic_details(trace: np.ndarray, feats: np.ndarray, bottom_fraction: float,
                      weights: ParamSet, k: int) -> Tensor:
    """Pool the least-attended cells per image, project, and broadcast to that image's K slots.

    ``trace`` is (B, J, layers, K, P*P); ``feats`` is (B, J, P*P, d_v).
    Ties in attention are broken by row-major cell order.
    """
    if not 0 < bottom_fraction <= 1:
        raise ValueError(f"bottom_fraction must be in (0, 1], got {bottom_fraction}")
    B, J, n, dv = feats.shape
    take = math.ceil(bottom_fraction * n)
    glob = trace.mean(axis=(2, 3))  # (B, J, P*P)
    order = np.argsort(glob, axis=-1, kind="stable")[..., :take]
    pooled = np.take_along_axis(feats, order[..., None], axis=2).mean(axis=2)  # (B, J, d_v)
    proj = linear(Tensor(pooled), weights, "heur")  # (B, J, d)
    d = proj.shape[-1]
    spread = add(reshape(proj, (B, J, 1, d)), Tensor(np.zeros((1, 1, k, 1))))
    return reshape(spread, (B, J * k, d))


def heuristic_selection(global_map: np.ndarray, bottom_fraction: float) -> np.ndarray:
    """Indices of the ceil(fraction * cells) smallest entries of a flattened map, ties row-major."""
    flat = np.asarray(global_map).reshape(-1)
    return np.argsort(flat, kind="stable")[:math.ceil(bottom_fraction * flat.size)]


def linear_vpgc_variant(g: Tensor, feats: np.ndarray, weights: ParamSet) -> Tensor:
    """V̄ = (W1 g 1^T) ⊙ (W2 X): the guidance filters every projected grid feature.

    ``g`` is (B, d); ``feats`` is (B, J, P*P, d_v). Returns (B, J*P*P, d).
    """
    B, J, n, dv = feats.shape
    if weights["visual.w"].shape[0] != dv or weights["filter.w"].shape[0] != g.shape[-1]:
        raise ShapeError(f"linear variant widths: guidance {g.shape}, features {feats.shape}")
    filt = linear(g, weights, "filter")  # (B, d)
    vis = linear(Tensor(feats), weights, "visual")  # (B, J, n, d)
    d = filt.shape[-1]
    out = mul(reshape(filt, (B, 1, 1, d)), vis)
    return reshape(out, (B, J * n, d))


# ---------------------------------------------------------------------------
# end to end


class VPGCModel:
    """Backbone plus one VPG-C variant. ``forward`` runs the decoder exactly once."""

    def __init__(self, backbone: Backbone, config: VPGCConfig = VPGCConfig(),
                 weights: VPGCWeights | None = None, seed: int = 0):
        if config.variant == "linear" and backbone.vpg != "linear":
            raise ValueError("the linear variant needs a backbone built with vpg='linear'")
        if config.variant in ("qformer", "heuristic") and backbone.vpg != "qformer":
            raise ValueError(f"variant {config.variant!r} needs a resampler backbone")
        self.backbone = backbone
        self.config = config
        self.insert_layer = backbone.config.intercept if config.insert_layer is None else config.insert_layer
        if not 1 <= self.insert_layer < backbone.config.n_layers:
            raise ValueError(f"insert_layer {self.insert_layer} outside [1, {backbone.config.n_layers - 1}]")
        self.weights = weights or VPGCWeights(backbone, config, seed=seed)

    def forward(self, batch: SequenceBatch, feats: np.ndarray | None) -> Tensor:
        bb = self.backbone
        dec = bb.decoder
        variant = self.config.variant
        if batch.n_images:
            prompts, trace = bb.visual_prompts(feats)
        else:
            prompts, trace = None, None
        h0 = dec.assemble(batch, prompts)
        if variant == "off" or not batch.n_images:
            return dec.forward(h0)
        ell = self.insert_layer
        w = self.weights.params
        state = dec.forward_to(h0, ell)
        if variant == "heuristic":
            delta = heuristic_details(trace, feats, self.config.bottom_fraction, w, bb.slots_per_image)
        else:
            g = extract_guidance(state, batch.last_input, w, ell)
            if variant == "qformer":
                vbar = complete_details(feats, condition_queries(g, w["queries"]), bb.resampler)
            else:
                vbar = linear_vpgc_variant(g, feats, w)
            delta = linear(vbar, w, "reint")
        state = splice(state, batch.slot_index, delta)
        return dec.forward_from(state, ell)

    def backbone_forward(self, batch: SequenceBatch, feats: np.ndarray | None) -> Tensor:
        bb = self.backbone
        prompts = bb.visual_prompts(feats)[0] if batch.n_images else None
        return bb.decoder.forward(bb.decoder.assemble(batch, prompts))

    def generate(self, sequences: list[MixedSequence], feats: np.ndarray | None,
                 max_new: int = 16) -> list[list[int]]:
        """Greedy decoding, batched; each step is one full forward pass."""
        eos = self.backbone.vocab.eos
        out: list[list[int]] = [[] for _ in sequences]
        done = [False] * len(sequences)
        base_len = [len(s.layout(self.backbone.slots_per_image, 0)[0]) for s in sequences]
        for _ in range(max_new):
            batch = self.backbone.batch(sequences, out, add_eos=False)
            logits = self.forward(batch, feats).data
            for b in range(len(sequences)):
                if done[b]:
                    continue
                pos = base_len[b] + len(out[b]) - 1
                tok = int(np.argmax(logits[b, pos]))
                if tok == eos:
                    done[b] = True
                else:
                    out[b].append(tok)
            if all(done):
                break
        return out
