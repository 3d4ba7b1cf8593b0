"""Synthetic discriminative training.

Scenes are scored by how much the frozen resampler attends to each object;
the least-attended object is edited, and the model learns to describe the
difference between the original and edited renders, jointly with plain
captioning.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import scenegen as sg
from .decoder import MixedSequence, lm_loss
from .numkit import AdamWHyper, LrSchedule, OptimizerState, Tensor, adamw_step, backward, lr_at
from .numkit.checkpoint import load_checkpoint, save_checkpoint
from .vocab import CAPTION_INSTRUCTION, DIFF_INSTRUCTION
from .vpg import avg_attention, AttentionTrace
from .vpgc import Backbone, VPGCConfig, VPGCModel

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# significance


@dataclass(frozen=True)
class SignificanceReport:
    scores: dict[int, float]
    global_map: np.ndarray


def upsample_area(a: np.ndarray, height: int, width: int) -> np.ndarray:
    """Piecewise-constant upsampling: every pixel takes the value of the grid cell it lies in."""
    p_h, p_w = a.shape
    if height % p_h or width % p_w:
        raise ValueError(f"canvas {height}x{width} is not a multiple of grid {p_h}x{p_w}")
    return np.repeat(np.repeat(a, height // p_h, axis=0), width // p_w, axis=1)


def upsample_bilinear(a: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear upsampling with half-pixel centers and edge clamping."""
    p_h, p_w = a.shape
    ys = np.clip((np.arange(height) + 0.5) * p_h / height - 0.5, 0.0, p_h - 1)
    xs = np.clip((np.arange(width) + 0.5) * p_w / width - 0.5, 0.0, p_w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, p_h - 1)
    x1 = np.minimum(x0 + 1, p_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = a[y0][:, x0] * (1 - wx) + a[y0][:, x1] * wx
    bot = a[y1][:, x0] * (1 - wx) + a[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def significance(global_map: np.ndarray, masks, mode: str = "area") -> SignificanceReport:
    """Mean of the upsampled global attention map over each object's mask."""
    if not masks:
        raise ValueError("significance needs at least one mask")
    h, w = masks[0].grid.shape
    if mode == "area":
        up = upsample_area(global_map, h, w)
    elif mode == "bilinear":
        up = upsample_bilinear(global_map, h, w)
    else:
        raise ValueError(f"unknown interpolation mode {mode!r}")
    scores = {}
    for m in masks:
        if m.grid.shape != (h, w):
            raise ValueError(f"mask {m.object_id} has shape {m.grid.shape}, expected {(h, w)}")
        if not m.grid.any():
            raise ValueError(f"mask of object {m.object_id} is empty")
        scores[m.object_id] = float(up[m.grid].mean())
    return SignificanceReport(scores, global_map)


def select_target(report: SignificanceReport) -> int:
    """The least-attended object; ties go to the lowest id."""
    if not report.scores:
        raise ValueError("empty significance report")
    return min(report.scores, key=lambda i: (report.scores[i], i))


# ---------------------------------------------------------------------------
# edit proposal


def _free_combos(scene: sg.SceneSpec) -> list[tuple[str, str]]:
    used = {(o.color, o.shape) for o in scene.objects}
    return [(c, s) for c in sg.COLOR_NAMES for s in sg.SHAPES if (c, s) not in used]


def _propose_add(scene, rng, config: sg.SceneConfig) -> sg.EditOp | None:
    combos = _free_combos(scene)
    if not combos:
        return None
    boxes = [sg.bbox(o.cx, o.cy, o.size) for o in scene.objects]
    new_id = max((o.id for o in scene.objects), default=-1) + 1
    top_z = max((o.z for o in scene.objects), default=-1) + 1
    owner = sg.ownership(scene)
    for _ in range(config.max_attempts):
        color, shape = combos[int(rng.integers(len(combos)))]
        size = int(rng.integers(config.size_range[0], config.size_range[1] + 1))
        h = size / 2.0
        lo = int(math.ceil(h)) + 1
        if scene.width - h <= lo or scene.height - h <= lo:
            continue
        cx = float(rng.integers(lo, int(scene.width - h)))
        cy = float(rng.integers(lo, int(scene.height - h)))
        if not sg.bbox_clear(sg.bbox(cx, cy, size), boxes, config.margin):
            continue
        obj = sg.SceneObject(new_id, shape, color, cx, cy, float(size), top_z)
        cover = sg.shape_coverage(obj, scene.width, scene.height)
        if cover.any() and (owner[cover] == -1).all():
            return sg.EditOp("ADD", new_object=obj)
    return None


def _propose_modify(scene, target, rng) -> sg.EditOp | None:
    used = {(o.color, o.shape) for o in scene.objects}
    attrs = ["color", "shape"]
    first = attrs[int(rng.integers(2))]
    for attr in (first, attrs[1 - attrs.index(first)]):
        if attr == "color":
            options = [c for c in sg.COLOR_NAMES if c != target.color and (c, target.shape) not in used]
        else:
            options = [s for s in sg.SHAPES if s != target.shape and (target.color, s) not in used]
        if options:
            return sg.EditOp("MODIFY", target_id=target.id,
                             changes={attr: options[int(rng.integers(len(options)))]})
    return None


def propose_edit(scene: sg.SceneSpec, target_id: int, seed, config: sg.SceneConfig = sg.SceneConfig()) -> sg.EditOp:
    """Rule-based edit on the target object; the kind is drawn uniformly among feasible kinds."""
    if target_id not in {o.id for o in scene.objects}:
        raise ValueError(f"target {target_id} is not in the scene")
    target = scene.get(target_id)
    rng = np.random.default_rng(seed)
    kinds = list(sg.EDIT_KINDS)
    while kinds:
        kind = kinds[int(rng.integers(len(kinds)))]
        edit = None
        if kind == "DELETE":
            edit = sg.EditOp("DELETE", target_id=target_id)
        elif kind == "SWAP":
            others = [o.id for o in scene.objects if o.id != target_id]
            if others:
                edit = sg.EditOp("SWAP", pair_ids=(target_id, others[int(rng.integers(len(others)))]))
        elif kind == "MODIFY":
            edit = _propose_modify(scene, target, rng)
        elif kind == "ADD":
            edit = _propose_add(scene, rng, config)
        if edit is not None:
            return edit
        kinds.remove(kind)
    raise ValueError(f"no feasible edit for scene with {len(scene.objects)} objects")


# ---------------------------------------------------------------------------
# dataset


@dataclass
class TrainPair:
    raster_before: sg.Raster
    raster_after: sg.Raster
    instruction: str
    target: str
    edit: sg.EditOp
    scene_before: sg.SceneSpec
    scene_after: sg.SceneSpec
    target_id: int
    phi: dict[int, float]
    seed: int

    @property
    def caption_before(self) -> str:
        return sg.caption(self.scene_before)


@dataclass(frozen=True)
class DataConfig:
    scene: sg.SceneConfig = sg.SceneConfig()
    significance_mode: str = "area"
    chunk: int = 64


@dataclass
class BuildStats:
    pairs: int = 0
    skipped: int = 0
    kinds: dict[str, int] = field(default_factory=lambda: {k: 0 for k in sg.EDIT_KINDS})


def pair_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def global_maps(backbone: Backbone, rasters: list[sg.Raster], chunk: int = 64) -> list[np.ndarray]:
    """Average cross-attention map of the plain resampler pass for each raster."""
    out = []
    for i in range(0, len(rasters), chunk):
        part = rasters[i:i + chunk]
        feats = backbone.encode_batch([[r] for r in part])
        _, trace = backbone.resampler.forward(Tensor(feats[:, 0]))
        for t in trace:
            out.append(avg_attention(AttentionTrace(t, backbone.p)))
    return out


def build_dataset(n_pairs: int, backbone: Backbone, config: DataConfig = DataConfig(), seed: int = 0,
                  max_tries: int | None = None) -> tuple[list[TrainPair], BuildStats]:
    """Generate ``n_pairs`` original/edited pairs whose edit targets the least-attended object."""
    if not backbone.resampler.frozen:
        raise ValueError("build_dataset needs a frozen resampler")
    stats = BuildStats()
    pairs: list[TrainPair] = []
    index = 0
    max_tries = max_tries or 4 * n_pairs + 100
    while len(pairs) < n_pairs and index < max_tries:
        want = min(config.chunk, n_pairs - len(pairs))
        batch = []
        while len(batch) < want and index < max_tries:
            s = pair_seed(seed, index)
            index += 1
            try:
                scene = sg.gen_scene(s, config.scene)
            except ValueError as exc:
                log.debug("scene %d skipped: %s", s, exc)
                stats.skipped += 1
                continue
            raster, masks = sg.render(scene)
            batch.append((s, scene, raster, masks))
        maps = global_maps(backbone, [b[2] for b in batch], config.chunk)
        for (s, scene, raster, masks), a in zip(batch, maps):
            try:
                report = significance(a, masks, config.significance_mode)
                target = select_target(report)
                edit = propose_edit(scene, target, [s, 1], config.scene)
                after = sg.apply_edit(scene, edit)
            except ValueError as exc:
                log.debug("pair %d skipped: %s", s, exc)
                stats.skipped += 1
                continue
            raster_after, _ = sg.render(after)
            pairs.append(TrainPair(raster, raster_after, DIFF_INSTRUCTION, sg.describe_edit(edit, scene),
                                   edit, scene, after, target, report.scores, s))
            stats.kinds[edit.kind] += 1
    stats.pairs = len(pairs)
    return pairs, stats


def write_manifest(pairs: list[TrainPair], out_dir) -> Path:
    """Write scenes (JSON), rasters (PPM) and the JSONL manifest under ``out_dir``."""
    out = Path(out_dir)
    (out / "pairs").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, p in enumerate(pairs):
        stem = f"pairs/{i:06d}"
        sg.write_scene_json(out / f"{stem}_before.json", p.scene_before)
        sg.write_scene_json(out / f"{stem}_after.json", p.scene_after)
        sg.write_ppm(out / f"{stem}_before.ppm", p.raster_before)
        sg.write_ppm(out / f"{stem}_after.ppm", p.raster_after)
        lines.append(json.dumps({
            "scene_file": f"{stem}_before.json",
            "edited_file": f"{stem}_after.json",
            "raster_before": f"{stem}_before.ppm",
            "raster_after": f"{stem}_after.ppm",
            "edit": p.edit.to_dict(),
            "difference_sentence": p.target,
            "caption_before": p.caption_before,
            "instruction": p.instruction,
            "target_id": p.target_id,
            "phi": {str(k): v for k, v in sorted(p.phi.items())},
            "seed": p.seed,
        }, sort_keys=True))
    path = out / "manifest.jsonl"
    path.write_text("\n".join(lines) + ("\n" if lines else ""))
    return path


def read_manifest(path) -> list[TrainPair]:
    root = Path(path).parent
    pairs = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        before = sg.read_scene_json(root / rec["scene_file"])
        after = sg.read_scene_json(root / rec["edited_file"])
        pairs.append(TrainPair(
            sg.read_ppm(root / rec["raster_before"]), sg.read_ppm(root / rec["raster_after"]),
            rec["instruction"], rec["difference_sentence"], sg.EditOp.from_dict(rec["edit"]),
            before, after, rec["target_id"], {int(k): v for k, v in rec["phi"].items()}, rec["seed"]))
    return pairs


def random_target_pairs(n: int, seed: int, config: sg.SceneConfig = sg.SceneConfig()) -> list[TrainPair]:
    """Pairs whose edit target is drawn uniformly, without attention scoring (backbone pre-training data)."""
    pairs = []
    for i in range(n):
        s = pair_seed(seed, i)
        scene = sg.gen_scene(s, config)
        rng = np.random.default_rng([s, 2])
        target = scene.objects[int(rng.integers(len(scene.objects)))].id
        edit = propose_edit(scene, target, [s, 1], config)
        after = sg.apply_edit(scene, edit)
        pairs.append(TrainPair(sg.render(scene)[0], sg.render(after)[0], DIFF_INSTRUCTION,
                               sg.describe_edit(edit, scene), edit, scene, after, target, {}, s))
    return pairs


@dataclass
class CaptionItem:
    raster: sg.Raster
    text: str


def caption_pool(n: int, seed: int, config: sg.SceneConfig = sg.SceneConfig()) -> list[CaptionItem]:
    items = []
    for i in range(n):
        scene = sg.gen_scene(pair_seed(seed, i), config)
        items.append(CaptionItem(sg.render(scene)[0], sg.caption(scene)))
    return items


# ---------------------------------------------------------------------------
# batching


class TaskCache:
    """Pre-encoded features and token ids for pairs and captions of one backbone."""

    def __init__(self, backbone: Backbone, pairs: list[TrainPair], captions: list[CaptionItem]):
        v = backbone.vocab
        self.backbone = backbone
        for text in [p.target for p in pairs] + [c.text for c in captions]:
            if not v.covers(text):
                raise ValueError(f"vocabulary does not cover target {text!r}")
        self.disc_feats = backbone.encode_batch([[p.raster_before, p.raster_after] for p in pairs]) \
            if pairs else np.zeros((0, 2, backbone.p ** 2, backbone.encoder.d_v))
        self.disc_targets = [v.encode(p.target) for p in pairs]
        self.cap_feats = backbone.encode_batch([[c.raster] for c in captions]) \
            if captions else np.zeros((0, 1, backbone.p ** 2, backbone.encoder.d_v))
        self.cap_targets = [v.encode(c.text) for c in captions]
        self.disc_prefix = v.encode(DIFF_INSTRUCTION) + [v.resp]
        self.cap_prefix = v.encode(CAPTION_INSTRUCTION) + [v.resp]

    def disc_batch(self, idx):
        v = self.backbone.vocab
        seqs = [MixedSequence().text([v.bos]).image(0).image(1).text(self.disc_prefix) for _ in idx]
        return self.backbone.batch(seqs, [self.disc_targets[i] for i in idx]), self.disc_feats[idx]

    def cap_batch(self, idx):
        v = self.backbone.vocab
        seqs = [MixedSequence().text([v.bos]).image(0).text(self.cap_prefix) for _ in idx]
        return self.backbone.batch(seqs, [self.cap_targets[i] for i in idx]), self.cap_feats[idx]


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class MixConfig:
    disc_batch: int = 3
    cap_batch: int = 8
    steps: int = 3000
    seed: int = 0

    def __post_init__(self):
        if self.disc_batch < 1 or self.cap_batch < 1:
            raise ValueError("both batch sizes must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")


@dataclass(frozen=True)
class OptimConfig:
    lr_peak: float = 1e-3
    warmup_steps: int = 300
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05

    def hyper(self) -> AdamWHyper:
        return AdamWHyper(self.lr_peak, self.beta1, self.beta2, self.eps, self.weight_decay)


def _draw(rng, n, k):
    return rng.integers(0, n, size=k)


def _write_trace(path, rows, append: bool) -> None:
    new = not append or not Path(path).exists()
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["step", "lr", "loss_disc", "loss_cap"])
        for r in rows:
            w.writerow([r["step"], repr(r["lr"]), repr(r["loss_disc"]), repr(r["loss_cap"])])


def train(model: VPGCModel, cache: TaskCache, mix: MixConfig, optim: OptimConfig = OptimConfig(),
          state: OptimizerState | None = None, start_step: int = 0, stop_step: int | None = None,
          trace_csv=None) -> tuple[list[dict], OptimizerState]:
    """Joint discriminative + captioning training of the VPG-C weights only.

    Steps ``start_step .. stop_step - 1`` of a ``mix.steps``-step schedule are
    run, so a run can be split and resumed with identical results. Batch
    draws depend only on (seed, step).
    """
    stop = mix.steps if stop_step is None else stop_step
    n_disc, n_cap = len(cache.disc_targets), len(cache.cap_targets)
    if stop > start_step and (n_disc == 0 or n_cap == 0):
        raise ValueError("training needs at least one pair and one caption")
    params = model.weights.tensors()
    state = state or OptimizerState(optim.hyper())
    schedule = LrSchedule(min(optim.warmup_steps, max(mix.steps, 1)), max(mix.steps, 1), optim.lr_peak)
    rows = []
    for step in range(start_step, stop):
        rng = np.random.default_rng([mix.seed, step])
        db, dfeats = cache.disc_batch(_draw(rng, n_disc, mix.disc_batch))
        cb, cfeats = cache.cap_batch(_draw(rng, n_cap, mix.cap_batch))
        for p in params.values():
            p.grad = None
        loss_d = lm_loss(model.forward(db, dfeats), db.targets, db.loss_mask)
        loss_c = lm_loss(model.forward(cb, cfeats), cb.targets, cb.loss_mask)
        total = loss_d + loss_c
        if not np.isfinite(total.data):
            raise TrainingDiverged(f"non-finite loss at step {step}: disc={loss_d.item()} cap={loss_c.item()}")
        lr = lr_at(step + 1, schedule)
        if params:
            backward(total)
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
            adamw_step(params, state, lr, grads)
        rows.append({"step": step, "lr": lr, "loss_disc": loss_d.item(), "loss_cap": loss_c.item()})
    if trace_csv is not None:
        _write_trace(trace_csv, rows, append=start_step > 0)
    return rows, state


def save_training_checkpoint(path, model: VPGCModel, state: OptimizerState, step: int, config: dict) -> None:
    tensors = {f"vpgc.{k}": t.data for k, t in model.weights.params.items()}
    for k in model.weights.params.params:
        if k in state.m:
            tensors[f"adam_m.{k}"] = state.m[k]
            tensors[f"adam_v.{k}"] = state.v[k]
    save_checkpoint(path, tensors, {**config, "step": step, "adam_t": state.t})


def load_training_checkpoint(path, model: VPGCModel, optim: OptimConfig = OptimConfig()
                             ) -> tuple[OptimizerState, int, dict]:
    tensors, config = load_checkpoint(path)
    for k, t in model.weights.params.items():
        t.data = np.array(tensors[f"vpgc.{k}"])
    state = OptimizerState(optim.hyper())
    state.t = int(config.get("adam_t", 0))
    for k in model.weights.params.params:
        if f"adam_m.{k}" in tensors:
            state.m[k] = np.array(tensors[f"adam_m.{k}"])
            state.v[k] = np.array(tensors[f"adam_v.{k}"])
    return state, int(config.get("step", 0)), config


# ---------------------------------------------------------------------------
# backbone pre-training


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 2000
    cap_batch: int = 16
    disc_batch: int = 0
    lr_peak: float = 2e-3
    warmup_steps: int = 100
    weight_decay: float = 0.01
    seed: int = 0


def pretrain_backbone(backbone: Backbone, cache: TaskCache, config: PretrainConfig,
                      train_vpg: bool = True, log_every: int = 0) -> list[dict]:
    """Train resampler and decoder end to end on captioning (plus optional difference pairs), then freeze.

    Stands in for the pre-trained LLM and resampler that the completion
    module is attached to.
    """
    names = ["decoder"]
    if train_vpg:
        names.append("resampler" if backbone.vpg == "qformer" else "linear_vpg")
    params = {}
    for name in names:
        ps = backbone.param_sets()[name]
        ps.set_frozen(False)
        params.update({f"{name}.{k}": t for k, t in ps.items()})
    model = VPGCModel(backbone, VPGCConfig(variant="off"))
    state = OptimizerState(AdamWHyper(config.lr_peak, 0.9, 0.999, 1e-8, config.weight_decay))
    schedule = LrSchedule(min(config.warmup_steps, max(config.steps, 1)), max(config.steps, 1), config.lr_peak)
    rows = []
    n_cap, n_disc = len(cache.cap_targets), len(cache.disc_targets)
    for step in range(config.steps):
        rng = np.random.default_rng([config.seed, 7, step])
        for p in params.values():
            p.grad = None
        cb, cfeats = cache.cap_batch(_draw(rng, n_cap, config.cap_batch))
        loss = lm_loss(model.forward(cb, cfeats), cb.targets, cb.loss_mask)
        loss_c = loss.item()
        loss_d = float("nan")
        if config.disc_batch and n_disc:
            db, dfeats = cache.disc_batch(_draw(rng, n_disc, config.disc_batch))
            ld = lm_loss(model.forward(db, dfeats), db.targets, db.loss_mask)
            loss_d = ld.item()
            loss = loss + ld
        if not np.isfinite(loss.data):
            raise TrainingDiverged(f"non-finite pre-training loss at step {step}")
        backward(loss)
        adamw_step(params, state, lr_at(step + 1, schedule),
                   {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()})
        rows.append({"step": step, "loss_cap": loss_c, "loss_disc": loss_d})
        if log_every and step % log_every == 0:
            log.info("pretrain step %d cap %.4f disc %.4f", step, loss_c, loss_d)
    backbone.freeze()
    return rows


# ---------------------------------------------------------------------------
# metrics


def token_accuracy(model: VPGCModel, cache: TaskCache, batch_size: int = 32, use_vpgc: bool = True) -> float:
    """Teacher-forced argmax accuracy over difference-sentence tokens (end marker included)."""
    n = len(cache.disc_targets)
    hits = total = 0.0
    for i in range(0, n, batch_size):
        idx = np.arange(i, min(n, i + batch_size))
        b, feats = cache.disc_batch(idx)
        logits = model.forward(b, feats) if use_vpgc else model.backbone_forward(b, feats)
        pred = logits.data.argmax(axis=-1)
        hits += float(((pred == b.targets) * b.loss_mask).sum())
        total += float(b.loss_mask.sum())
    return hits / total if total else 0.0
