"""Command-line entry point.

Every command takes ``--config run.json`` plus ``--set dotted.key=value``
overrides, resolves them against the defaults, rejects unknown keys, and
writes ``resolved_config.json`` into its output directory. Relative paths
are resolved under ``$VPGKIT_OUT`` (default: the working directory).
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import evalkit as ek
from . import scenegen as sg
from . import trainpipe as tp
from .decoder import ModelConfig
from .numkit.checkpoint import load_checkpoint, save_checkpoint
from .svg import line_chart
from .vocab import default_vocab
from .vpg import AttentionTrace, avg_attention, resample, write_heatmap_ppm, write_trace_csv
from .vpgc import Backbone, VPGCConfig, VPGCModel

log = logging.getLogger("vpgkit")

OUT_ENV = "VPGKIT_OUT"

DEFAULTS: dict = {
    "model": {"n_layers": 8, "d": 64, "heads": 4, "n_queries": 8, "max_len": 256, "mlp_ratio": 4,
              "patch": 8, "image_size": 64, "resampler_layers": 2, "resampler_heads": 1,
              "vpg": "qformer", "seed": 0},
    "vpgc": {"variant": "qformer", "insert_layer": None, "zero_init_both": True,
             "bottom_fraction": 0.5, "query_noise": 0.01, "seed": 0},
    "scene": {"n_objects_range": [2, 4], "canvas": [64, 64], "size_range": [6, 16], "margin": 2,
              "max_attempts": 500},
    "data": {"n_pairs": 500, "n_heldout": 200, "seed": 1, "significance_mode": "area",
             "n_captions": 2000, "caption_seed": 3},
    "pretrain": {"caption_steps": 1500, "joint_steps": 1500, "n_pairs": 3000, "n_captions": 3000,
                 "cap_batch": 16, "joint_cap_batch": 8, "joint_disc_batch": 8, "lr_peak": 2e-3,
                 "warmup_steps": 100, "weight_decay": 0.01, "seed": 0, "data_seed": 200,
                 "caption_seed": 100},
    "mix": {"disc_batch": 3, "cap_batch": 8, "steps": 3000, "seed": 0},
    "optim": {"lr_peak": 1e-3, "warmup_steps": 300, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8,
              "weight_decay": 0.05},
    "train": {"resume": None, "stop_step": None},
    "eval": {"model": "vpgc", "cap": 500, "shuffle": False, "shuffle_seed": 0, "max_new": 16,
             "batch_size": 32},
    "probe": {"layers": [2, 4, 6], "workers": 1},
    "paths": {"backbone": "backbone.ckpt", "data": "data", "checkpoint": "run/vpgc.ckpt",
              "records": "data/eval/records.jsonl", "out": "run", "image": None},
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {key!r} must be an object")
            out[k] = _merge(base[k], v, key + ".")
        else:
            out[k] = v
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(config: dict, assignment: str) -> dict:
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, raw = assignment.split("=", 1)
    parts = key.split(".")
    nested: dict = {}
    cur = nested
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = _parse_value(raw)
    return _merge(config, nested)


def resolve_config(config_file=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if config_file is not None:
        try:
            loaded = json.loads(Path(config_file).read_text())
            loaded.pop("command", None)  # written by write_resolved; informational only
            cfg = _merge(cfg, loaded)
        except (OSError, json.JSONDecodeError, AttributeError) as exc:
            raise ConfigError(f"cannot read config {config_file}: {exc}") from exc
    for o in overrides:
        cfg = apply_override(cfg, o)
    return cfg


def out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "."))


def resolve_path(p) -> Path | None:
    if p is None:
        return None
    p = Path(p)
    return p if p.is_absolute() else out_root() / p


def write_resolved(cfg: dict, directory: Path, command: str) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "resolved_config.json").write_text(
        json.dumps({"command": command, **cfg}, indent=2, sort_keys=True) + "\n")


def scene_config(cfg) -> sg.SceneConfig:
    s = cfg["scene"]
    return sg.SceneConfig(tuple(s["n_objects_range"]), tuple(s["canvas"]), tuple(s["size_range"]),
                          s["margin"], s["max_attempts"])


def model_config(cfg) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(n_layers=m["n_layers"], d=m["d"], heads=m["heads"], vocab_size=len(default_vocab()),
                       n_queries=m["n_queries"], max_len=m["max_len"], mlp_ratio=m["mlp_ratio"])


def vpgc_config(cfg, insert_layer=None) -> VPGCConfig:
    v = cfg["vpgc"]
    return VPGCConfig(v["variant"], v["insert_layer"] if insert_layer is None else insert_layer,
                      v["zero_init_both"], v["bottom_fraction"], v["query_noise"])


def mix_config(cfg) -> tp.MixConfig:
    return tp.MixConfig(**cfg["mix"])


def optim_config(cfg) -> tp.OptimConfig:
    return tp.OptimConfig(**cfg["optim"])


def new_backbone(cfg) -> Backbone:
    m = cfg["model"]
    return Backbone(model_config(cfg), default_vocab(), vpg=m["vpg"], patch=m["patch"],
                    image_size=m["image_size"], resampler_layers=m["resampler_layers"],
                    resampler_heads=m["resampler_heads"], seed=m["seed"])


def load_backbone(cfg) -> Backbone:
    """Backbone from its checkpoint; a missing path means a freshly initialized frozen backbone."""
    bb = new_backbone(cfg)
    path = resolve_path(cfg["paths"]["backbone"])
    if path is not None:
        if not path.exists():
            raise FileNotFoundError(f"backbone checkpoint {path} not found (run `vpgkit pretrain` first)")
        tensors, meta = load_checkpoint(path)
        if meta.get("model") != cfg["model"]:
            raise ConfigError(f"backbone checkpoint was built with model config {meta.get('model')}")
        bb.load_state_dict(tensors)
    bb.freeze()
    return bb


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(cfg) -> int:
    """Stand-in for the pre-trained backbone: captioning first, then the decoder alone on random-target pairs."""
    pc = cfg["pretrain"]
    bb = new_backbone(cfg)
    scfg = scene_config(cfg)
    caps = tp.caption_pool(pc["n_captions"], pc["caption_seed"], scfg)
    pairs = tp.random_target_pairs(pc["n_pairs"], pc["data_seed"], scfg)
    cache = tp.TaskCache(bb, pairs, caps)
    common = dict(lr_peak=pc["lr_peak"], warmup_steps=pc["warmup_steps"], weight_decay=pc["weight_decay"])
    tp.pretrain_backbone(bb, cache, tp.PretrainConfig(steps=pc["caption_steps"], cap_batch=pc["cap_batch"],
                                                      seed=pc["seed"], **common), train_vpg=True)
    if pc["joint_steps"]:
        tp.pretrain_backbone(bb, cache, tp.PretrainConfig(
            steps=pc["joint_steps"], cap_batch=pc["joint_cap_batch"], disc_batch=pc["joint_disc_batch"],
            seed=pc["seed"] + 1, **common), train_vpg=False)
    path = resolve_path(cfg["paths"]["backbone"])
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, bb.state_dict(), {"model": cfg["model"], "pretrain": pc})
    write_resolved(cfg, path.parent, "pretrain")
    print(f"backbone written to {path}")
    return 0


def build_data(cfg, bb: Backbone):
    d = cfg["data"]
    dc = tp.DataConfig(scene=scene_config(cfg), significance_mode=d["significance_mode"])
    return tp.build_dataset(d["n_pairs"] + d["n_heldout"], bb, dc, seed=d["seed"])


def cmd_gen_data(cfg) -> int:
    bb = load_backbone(cfg)
    out = resolve_path(cfg["paths"]["data"])
    pairs, stats = build_data(cfg, bb)
    n_train = cfg["data"]["n_pairs"]
    tp.write_manifest(pairs[:n_train], out)
    records_path = resolve_path(cfg["paths"]["records"])
    records = ek.records_from_pairs(pairs[n_train:], records_path.parent)
    ek.write_records(records_path, records)
    write_resolved(cfg, out, "gen-data")
    train_kinds = {k: 0 for k in sg.EDIT_KINDS}
    for p in pairs[:n_train]:
        train_kinds[p.edit.kind] += 1
    print(f"pairs: {min(n_train, len(pairs))} (held out: {len(pairs) - min(n_train, len(pairs))})")
    print(f"skipped: {stats.skipped}")
    print("edit kinds: " + ", ".join(f"{k}={v}" for k, v in train_kinds.items()))
    return 0


def _train_cache(cfg, bb: Backbone) -> tp.TaskCache:
    manifest = resolve_path(cfg["paths"]["data"]) / "manifest.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"manifest {manifest} not found (run `vpgkit gen-data` first)")
    pairs = tp.read_manifest(manifest)
    caps = tp.caption_pool(cfg["data"]["n_captions"], cfg["data"]["caption_seed"], scene_config(cfg))
    return tp.TaskCache(bb, pairs, caps)


def _fresh_model(cfg, bb: Backbone, insert_layer=None) -> VPGCModel:
    return VPGCModel(bb, vpgc_config(cfg, insert_layer), seed=cfg["vpgc"]["seed"])


def cmd_train(cfg) -> int:
    bb = load_backbone(cfg)
    cache = _train_cache(cfg, bb)
    model = _fresh_model(cfg, bb)
    ckpt = resolve_path(cfg["paths"]["checkpoint"])
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    trace = ckpt.parent / "loss.csv"
    state, start = None, 0
    resume = resolve_path(cfg["train"]["resume"])
    if resume is not None:
        state, start, _ = tp.load_training_checkpoint(resume, model, optim_config(cfg))
        if resume.parent != ckpt.parent:
            src = resume.parent / "loss.csv"
            trace.write_text(src.read_text() if src.exists() else "")
    stop = cfg["train"]["stop_step"]
    _, state = tp.train(model, cache, mix_config(cfg), optim_config(cfg), state=state, start_step=start,
                        stop_step=stop, trace_csv=trace)
    end = cfg["mix"]["steps"] if stop is None else stop
    tp.save_training_checkpoint(ckpt, model, state, max(end, start), {"vpgc": cfg["vpgc"], "model": cfg["model"]})
    write_resolved(cfg, ckpt.parent, "train")
    print(f"trained steps {start}..{max(end, start)}; checkpoint {ckpt}; loss trace {trace}")
    return 0


def _eval_model(cfg, bb: Backbone):
    kind = cfg["eval"]["model"]
    if kind == "echo":
        return ek.EchoModel()
    model = _fresh_model(cfg, bb)
    if kind == "backbone":
        return ek.VPGCResponder(model, cfg["eval"]["max_new"], cfg["eval"]["batch_size"], use_vpgc=False)
    if kind != "vpgc":
        raise ConfigError(f"eval.model must be vpgc, backbone or echo, got {kind!r}")
    ckpt = resolve_path(cfg["paths"]["checkpoint"])
    if ckpt is None or not ckpt.exists():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    tp.load_training_checkpoint(ckpt, model)
    return ek.VPGCResponder(model, cfg["eval"]["max_new"], cfg["eval"]["batch_size"])


def _load_records(cfg):
    path = resolve_path(cfg["paths"]["records"])
    if not path.exists():
        raise FileNotFoundError(f"records {path} not found")
    return ek.cap_per_task(ek.read_records(path), cfg["eval"]["cap"]), path.parent


def cmd_eval(cfg) -> int:
    records, root = _load_records(cfg)
    bb = load_backbone(cfg) if cfg["eval"]["model"] != "echo" else None
    model = _eval_model(cfg, bb)
    out = resolve_path(cfg["paths"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    result = ek.evaluate(model, records, root)
    ek.write_report(result, out / "report.csv", out / "report.svg")
    for t in result.tasks:
        print(f"{t.task:<14} {t.metric:<9} n={t.n:<4} {t.score:.4f}")
    if result.skipped:
        print(f"skipped records: {result.skipped}")
    if cfg["eval"]["shuffle"]:
        rep = ek.shuffle_probe(model, records, cfg["eval"]["shuffle_seed"], root)
        with open(out / "shuffle.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["task", "original", "shuffled", "delta"])
            for t in rep.original.tasks:
                w.writerow([t.task, repr(t.score), repr(rep.shuffled.task(t.task).score), repr(rep.deltas[t.task])])
        print(f"shuffle probe: {len(rep.deltas)} tasks, {rep.skipped} single-image records skipped")
    write_resolved(cfg, out, "eval")
    return 0


def _probe_one(cfg: dict, layer: int) -> list[tuple]:
    bb = load_backbone(cfg)
    cache = _train_cache(cfg, bb)
    model = _fresh_model(cfg, bb, insert_layer=layer)
    tp.train(model, cache, mix_config(cfg), optim_config(cfg))
    records, root = _load_records(cfg)
    result = ek.evaluate(ek.VPGCResponder(model, cfg["eval"]["max_new"], cfg["eval"]["batch_size"]),
                         records, root)
    return [(layer, t.task, t.metric, t.score) for t in result.tasks]


def cmd_probe_layers(cfg) -> int:
    layers = [int(x) for x in cfg["probe"]["layers"]]
    if not layers:
        raise ConfigError("probe.layers is empty")
    out = resolve_path(cfg["paths"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    workers = int(cfg["probe"]["workers"])
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_probe_one, [cfg] * len(layers), layers))
    else:
        results = [_probe_one(cfg, layer) for layer in layers]
    rows = [r for res in results for r in res]
    with open(out / "probe_layers.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "task", "metric", "score"])
        for layer, task, metric, score in rows:
            w.writerow([layer, task, metric, repr(score)])
    tasks = list(dict.fromkeys(r[1] for r in rows))
    series = {t: [r[3] for r in rows if r[1] == t] for t in tasks}
    (out / "probe_layers.svg").write_text(line_chart(layers, series, title="score by insertion layer",
                                                     x_label="insertion layer", y_min=0.0, y_max=1.0))
    write_resolved(cfg, out, "probe-layers")
    for layer, task, metric, score in rows:
        print(f"layer {layer}: {task} {metric} {score:.4f}")
    return 0


def cmd_dump_attn(cfg) -> int:
    image = resolve_path(cfg["paths"]["image"])
    if image is None:
        raise ConfigError("paths.image is required for dump-attn")
    raster = sg.read_ppm(image)
    bb = load_backbone(cfg)
    if bb.vpg != "qformer":
        raise ConfigError("dump-attn needs a resampler backbone")
    out = resolve_path(cfg["paths"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    _, trace = resample(bb.encoder.encode(raster), None, bb.resampler)
    write_trace_csv(out / "attention.csv", trace)
    glob = avg_attention(trace)
    write_heatmap_ppm(out / "global_map.ppm", glob)
    for layer in range(trace.maps.shape[0]):
        write_heatmap_ppm(out / f"layer{layer}_map.ppm",
                          avg_attention(AttentionTrace(trace.maps[layer:layer + 1], trace.p)))
    np.savetxt(out / "global_map.txt", glob, fmt="%.17g")
    write_resolved(cfg, out, "dump-attn")
    print(f"attention trace for {image} written to {out} (global map sum {glob.sum():.6f})")
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "probe-layers": cmd_probe_layers,
    "dump-attn": cmd_dump_attn,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vpgkit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "pretrain": "train the stand-in backbone and write its checkpoint",
        "gen-data": "build the original/edited pair manifest and held-out eval records",
        "train": "train the completion module; writes a checkpoint and loss.csv",
        "eval": "evaluate on instruction records; writes report.csv/report.svg",
        "probe-layers": "train and evaluate one module per insertion layer",
        "dump-attn": "write the resampler attention trace and heatmaps for one image",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a dotted config key (value parsed as JSON when possible)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, args.overrides)
        return COMMANDS[args.command](cfg)
    except (ConfigError, FileNotFoundError, ValueError, tp.TrainingDiverged) as exc:
        print(f"vpgkit {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
