"""Acceptance criteria 1-8. A summary line per criterion is printed at the end of the run."""
from __future__ import annotations

import json
import math
import time

import numpy as np
import pytest

from conftest import micro_backbone, random_raster, small_backbone
from test_numkit import PRIMITIVE_CASES
from vpgkit import cli
from vpgkit import evalkit as ek
from vpgkit import scenegen as sg
from vpgkit import trainpipe as tp
from vpgkit.decoder import MixedSequence, ModelConfig, lm_loss
from vpgkit.numkit.gradcheck import check_gradients
from vpgkit.vocab import KIND_OPTIONS, default_vocab
from vpgkit.vpgc import Backbone, VPGCConfig, VPGCModel, VPGCWeights, expected_param_count
from vpgkit.vpg import encode_image, resample, avg_attention

crit = pytest.mark.criterion


# --- 1 ----------------------------------------------------------------------------


@crit(1, "zero-init no-op over 100 random triples")
def test_c1_zero_init_noop():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    vocab = default_vocab()
    words = sorted(vocab.stoi)
    worst = 0.0
    for trial in range(100):
        n_layers = int(rng.choice([2, 4, 6]))
        heads = int(rng.choice([1, 2]))
        d = heads * int(rng.choice([4, 8]))
        k = int(rng.integers(1, 5))
        cfg = ModelConfig(n_layers=n_layers, d=d, heads=heads, vocab_size=len(vocab), n_queries=k, max_len=96)
        bb = Backbone(cfg, vocab, patch=8, image_size=16, resampler_layers=int(rng.integers(1, 3)),
                      seed=trial)
        bb.freeze()
        ell = int(rng.integers(1, n_layers))
        model = VPGCModel(bb, VPGCConfig(insert_layer=ell, zero_init_both=bool(rng.integers(2))), seed=trial)
        n_img = int(rng.integers(1, 4))
        seq = MixedSequence().text([vocab.bos])
        for j in range(n_img):
            seq.image(j).text(vocab.encode(" ".join(rng.choice(words, size=int(rng.integers(0, 3))))))
        seq.text(vocab.encode(" ".join(rng.choice(words, size=int(rng.integers(1, 6))))))
        feats = bb.encode_batch([[random_raster(rng) for _ in range(n_img)]])
        batch = bb.batch([seq])
        diff = np.abs(model.forward(batch, feats).data - model.backbone_forward(batch, feats).data).max()
        worst = max(worst, float(diff))
    print(f"max abs logit difference {worst:.3e}")
    assert worst <= 1e-9
    assert time.perf_counter() - t0 < 60


# --- 2 ----------------------------------------------------------------------------


@crit(2, "gradient soundness (micro VPG-C < 1e-3, primitives < 1e-4)")
def test_c2_gradients():
    t0 = time.perf_counter()
    bb = micro_backbone()
    assert (bb.config.n_layers, bb.config.d, bb.config.n_queries, bb.p) == (4, 8, 2, 2)
    rng = np.random.default_rng(202)
    worst = {}
    for seed in range(3):
        model = VPGCModel(bb, VPGCConfig(zero_init_both=False), seed=seed)
        # move W_r off zero so every parameter sits on a live gradient path
        model.weights.params["reint.w"].data = rng.normal(scale=0.5, size=(8, 8))
        model.weights.params["reint.b"].data = rng.normal(scale=0.1, size=8)
        seq = MixedSequence().text([bb.vocab.bos]).image(0).image(1).text(bb.vocab.encode("the red circle"))
        feats = bb.encode_batch([[random_raster(rng), random_raster(rng)]])
        batch = bb.batch([seq], [bb.vocab.encode("a blue star was added")])

        def loss():
            return lm_loss(model.forward(batch, feats), batch.targets, batch.loss_mask)

        for k, e in check_gradients(loss, model.weights.tensors(), eps=1e-6).items():
            worst[k] = max(worst.get(k, 0.0), e)
    print("VPG-C relative errors: " + ", ".join(f"{k}={v:.2e}" for k, v in sorted(worst.items())))
    assert max(worst.values()) < 1e-3
    prim = {}
    for name, case in PRIMITIVE_CASES.items():
        fn, args = case(np.random.default_rng(7))
        prim[name] = max(check_gradients(lambda: fn(*args), {str(i): a for i, a in enumerate(args)}).values())
    print(f"worst primitive relative error {max(prim.values()):.2e} ({max(prim, key=prim.get)})")
    assert max(prim.values()) < 1e-4
    assert time.perf_counter() - t0 < 300


# --- 3 ----------------------------------------------------------------------------


@crit(3, "single pass, frozen backbone after 500 steps, closed-form parameter count")
def test_c3_single_pass_and_frozen():
    full = Backbone(ModelConfig())
    assert VPGCWeights(full).count() == expected_param_count(8, 64) == 8832
    bb = small_backbone()
    pairs, _ = tp.build_dataset(40, bb, seed=303)
    cache = tp.TaskCache(bb, pairs, tp.caption_pool(40, 304))
    model = VPGCModel(bb)
    assert model.weights.count() == expected_param_count(bb.config.n_queries, bb.config.d)
    before = {k: v.copy() for k, v in bb.state_dict().items()}
    init = {k: t.data.copy() for k, t in model.weights.tensors().items()}
    tp.train(model, cache, tp.MixConfig(steps=500), tp.OptimConfig(warmup_steps=50))
    after = bb.state_dict()
    assert before.keys() == after.keys()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert all(not np.array_equal(init[k], t.data) for k, t in model.weights.tensors().items())
    b, feats = cache.disc_batch(np.arange(4))
    bb.decoder.reset_counters()
    model.forward(b, feats)
    assert bb.decoder.layer_calls.tolist() == [1] * bb.config.n_layers


# --- 4 ----------------------------------------------------------------------------


@crit(4, "pipeline fidelity over 1000 pairs")
def test_c4_pipeline_fidelity():
    bb = Backbone(ModelConfig(), seed=404)
    bb.freeze()
    pairs, stats = tp.build_dataset(1000, bb, seed=404)
    assert len(pairs) == 1000
    kinds = {k: 0 for k in sg.EDIT_KINDS}
    for p in pairs:
        # recompute Φ one image at a time, independently of the batched build
        grid = encode_image(p.raster_before, bb.encoder)
        _, trace = resample(grid, None, bb.resampler)
        scores = tp.significance(avg_attention(trace), sg.render(p.scene_before)[1]).scores
        assert scores[p.target_id] <= min(scores.values()) + 1e-12
        e, s, a = p.edit, p.scene_before, p.scene_after
        kinds[e.kind] += 1
        assert sg.apply_edit(s, e) == a
        rest = lambda sc, ids: {o.id: o for o in sc.objects if o.id not in ids}
        if e.kind == "ADD":
            cover = sg.shape_coverage(e.new_object, s.width, s.height)
            assert not np.any(cover & (sg.ownership(s) >= 0))
            assert len(a.objects) == len(s.objects) + 1 and rest(a, {e.new_object.id}) == rest(s, set())
        elif e.kind == "DELETE":
            assert e.target_id == p.target_id
            assert len(a.objects) == len(s.objects) - 1 and rest(a, set()) == rest(s, {e.target_id})
        elif e.kind == "SWAP":
            i, j = e.pair_ids
            assert p.target_id in e.pair_ids
            assert (a.get(i).cx, a.get(i).cy, a.get(j).cx, a.get(j).cy) == \
                (s.get(j).cx, s.get(j).cy, s.get(i).cx, s.get(i).cy)
            assert rest(a, {i, j}) == rest(s, {i, j})
        else:
            assert e.target_id == p.target_id
            o0, o1 = s.get(e.target_id), a.get(e.target_id)
            changed = [f for f in ("shape", "color", "size", "cx", "cy", "z") if getattr(o0, f) != getattr(o1, f)]
            assert len(changed) == 1 and rest(a, {e.target_id}) == rest(s, {e.target_id})
    print(f"edit kinds over 1000 pairs: {kinds}; skipped {stats.skipped}")
    assert all(kinds.values())
    rng = np.random.default_rng(405)
    for _ in range(200):
        p = int(rng.choice([2, 4, 8]))
        a = rng.dirichlet(np.ones(p * p)).reshape(p, p)
        cells = rng.random((p, p)) < 0.5
        cells.flat[rng.integers(p * p)] = True
        scale = 64 // p
        mask = np.kron(cells, np.ones((scale, scale), dtype=bool))
        ys, xs = np.nonzero(mask)
        brute = float(np.mean([a[y // scale, x // scale] for y, x in zip(ys, xs)]))
        assert abs(tp.significance(a, [sg.ObjectMask(0, mask)]).scores[0] - brute) <= 1e-9


# --- 5 ----------------------------------------------------------------------------


def _lcs(a, b):
    t = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a)):
        for j in range(len(b)):
            t[i + 1][j + 1] = t[i][j] + 1 if a[i] == b[j] else max(t[i][j + 1], t[i + 1][j])
    return t[-1][-1]


@crit(5, "metric oracles (ROUGE-L, exact option match, TF-IDF example)")
def test_c5_metric_oracles():
    rng = np.random.default_rng(505)
    words = ["red", "blue", "circle", "square", "the", "a", "was", "added"]
    for _ in range(1000):
        a = list(rng.choice(words, size=int(rng.integers(0, 21))))
        b = list(rng.choice(words, size=int(rng.integers(0, 21))))
        lcs = _lcs(a, b)
        expect = 0.0 if lcs == 0 else 2 * (lcs / len(a)) * (lcs / len(b)) / (lcs / len(a) + lcs / len(b))
        assert ek.rouge_l(" ".join(a), " ".join(b)) == expect
    hits = 0
    for i in range(500):
        kind = i % 3
        if kind == 0:
            opts = list(KIND_OPTIONS)
        elif kind == 1:
            opts = [sg.describe_edit(tp.propose_edit(s, s.objects[0].id, i), s)
                    for s in (sg.gen_scene(1000 * i + j) for j in range(int(rng.integers(2, 6))))]
        else:
            opts = [" ".join(rng.choice(words, size=int(rng.integers(1, 6)))) for _ in range(int(rng.integers(2, 6)))]
        pick = int(rng.integers(len(opts)))
        hits += ek.match_option(opts[pick], opts) == opts.index(opts[pick])
    print(f"exact-option fixtures matched: {hits}/500")
    assert hits == 500
    assert ek.match_option("it is a blue square I think", ["red circle", "blue square", "green star"]) == 1


# --- 6 ----------------------------------------------------------------------------


@crit(6, "learning check: held-out token accuracy >= 0.9 and >= +5 points over the frozen baseline")
def test_c6_learning_check(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path))
    assert cli.main(["pretrain"]) == 0
    assert cli.main(["gen-data"]) == 0
    t0 = time.perf_counter()
    assert cli.main(["train"]) == 0
    train_minutes = (time.perf_counter() - t0) / 60
    cfg = cli.resolve_config()
    assert (cfg["model"]["n_layers"], cfg["model"]["d"], cfg["model"]["n_queries"]) == (8, 64, 8)
    assert (cfg["data"]["n_pairs"], cfg["mix"]["steps"]) == (500, 3000)
    bb = cli.load_backbone(cfg)
    pairs, _ = cli.build_data(cfg, bb)
    held = tp.TaskCache(bb, pairs[cfg["data"]["n_pairs"]:], [])
    model = cli._fresh_model(cfg, bb)
    tp.load_training_checkpoint(tmp_path / cfg["paths"]["checkpoint"], model)
    acc_vpgc = tp.token_accuracy(model, held)
    acc_base = tp.token_accuracy(model, held, use_vpgc=False)
    print(f"held-out token accuracy: vpgc={acc_vpgc:.4f} baseline={acc_base:.4f} "
          f"train={train_minutes:.1f} min")
    assert train_minutes < 30
    assert acc_vpgc >= 0.9
    assert acc_vpgc - acc_base >= 0.05


# --- 7 ----------------------------------------------------------------------------


@crit(7, "ablation plumbing: all variants train and evaluate, probe-layers over 3 layers")
def test_c7_variants_and_probe(tmp_path, monkeypatch):
    pairs = tp.random_target_pairs(12, 707)
    caps = tp.caption_pool(12, 708)
    records = ek.records_from_pairs(pairs[:4], tmp_path / "eval")
    for vpg, variant in (("qformer", "qformer"), ("linear", "linear"), ("qformer", "heuristic"),
                         ("qformer", "off")):
        cfg = ModelConfig(vocab_size=len(default_vocab()), n_layers=4, d=16, heads=2, n_queries=4,
                          max_len=160)
        bb = Backbone(cfg, vpg=vpg, resampler_layers=1)
        bb.freeze()
        model = VPGCModel(bb, VPGCConfig(variant=variant))
        rows, _ = tp.train(model, tp.TaskCache(bb, pairs, caps), tp.MixConfig(steps=3), tp.OptimConfig(warmup_steps=1))
        assert len(rows) == 3 and all(math.isfinite(r["loss_disc"]) for r in rows)
        res = ek.evaluate(ek.VPGCResponder(model, max_new=4), records, tmp_path / "eval")
        assert [t.task for t in res.tasks] == ["difference", "change_kind", "caption"]
        print(f"{variant}: " + ", ".join(f"{t.task}={t.score:.3f}" for t in res.tasks))

    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "probe"))
    tiny = ["--set", "model.n_layers=8", "--set", "model.d=16", "--set", "model.heads=2",
            "--set", "model.n_queries=4", "--set", "model.resampler_layers=1", "--set", "paths.backbone=null",
            "--set", "data.n_pairs=8", "--set", "data.n_heldout=3", "--set", "data.n_captions=8",
            "--set", "mix.steps=2", "--set", "eval.max_new=4"]
    assert cli.main(["gen-data", *tiny]) == 0
    assert cli.main(["probe-layers", *tiny, "--set", "probe.layers=[2,4,6]"]) == 0
    lines = (tmp_path / "probe" / "run" / "probe_layers.csv").read_text().splitlines()
    assert lines[0] == "layer,task,metric,score" and len(lines) == 1 + 3 * 3
    assert {ln.split(",")[0] for ln in lines[1:]} == {"2", "4", "6"}
    svg = (tmp_path / "probe" / "run" / "probe_layers.svg").read_text()
    assert svg.startswith("<svg") and svg.count("<polyline") == 3


# --- 8 ----------------------------------------------------------------------------


@crit(8, "determinism: reruns from the resolved config are byte-identical")
def test_c8_determinism(tmp_path, monkeypatch):
    overrides = {"model": {"n_layers": 2, "d": 16, "heads": 2, "n_queries": 4, "resampler_layers": 1},
                 "data": {"n_pairs": 12, "n_heldout": 4, "n_captions": 12},
                 "mix": {"steps": 6}, "optim": {"warmup_steps": 2}, "eval": {"max_new": 4, "shuffle": True},
                 "paths": {"backbone": None}}
    outputs = []
    for attempt in ("a", "b"):
        root = tmp_path / attempt
        monkeypatch.setenv(cli.OUT_ENV, str(root))
        if attempt == "a":
            cfg_file = tmp_path / "run.json"
            cfg_file.write_text(json.dumps(overrides))
        else:
            # the second run starts from the first run's resolved config alone
            cfg_file = tmp_path / "a" / "run" / "resolved_config.json"
        for cmd in ("gen-data", "train", "eval"):
            assert cli.main([cmd, "--config", str(cfg_file)]) == 0
        outputs.append({name: (root / name).read_bytes() for name in
                        ("data/manifest.jsonl", "data/eval/records.jsonl", "run/loss.csv", "run/report.csv",
                         "run/report.svg", "run/shuffle.csv", "run/vpgc.ckpt")})
    for name in outputs[0]:
        assert outputs[0][name] == outputs[1][name], name
