from __future__ import annotations

import math

import numpy as np
import pytest

from vpgkit.decoder import Decoder, MixedSequence, ModelConfig, build_batch, lm_loss
from vpgkit.numkit import ShapeError, Tensor

CFG = ModelConfig(n_layers=4, d=16, heads=2, vocab_size=20, n_queries=3, max_len=64)
IMG, EOS, PAD = 4, 2, 0


def batch_of(seqs, responses=None, k=3):
    return build_batch(seqs, responses, k, IMG, EOS, PAD)


def prompts_for(batch, rng, d=16):
    B, J, K = batch.slot_index.shape
    return Tensor(rng.normal(size=(B, J * K, d)))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(n_layers=5)
    with pytest.raises(ValueError):
        ModelConfig(n_layers=8, insert_layer=8)
    assert ModelConfig(n_layers=8).intercept == 4


def test_assemble_counts_and_slots():
    seq = MixedSequence().text([6, 7]).image(0).text([8, 9, 10])
    b = batch_of([seq], k=8)
    assert b.ids.shape == (1, 13)
    assert b.slot_index[0, 0].tolist() == list(range(2, 10))
    two = batch_of([MixedSequence().text([6]).image(0).text([7]).image(1).text([8])])
    s0, s1 = two.slot_index[0]
    assert s0.max() < s1.min() and not set(s0) & set(s1)


def test_assemble_prompts_verbatim_plus_position():
    rng = np.random.default_rng(0)
    dec = Decoder(CFG)
    b = batch_of([MixedSequence().text([6]).image(0).text([7])])
    p = prompts_for(b, rng)
    h0 = dec.assemble(b, p).data
    pos = dec.params["pos_emb"].data
    assert np.array_equal(h0[0, 1:4], p.data[0] + pos[1:4])
    assert np.array_equal(h0[0, 0], dec.params["tok_emb"].data[6] + pos[0])


def test_assemble_text_only_and_errors():
    dec = Decoder(CFG)
    b = batch_of([MixedSequence().text([6, 7, 8])])
    h0 = dec.assemble(b, None)
    assert h0.shape == (1, 3, 16)
    img = batch_of([MixedSequence().text([6]).image(0)])
    with pytest.raises(ShapeError):
        dec.assemble(img, None)
    with pytest.raises(ShapeError):
        dec.assemble(img, Tensor(np.zeros((1, 2, 16))))


def test_mixed_image_counts_rejected():
    with pytest.raises(ValueError):
        batch_of([MixedSequence().image(0), MixedSequence().image(0).image(1)])


def test_loss_mask_covers_response():
    b = batch_of([MixedSequence().text([6, 7])], [[11, 12]])
    # ids: 6 7 11 12 eos ; supervised predictions: 7->11, 11->12, 12->eos
    assert b.loss_mask[0].tolist() == [0, 1, 1, 1, 0]
    assert b.targets[0, 1:4].tolist() == [11, 12, EOS]
    assert b.last_input[0] == 1


def test_split_consistency_every_layer():
    rng = np.random.default_rng(1)
    dec = Decoder(CFG)
    b = batch_of([MixedSequence().text([6]).image(0).text([7, 8])])
    h0 = dec.assemble(b, prompts_for(b, rng))
    full = dec.forward(h0).data
    for k in range(CFG.n_layers + 1):
        split = dec.forward_from(dec.forward_to(h0, k), k).data
        assert np.array_equal(split, full)
    assert np.array_equal(dec.forward_to(h0, 0).hidden.data, h0.data)


def test_forward_errors():
    dec = Decoder(CFG)
    h0 = dec.assemble(batch_of([MixedSequence().text([6, 7])]), None)
    with pytest.raises(ValueError):
        dec.forward_to(h0, CFG.n_layers + 1)
    with pytest.raises(ValueError):
        dec.forward_from(dec.forward_to(h0, 2), 1)


def test_causality():
    rng = np.random.default_rng(2)
    dec = Decoder(CFG)
    ids = [6, 7, 8, 9, 10, 11]
    b1 = batch_of([MixedSequence().text(ids)])
    h = dec.assemble(b1, None)
    ref = [dec.forward_to(h, layer).hidden.data for layer in range(1, 5)]
    for t in range(1, len(ids)):
        mod = list(ids)
        mod[t] = int(rng.integers(5, 20))
        h2 = dec.assemble(batch_of([MixedSequence().text(mod)]), None)
        for layer in range(1, 5):
            out = dec.forward_to(h2, layer).hidden.data
            assert np.array_equal(out[0, :t], ref[layer - 1][0, :t])


def test_splice_outside_slots_changes_logits():
    rng = np.random.default_rng(3)
    dec = Decoder(CFG)
    b = batch_of([MixedSequence().text([6]).image(0).text([7, 8])])
    h0 = dec.assemble(b, prompts_for(b, rng))
    st = dec.forward_to(h0, 2)
    base = dec.forward_from(st, 2).data
    hid = st.hidden.data.copy()
    hid[0, 5] += rng.normal(size=16)  # a uniform shift would be cancelled by layer norm
    st.hidden = Tensor(hid)
    assert not np.allclose(dec.forward_from(st, 2).data, base)


def test_layer_counter():
    dec = Decoder(CFG)
    h0 = dec.assemble(batch_of([MixedSequence().text([6, 7])]), None)
    dec.reset_counters()
    dec.forward(h0)
    assert dec.layer_calls.tolist() == [1] * CFG.n_layers


def test_lm_loss_examples():
    V = 5
    assert lm_loss(Tensor(np.zeros((1, 3, V))), [[0, 1, 2]], [[1, 1, 1]]).item() == pytest.approx(math.log(V))
    big = np.full((1, 2, V), -50.0)
    big[0, 0, 3] = big[0, 1, 1] = 50.0
    assert lm_loss(Tensor(big), [[3, 1]], [[1, 1]]).item() < 1e-30
    logits = np.array([[[1.0, 2.0, 0.0], [0.5, -1.0, 2.0]]])
    ce = lambda row, t: -row[t] + math.log(sum(math.exp(x) for x in row))
    expected = (ce(logits[0, 0], 1) + ce(logits[0, 1], 0)) / 2
    assert lm_loss(Tensor(logits), [[1, 0]], [[1, 1]]).item() == pytest.approx(expected, abs=1e-14)
    with pytest.raises(ValueError):
        lm_loss(Tensor(logits), [[1, 0]], [[0, 0]])


def test_sequence_too_long():
    dec = Decoder(ModelConfig(n_layers=2, d=8, heads=2, vocab_size=20, max_len=4))
    with pytest.raises(ShapeError):
        dec.assemble(batch_of([MixedSequence().text([6, 7, 8, 9, 10])]), None)
