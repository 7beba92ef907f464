import math

import numpy as np
import pytest

from lasfuse import autograd as ag
from lasfuse.autograd import Tensor
from lasfuse.corpus import Utterance, collate
from lasfuse.las import LAS, LasConfig, attend, encoder_length, lstm_params, sequence_loss
from lasfuse.params import AdamState, adam_step
from lasfuse.tokenizer import BOS_ID, TokenSeq

import _gradsuite

F64 = np.float64


def _model(layers=3, V=9, F=4, seed=0, dropout=0.0, dtype=F64):
    cfg = LasConfig(feat_dim=F, vocab_size=V, enc_layers=layers, enc_units=5, dec_units=6, emb_dim=4, att_dim=5,
                    dropout=dropout)
    return LAS(cfg, rng=np.random.default_rng(seed), dtype=dtype)


def _batch(rng, V=9, F=4, n=3, dtype=F64):
    utts = []
    for r in range(n):
        toks = tuple(int(t) for t in rng.integers(3, V, size=2 + r)) + (2,)
        utts.append(Utterance(f"u{r}", "", TokenSeq(toks), rng.standard_normal((7 + 3 * r, F))))
    return collate(utts, 0, dtype)


def _oracle_length(T, L):
    for _ in range(L - 1):
        T = (T + 1) // 2
    return T


@pytest.mark.parametrize("L", [1, 2, 3, 4])
def test_encoder_length_law_all_T(L):
    model = _model(layers=L)
    rng = np.random.default_rng(L)
    for T in range(1, 65):
        assert encoder_length(T, L) == _oracle_length(T, L)
        enc = model.encode(rng.standard_normal((T, 4)))
        assert enc.h.shape == (1, _oracle_length(T, L), 10)
        assert int(enc.lengths[0]) == encoder_length(T, L)


def test_encoder_length_examples():
    assert encoder_length(16, 4) == 2
    assert encoder_length(1, 4) == 1
    assert encoder_length(64, 4) == 8


def test_encoder_rejects_empty_input():
    with pytest.raises(ValueError):
        encoder_length(0, 3)
    with pytest.raises(ValueError):
        _model().encode(np.zeros((0, 4)))


def test_pooling_is_pairwise_max_of_captured_states():
    model = _model(layers=3)
    frames = np.random.default_rng(1).standard_normal((11, 4))
    enc = model.encode(frames, keep_layers=True)
    for l in range(2):
        x, L = enc.layers[l]
        x = x.data[0, : L[0]]
        pooled = np.array([x[i : i + 2].max(axis=0) for i in range(0, len(x), 2)])
        nxt = Tensor(pooled[None])
        fw = ag.lstm_sequence(nxt, *lstm_params(model.store, f"enc.l{l + 1}.fw"))
        bw = ag.lstm_sequence(nxt, *lstm_params(model.store, f"enc.l{l + 1}.bw"), reverse=True)
        x2, L2 = enc.layers[l + 1]
        assert L2[0] == math.ceil(L[0] / 2)
        assert np.allclose(np.concatenate([fw.data, bw.data], -1)[0], x2.data[0, : L2[0]], atol=1e-12)


def test_padded_batch_encoding_matches_single():
    model = _model()
    rng = np.random.default_rng(2)
    b = _batch(rng)
    enc = model.encode(b.frames, b.frame_lengths)
    for r in range(b.size):
        T = b.frame_lengths[r]
        one = model.encode(b.frames[r, :T])
        K = int(enc.lengths[r])
        assert np.allclose(enc.h.data[r, :K], one.h.data[0], atol=1e-12)


# attention -----------------------------------------------------------------


def _enc_from(model, h):
    from lasfuse.las import EncoderOutput
    h = Tensor(np.asarray(h, dtype=F64))
    return EncoderOutput(h, ag.matmul(h, model.store["att.W_h"]), [h.shape[1]] * h.shape[0])


def test_attention_single_position():
    model = _model()
    h = np.random.default_rng(3).standard_normal((1, 1, 10))
    ctx, alpha = attend(model.store, Tensor(np.ones((1, 6))), _enc_from(model, h))
    assert np.allclose(alpha.data, [[1.0]]) and np.allclose(ctx.data, h[:, 0])


def test_attention_identical_features():
    model = _model()
    row = np.random.default_rng(4).standard_normal(10)
    h = np.tile(row, (1, 5, 1))
    ctx, _ = attend(model.store, Tensor(np.random.default_rng(5).standard_normal((1, 6))), _enc_from(model, h))
    assert np.allclose(ctx.data[0], row, atol=1e-12)


def test_attention_matches_direct_formula():
    model = _model()
    s = model.store
    rng = np.random.default_rng(6)
    h = rng.standard_normal((1, 6, 10))
    d = rng.standard_normal((1, 6))
    ctx, alpha = attend(s, Tensor(d), _enc_from(model, h))
    W_h, W_d, b_a, v = (s[n].data for n in ("att.W_h", "att.W_d", "att.b_a", "att.v"))
    u = np.array([v @ np.tanh(W_h.T @ h[0, i] + W_d.T @ d[0] + b_a) for i in range(6)])
    a = np.exp(u - u.max())
    a /= a.sum()
    assert np.allclose(alpha.data[0], a, atol=1e-12)
    assert np.allclose(ctx.data[0], (a[:, None] * h[0]).sum(0), atol=1e-12)
    assert np.all(alpha.data >= 0) and alpha.shape[-1] == 6


# decoder -------------------------------------------------------------------


def test_decoder_step_posterior_normalized_and_pure():
    model = _model(dtype=np.float32)
    enc = model.encode(np.random.default_rng(7).standard_normal((9, 4)))
    p1, s1 = model.decoder_step(BOS_ID, None, enc)
    p2, s2 = model.decoder_step(BOS_ID, None, enc)
    assert abs(p1.sum() - 1) < 1e-6
    assert np.array_equal(p1, p2) and all(np.array_equal(s1[k].data, s2[k].data) for k in s1)
    p3, _ = model.decoder_step(4, s1, enc)
    assert abs(p3.sum() - 1) < 1e-6


def test_decoder_step_invalid_label():
    model = _model()
    enc = model.encode(np.zeros((4, 4)))
    with pytest.raises(IndexError):
        model.decoder_step(99, None, enc)


def test_stepwise_product_equals_exp_neg_loss():
    model = _model()
    rng = np.random.default_rng(8)
    frames = rng.standard_normal((8, 4))
    toks = (5, 3, 7, 2)
    b = collate([Utterance("x", "", TokenSeq(toks), frames)], 0, F64)
    loss = sequence_loss(model, b, smoothing=0.0, sampling_prob=1.0).item()
    enc = model.encode(frames)
    prob, state, prev = 1.0, None, BOS_ID
    for y in toks:
        p, state = model.decoder_step(prev, state, enc)
        prob *= p[0, y]
        prev = y
    assert prob == pytest.approx(math.exp(-loss), rel=1e-10)


def test_batched_loss_is_sum_of_single_losses():
    model = _model()
    b = _batch(np.random.default_rng(9))
    total = sequence_loss(model, b, smoothing=0.1).item()
    from lasfuse.corpus import Batch
    singles = 0.0
    for r in range(b.size):
        T, U = b.frame_lengths[r], int(b.target_mask[r].sum())
        one = Batch(b.frames[r : r + 1, :T], b.frame_lengths[r : r + 1], b.targets[r : r + 1, :U],
                    b.target_mask[r : r + 1, :U], [r])
        singles += sequence_loss(model, one, smoothing=0.1).item()
    assert total == pytest.approx(singles, rel=1e-10)


def test_scheduled_sampling_changes_inputs_only_when_enabled():
    model = _model()
    b = _batch(np.random.default_rng(10))
    tf = sequence_loss(model, b)
    same = sequence_loss(model, b, sampling_prob=1.0, rng=np.random.default_rng(0))
    assert tf.item() == same.item()
    losses = {sequence_loss(model, b, sampling_prob=0.0, rng=np.random.default_rng(s)).item() for s in range(5)}
    assert len(losses) > 1


def test_sampling_needs_rng_and_nonempty_targets():
    model = _model()
    b = _batch(np.random.default_rng(11))
    with pytest.raises(ValueError):
        sequence_loss(model, b, sampling_prob=0.9)
    from lasfuse.corpus import Batch
    empty = Batch(b.frames, b.frame_lengths, np.zeros((b.size, 0), dtype=np.int64), np.zeros((b.size, 0)), b.ids)
    with pytest.raises(ValueError):
        sequence_loss(model, empty)


def test_loss_gradient_fd():
    worst, per = _gradsuite.check_las_loss(np.random.default_rng(12))
    assert worst < 1e-5
    assert "out.W_s" in per


def test_training_step_bit_reproducible():
    def run():
        model = _model(dropout=0.1, dtype=np.float32)
        b = _batch(np.random.default_rng(13), dtype=np.float32)
        rng = np.random.default_rng(14)
        st = AdamState(lr=0.01)
        for _ in range(2):
            model.store.zero_grad()
            sequence_loss(model, b, 0.1, 0.9, rng, train=True).backward()
            adam_step(model.store, st)
        return model.store.arrays()

    a, b = run(), run()
    assert all(a[n].tobytes() == b[n].tobytes() for n in a)
