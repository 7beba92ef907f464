import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lasfuse.corpus import Utterance, collate
from lasfuse.decoding import (DecodeConfig, DecodeError, beam_search, coverage, greedy_decode, greedy_decode_batch,
                              nbest_record, read_nbest, sequence_score, write_nbest)
from lasfuse.experiment import Tuner
from lasfuse.fusion import FusionMode, ModelBundle
from lasfuse.las import LAS, LasConfig, sequence_loss
from lasfuse.lm import LmConfig, RnnLm
from lasfuse.params import AdamState, adam_step
from lasfuse.tokenizer import EOS_ID, TokenSeq

from _oracles import enumerate_finished, score_sequence

F64 = np.float64


def random_system(seed, V=6, scale=1.0, with_lm=True):
    """Untrained fp64 model (and LM) with weights large enough to give peaked posteriors."""
    rng = np.random.default_rng(seed)
    m = LAS(LasConfig(3, V, enc_layers=2, enc_units=4, dec_units=5, emb_dim=3, att_dim=3, dropout=0.0), rng=rng,
            dtype=F64)
    for n in m.store:
        m.store[n].data = rng.standard_normal(m.store[n].shape) * scale
    lm = None
    if with_lm:
        lm = RnnLm(LmConfig(V, emb_dim=3, units=4, proj_dim=3, dropout=0.0), rng=rng, dtype=F64)
        for n in lm.store:
            lm.store[n].data = rng.standard_normal(lm.store[n].shape) * scale
    frames = rng.standard_normal((int(rng.integers(2, 9)), 3))
    return m, lm, frames


def _rank_key(nb):
    return (nb.finished, nb.totals[0])


# equivalences ----------------------------------------------------------------


def test_beam1_equals_greedy_on_dev(tiny_baseline, tiny_data):
    model = tiny_baseline[0].model
    cfg = DecodeConfig(beam=1, max_len=20)
    greedy = greedy_decode_batch(model, [u.frames for u in tiny_data.dev], 20)
    for u, g in zip(tiny_data.dev, greedy):
        assert beam_search(model, u.frames, cfg).best.tokens == g


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_beam1_equals_greedy_random(seed):
    m, _, fr = random_system(seed, V=8)
    assert beam_search(m, fr, DecodeConfig(beam=1, max_len=6)).best.tokens == greedy_decode(m, fr, 6)


@pytest.mark.parametrize("seed", range(12))
def test_exhaustive_beam_matches_enumeration(seed):
    # 6 ids = PAD, BOS (never emitted) + EOS + 3 pieces, so 4 emittable labels
    m, lm, fr = random_system(seed)
    rng = np.random.default_rng(seed + 1000)
    knobs = dict(lm_weight=float(rng.choice([0, 0.3])), insertion_reward=float(rng.choice([0, 0.7])),
                 coverage_weight=float(rng.choice([0, 0.2])))
    cfg = DecodeConfig(beam=64, max_len=3, **knobs)
    got = beam_search(ModelBundle(m, FusionMode("shallow"), lm), fr, cfg)
    scored = {seq: score_sequence(m, lm, fr, seq, knobs["lm_weight"], knobs["insertion_reward"],
                                  knobs["coverage_weight"])[0] for seq in enumerate_finished([2, 3, 4, 5], 3)}
    best = max(scored, key=lambda s: (scored[s], tuple(-x for x in s)))
    assert got.best.tokens == best
    assert got.totals[0] == pytest.approx(scored[best], abs=1e-9)


# score accounting --------------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([1, 3, 5]), st.floats(0, 0.5), st.floats(0, 1), st.floats(0, 0.1))
def test_scores_match_recomputation(seed, beam, lam, ins, cov):
    m, lm, fr = random_system(seed, V=7, scale=0.7)
    cfg = DecodeConfig(beam=beam, max_len=5, lm_weight=lam, insertion_reward=ins, coverage_weight=cov)
    nb = beam_search(ModelBundle(m, FusionMode("shallow"), lm), fr, cfg)
    assert len(nb.hyps) <= beam
    for h, total in zip(nb.hyps, nb.totals):
        expect = h.asr_logp + lam * h.lm_logp + ins * h.length + (cov * h.coverage if cov else 0.0)
        assert abs(total - expect) < 1e-9 and abs(h.total(cfg) - total) < 1e-9
        ref, asr, lmp, c = score_sequence(m, lm, fr, h.tokens, lam, ins, cov)
        assert abs(asr - h.asr_logp) < 1e-9 and abs(c - h.coverage) < 1e-9
        assert abs(lmp - h.lm_logp) < 1e-9 if lam else h.lm_logp == 0.0
        assert abs(ref - total) < 1e-8
        assert h.length == sum(1 for y in h.tokens if y != EOS_ID)
        if nb.finished:
            assert h.tokens[-1] == EOS_ID and not h.alive and list(h.tokens).count(EOS_ID) == 1
    # sorted by total, ties by token ids
    keys = [(-t, h.tokens) for h, t in zip(nb.hyps, nb.totals)]
    assert keys == sorted(keys)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.floats(0, 1.0), st.floats(0, 0.3))
def test_larger_beam_never_hurts(seed, ins, cov):
    m, lm, fr = random_system(seed, V=8)
    results = [beam_search(m, fr, DecodeConfig(beam=b, max_len=5, insertion_reward=ins, coverage_weight=cov))
               for b in (1, 2, 3, 5, 8)]
    # a finished result outranks the unfinished fallback
    for small, big in zip(results, results[1:]):
        if small.finished:
            assert big.finished and big.totals[0] >= small.totals[0] - 1e-9


def test_larger_beam_never_hurts_trained(tiny_baseline, tiny_lm, tiny_data):
    bundle = ModelBundle(tiny_baseline[0].model, FusionMode("shallow", 0.3), tiny_lm)
    for u in tiny_data.dev[:15]:
        res = [beam_search(bundle, u.frames, DecodeConfig(beam=b, max_len=20, lm_weight=0.3, insertion_reward=0.5))
               for b in (1, 2, 4, 8)]
        for small, big in zip(res, res[1:]):
            assert _rank_key(big) >= _rank_key(small)


def test_zero_lm_weight_bypasses_lm(tiny_baseline, tiny_lm, tiny_data):
    base = tiny_baseline[0].model
    fused = ModelBundle(base, FusionMode("shallow", 0.0), tiny_lm)
    for u in tiny_data.dev[:10]:
        cfg = DecodeConfig(beam=4, max_len=20, insertion_reward=0.5)
        a, b = beam_search(fused, u.frames, cfg), beam_search(base, u.frames, cfg)
        assert all(h.lm_logp == 0.0 for h in a.hyps)
        assert [h.tokens for h in a.hyps] == [h.tokens for h in b.hyps]


def test_lm_weight_without_lm_is_error():
    m, _, fr = random_system(0, with_lm=False)
    with pytest.raises(DecodeError):
        beam_search(m, fr, DecodeConfig(lm_weight=0.2))


def test_unfinished_search_is_flagged():
    m, _, fr = random_system(1, V=6)
    m.store["out.b_s"].data[EOS_ID] = -1e3
    nb = beam_search(m, fr, DecodeConfig(beam=3, max_len=4))
    assert not nb.finished and all(h.alive and len(h.tokens) == 4 for h in nb.hyps)


@pytest.mark.parametrize("kw", [dict(beam=0), dict(max_len=0), dict(lm_weight=-1)])
def test_decode_config_validation(kw):
    with pytest.raises(ValueError):
        DecodeConfig(**kw)


# greedy ------------------------------------------------------------------------


def test_greedy_deterministic(tiny_baseline, tiny_data):
    model = tiny_baseline[0].model
    fr = tiny_data.dev[0].frames
    assert greedy_decode(model, fr, 20) == greedy_decode(model, fr, 20)


def test_greedy_reproduces_memorized_pair():
    rng = np.random.default_rng(0)
    cfg = LasConfig(4, 9, enc_layers=2, enc_units=8, dec_units=12, emb_dim=6, att_dim=6, dropout=0.0)
    m = LAS(cfg, rng=rng)
    target = (5, 3, 8, 4, EOS_ID)
    frames = rng.standard_normal((12, 4)).astype(np.float32)
    batch = collate([Utterance("x", "", TokenSeq(target), frames)], 0)
    state = AdamState(lr=0.02)
    for _ in range(150):
        m.store.zero_grad()
        sequence_loss(m, batch).backward()
        adam_step(m.store, state)
    assert greedy_decode(m, frames, 10) == target


def test_greedy_tie_breaks_to_lowest_id():
    m, _, fr = random_system(2, V=6)
    m.store["out.W_s"].data[...] = 0
    m.store["out.b_s"].data[...] = 0
    # all labels tie; PAD and BOS are never emitted, EOS is the lowest remaining id
    assert greedy_decode(m, fr, 5) == (EOS_ID,)


# coverage ----------------------------------------------------------------------


def test_coverage_full_attention_is_zero():
    assert coverage([[0.6, 1.0, 0.3], [0.5, 0.2, 0.9]]) == 0.0


def test_coverage_single_deficit():
    assert coverage([[0.5, 1.0, 1.0], [0.0, 0.0, 0.5]]) == pytest.approx(math.log(0.5))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 2**31))
def test_coverage_matches_direct_formula(steps, K, seed):
    a = np.random.default_rng(seed).dirichlet(np.ones(K), size=steps)
    expect = sum(math.log(min(sum(a[t, i] for t in range(steps)), 1.0)) for i in range(K))
    assert coverage(a) == pytest.approx(expect, abs=1e-12)


# N-best I/O and tuning -----------------------------------------------------------


def test_nbest_jsonl_roundtrip(tmp_path, tiny_baseline, tiny_data):
    model = tiny_baseline[0].model
    cfg = DecodeConfig(beam=3, max_len=20)
    recs = [nbest_record(beam_search(model, u.frames, cfg, u.id), tiny_data.vocab, cfg) for u in tiny_data.dev[:4]]
    write_nbest(tmp_path / "nb.jsonl", recs)
    back = read_nbest(tmp_path / "nb.jsonl")
    assert back == recs
    for r in back:
        assert set(r["hyps"][0]) >= {"text", "asr_logp", "lm_logp", "coverage", "length", "total"}
    (tmp_path / "bad.jsonl").write_text('{"x": 1}\n')
    with pytest.raises(ValueError):
        read_nbest(tmp_path / "bad.jsonl")


def test_sequence_score_matches_teacher_forced_loss(tiny_baseline, tiny_data):
    model = tiny_baseline[0].model
    u = tiny_data.dev[1]
    loss = sequence_loss(model, collate([u], 0)).item()
    assert sequence_score(model, u.frames, u.tokens.ids) == pytest.approx(-loss, rel=1e-5)


def test_tuner_accepts_full_grids(tiny_baseline, tiny_lm, tiny_data):
    lam = [0, 0.05, 0.1, 0.15, 0.2, 0.25]
    ins = [round(0.1 * i, 1) for i in range(10)]
    cov = [0, 0.01, 0.02, 0.03, 0.04, 0.05]
    bundle = ModelBundle(tiny_baseline[0].model, FusionMode("shallow"), tiny_lm)
    tuner = Tuner(bundle, tiny_data.dev[:5], tiny_data.vocab, beam=2, max_len=20, mode="shallow")
    res = tuner.run(lam, ins, cov)
    assert res["lm_weight"] in lam and res["insertion_reward"] in ins and res["coverage_weight"] in cov
    # LM weight and insertion reward are searched jointly, so the result beats every pair at zero coverage
    pairs = {(r["lm_weight"], r["insertion_reward"]): r["dev_wer"] for r in res["grid"] if r["coverage_weight"] == 0}
    assert set(pairs) == {(float(a), float(b)) for a in lam for b in ins}
    assert res["dev_wer"] <= min(pairs.values())
    assert {r["lm_weight"] for r in res["grid"]} == set(lam)
    assert {r["insertion_reward"] for r in res["grid"]} == set(ins)
    assert {r["coverage_weight"] for r in res["grid"]} == set(cov)
