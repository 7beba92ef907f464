from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lasfuse.corpus import (DEFAULT_GRAMMAR, Grammar, SynthConfig, Utterance, collate, dedup_cap,
                            default_batch_sizes, iterate_epoch, make_prototypes, plan_buckets, read_corpus,
                            synth_utterance, text_utterance, write_corpus)
from lasfuse.tokenizer import CoverageError, learn_bpe


@pytest.fixture(scope="module")
def grammar_vocab():
    g = Grammar(DEFAULT_GRAMMAR)
    lines = g.sample_lines(400, np.random.default_rng(0))
    return g, lines, learn_bpe(lines, 60)


def _synth(vocab, lines, cfg, seed=1):
    protos = make_prototypes(vocab.size, cfg)
    rng = np.random.default_rng(seed)
    return [synth_utterance(t, vocab, protos, cfg, rng, f"u{i}") for i, t in enumerate(lines)]


def test_grammar_is_about_fifty_words(grammar_vocab):
    g, lines, _ = grammar_vocab
    assert 40 <= len(g.words()) <= 70
    used = {w for l in lines for w in l.split()}
    assert used <= set(g.words())


def test_zero_noise_frames_are_prototypes(grammar_vocab):
    _, lines, vocab = grammar_vocab
    cfg = SynthConfig(noise=0.0, frames_per_token=3, feat_dim=5)
    protos = make_prototypes(vocab.size, cfg)
    u = _synth(vocab, lines[:5], cfg)[2]
    pieces = list(u.tokens.ids[:-1])
    assert u.frames.shape == (3 * len(pieces), 5)
    assert np.array_equal(u.frames, np.repeat(protos[pieces], 3, axis=0))


def test_same_seed_identical_frames(grammar_vocab):
    _, lines, vocab = grammar_vocab
    cfg = SynthConfig(feat_dim=6)
    a, b = _synth(vocab, lines[:10], cfg), _synth(vocab, lines[:10], cfg)
    assert all(x.frames.tobytes() == y.frames.tobytes() for x, y in zip(a, b))


def test_noise_std_matches_sigma(grammar_vocab):
    _, lines, vocab = grammar_vocab
    cfg = SynthConfig(noise=0.1, feat_dim=4)
    protos = make_prototypes(vocab.size, cfg)
    utts, total = [], 0
    rng = np.random.default_rng(2)
    for t in lines:
        u = synth_utterance(t, vocab, protos, cfg, rng)
        utts.append(u.frames - np.repeat(protos[list(u.tokens.ids[:-1])], cfg.frames_per_token, axis=0))
        total += u.num_frames
        if total >= 10_000:
            break
    resid = np.concatenate(utts)[:10_000]
    assert np.all(np.abs(resid.std(axis=0) / 0.1 - 1) < 0.05)


def test_uncovered_text_rejected(grammar_vocab):
    _, _, vocab = grammar_vocab
    with pytest.raises(CoverageError):
        _synth(vocab, ["the zzz qqq"], SynthConfig())


def test_prototypes_grouped_are_confusable(grammar_vocab):
    _, _, vocab = grammar_vocab
    cfg = SynthConfig(group_size=3, group_spread=0.25, feat_dim=8)
    p = make_prototypes(vocab.size, cfg)
    d = np.linalg.norm(p[:, None] - p[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    # every piece has a near neighbour from its own group
    assert np.median(d.min(axis=1)) < 0.25 * np.median(d[np.isfinite(d)])
    q = make_prototypes(vocab.size, SynthConfig(group_size=1, feat_dim=8))
    assert q.shape == p.shape


@pytest.mark.parametrize("kw", [dict(frames_per_token=0), dict(noise=-1.0), dict(group_size=0)])
def test_synth_config_validation(kw):
    with pytest.raises(ValueError):
        SynthConfig(**kw)


def test_dedup_500_yeah_keeps_300():
    out = dedup_cap(["yeah"] * 500 + ["no"], 300)
    assert Counter(out) == {"yeah": 300, "no": 1}


def test_dedup_unique_unchanged():
    lines = [f"line {i}" for i in range(50)]
    assert dedup_cap(lines, 1) == lines


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(["a", "b c", "d", "e f g"]), max_size=60), st.integers(1, 10))
def test_dedup_matches_histogram_clamp(lines, cap):
    out = dedup_cap(lines, cap)
    assert Counter(out) == {k: min(v, cap) for k, v in Counter(lines).items()}
    # first occurrences kept, order preserved
    it = iter(lines)
    assert all(any(x == y for y in it) for x in out)


def test_dedup_threshold_validation():
    with pytest.raises(ValueError):
        dedup_cap(["a"], 0)


def _fake_utts(lengths):
    return [Utterance(f"u{i}", "", None, np.zeros((n, 1), dtype=np.float32)) for i, n in enumerate(lengths)]


def test_single_bucket_degenerate():
    plan = plan_buckets(_fake_utts([5, 9, 3, 7]), 1)
    assert plan.boundaries == [9] and plan.members == [[0, 1, 2, 3]]


def test_five_buckets_batch_sizes_shrink():
    rng = np.random.default_rng(0)
    plan = plan_buckets(_fake_utts(rng.integers(4, 200, size=1000)), 5)
    assert len(plan.boundaries) == 5
    assert plan.batch_sizes == default_batch_sizes(5) and plan.batch_sizes[0] == 128 and plan.batch_sizes[-1] == 32
    assert all(a > b for a, b in zip(plan.batch_sizes, plan.batch_sizes[1:]))
    assert all(a < b for a, b in zip(plan.boundaries, plan.boundaries[1:]))


def test_empty_corpus_rejected():
    with pytest.raises(ValueError):
        plan_buckets([], 3)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 80), min_size=1, max_size=120), st.integers(1, 6),
       st.sampled_from(["shortest_first", "shuffled"]), st.integers(0, 2**31))
def test_epoch_is_permutation_and_buckets_homogeneous(lengths, nb, order, seed):
    utts = _fake_utts(lengths)
    plan = plan_buckets(utts, nb, largest=7, smallest=2)
    # every utterance maps to exactly one bucket
    assert sorted(i for m in plan.members for i in m) == list(range(len(utts)))
    for b, m in enumerate(plan.members):
        assert all(plan.bucket_of(lengths[i]) == b for i in m)
    batches = list(iterate_epoch(plan, order, np.random.default_rng(seed)))
    assert sorted(i for bt in batches for i in bt) == list(range(len(utts)))
    bucket = [{plan.bucket_of(lengths[i]) for i in bt} for bt in batches]
    assert all(len(s) == 1 for s in bucket)
    if order == "shortest_first":
        ids = [s.pop() for s in bucket]
        assert ids == sorted(ids)
        maxlen = [max(lengths[i] for i in bt) for bt in batches]
        starts = [k for k in range(1, len(ids)) if ids[k] != ids[k - 1]]
        assert all(maxlen[k] >= maxlen[k - 1] for k in starts)


def test_collate_pads_and_masks(grammar_vocab):
    _, lines, vocab = grammar_vocab
    utts = _synth(vocab, lines[:4], SynthConfig(feat_dim=3))
    b = collate(utts, vocab.pad_id)
    for r, u in enumerate(utts):
        n = len(u.tokens)
        assert list(b.targets[r, :n]) == list(u.tokens.ids)
        assert b.target_mask[r].sum() == n and not b.targets[r, n:].any()
        assert np.array_equal(b.frames[r, : u.num_frames], u.frames)
        assert not b.frames[r, u.num_frames :].any()


def test_text_utterance_has_no_frames(grammar_vocab):
    _, lines, vocab = grammar_vocab
    u = text_utterance(lines[0], vocab)
    assert u.frames is None and u.num_frames == 0 and u.tokens.terminated


def test_corpus_files_roundtrip(grammar_vocab, tmp_path):
    _, lines, vocab = grammar_vocab
    utts = _synth(vocab, lines[:20], SynthConfig(feat_dim=4)) + [text_utterance(lines[0], vocab, "t0")]
    write_corpus(tmp_path / "train", utts)
    back = read_corpus(tmp_path / "train", vocab)
    assert [u.id for u in back] == [u.id for u in utts]
    for a, b in zip(utts, back):
        assert a.tokens == b.tokens
        if a.frames is None:
            assert b.frames is None
        else:
            assert a.frames.tobytes() == b.frames.tobytes()
