import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rsl_lab.corpus import EOS
from rsl_lab.decoding import (
    DecodeConfig, DecodeError, Ensemble, UnsupportedCombination, average_log_probs, beam_search,
    NonEmpty, beam_search_batch, decode_best, diverse_beam_search, ensemble_step, greedy, length_penalty, topk_pseudo,
)
from rsl_lab.models import KINDS, L2R, R2L

from helpers import TINY_LMAX, TINY_X, tiny_model

ARCHS = [(k, d) for k in KINDS for d in (L2R, R2L)]
SPACE = [tuple(c) + (EOS,) for n in range(TINY_LMAX + 1) for c in itertools.product([4, 5, 6], repeat=n)]


def enumerated_ranking(model, x, alpha):
    lp = model.log_probs([x] * len(SPACE), SPACE)
    scores = lp / np.array([length_penalty(len(y), alpha) for y in SPACE])
    order = sorted(range(len(SPACE)), key=lambda i: (-scores[i], model.orient(SPACE[i])))
    return [SPACE[i] for i in order], scores[order]


def test_length_penalty():
    assert length_penalty(1, 0.6) == 1.0
    assert length_penalty(7, 0.0) == 1.0
    assert length_penalty(7, 1.0) == 2.0


@pytest.mark.parametrize("kind,direction", ARCHS)
def test_exhaustive_beam_finds_true_ranking(kind, direction):
    m = tiny_model(kind, direction)
    ranked, scores = enumerated_ranking(m, TINY_X, 0.6)
    hyps = beam_search(m, TINY_X, DecodeConfig(beam=len(SPACE), max_len=5))
    assert hyps[0].tokens == ranked[0]
    assert [h.tokens for h in hyps[:5]] == ranked[:5]
    assert np.allclose([h.score for h in hyps[:5]], scores[:5], atol=1e-12)


@pytest.mark.parametrize("kind,direction", ARCHS)
def test_beam_one_is_greedy(kind, direction):
    m = tiny_model(kind, direction)
    xs = [TINY_X, (4,), (7, 7, 6, 5, 4)]
    one = [hs[0].tokens for hs in beam_search_batch(m, xs, DecodeConfig(beam=1, max_len=5))]
    assert one == greedy(m, xs, 5)
    assert decode_best(m, xs, DecodeConfig(beam=1, max_len=5)) == one


def test_alpha_zero_scores_are_raw():
    m = tiny_model("attention")
    for h in beam_search(m, TINY_X, DecodeConfig(beam=4, alpha=0.0, max_len=5)):
        assert h.score == h.logprob
        assert abs(h.logprob - m.log_prob(TINY_X, h.tokens)) < 1e-10


@pytest.mark.parametrize("kind,direction", ARCHS)
def test_results_sorted_distinct_and_improve_with_beam(kind, direction):
    m = tiny_model(kind, direction)
    best = -np.inf
    for b in (1, 2, 3, 5, 40):
        hyps = beam_search(m, TINY_X, DecodeConfig(beam=b, max_len=5))
        scores = [h.score for h in hyps]
        assert scores == sorted(scores, reverse=True)
        assert len({h.tokens for h in hyps}) == len(hyps)
        assert all(h.tokens[-1] == EOS for h in hyps)
        if b == 40:
            assert hyps[0].score >= best - 1e-12    # exhaustive beam is optimal
        best = max(best, hyps[0].score)


def test_max_len_forces_eos():
    m = tiny_model("recurrent", max_target_len=None)
    m.params["out.b"].value[EOS] = -30.0
    h = beam_search(m, TINY_X, DecodeConfig(beam=3, max_len=4))[0]
    assert len(h.tokens) == 5 and h.truncated


def test_r2l_output_in_natural_order():
    m = tiny_model("convolutional", R2L)
    h = beam_search(m, TINY_X, DecodeConfig(beam=40, max_len=5))[0]
    assert abs(m.log_prob(TINY_X, h.tokens) - h.logprob) < 1e-10


def test_average_log_probs():
    with np.errstate(divide="ignore"):
        a = np.log(np.array([[1.0, 0.0, 0.0]]))
        b = np.log(np.array([[0.0, 1.0, 0.0]]))
    out = np.exp(average_log_probs([a, b]))
    assert np.allclose(out, [[0.5, 0.5, 0.0]])


@pytest.mark.parametrize("kind", KINDS)
def test_ensemble_of_copies_is_bitwise_identical(kind):
    m = tiny_model(kind)
    ens = Ensemble([m, m.copy(), m.copy()])
    s1, s2 = m.start([TINY_X, (5, 4)]), ens.start([TINY_X, (5, 4)])
    for tok in (4, 6, 5):
        l1, s1 = m.step(s1)
        l2, s2 = ens.step(s2)
        assert l1.tobytes() == l2.tobytes()
        s1, s2 = s1.push([tok, tok]), s2.push([tok, tok])


def test_ensemble_normalized():
    models = [tiny_model(k) for k in KINDS]
    logp = ensemble_step(models, [m.start([TINY_X]) for m in models])
    assert abs(np.exp(logp).sum() - 1.0) < 1e-12


def test_ensemble_rejects_mixed_directions():
    with pytest.raises(UnsupportedCombination):
        Ensemble([tiny_model(direction=L2R), tiny_model(direction=R2L)])


def test_diverse_zero_lambda_one_group_is_beam():
    m = tiny_model("attention")
    cfg = DecodeConfig(beam=4, max_len=5, diversity=0.0, groups=1)
    assert diverse_beam_search(m, TINY_X, cfg) == beam_search(m, TINY_X, cfg)


def test_diverse_zero_lambda_groups_are_independent_beams():
    m = tiny_model("recurrent")
    cfg = DecodeConfig(beam=4, max_len=5, diversity=0.0, groups=2)
    div = diverse_beam_search(m, TINY_X, cfg)
    small = beam_search(m, TINY_X, DecodeConfig(beam=2, max_len=5))
    # all groups run the same beam of width 2; the joint ranking dedups them
    assert [h.tokens for h in div] == [h.tokens for h in small]


def test_diverse_large_lambda_splits_first_tokens():
    m = tiny_model("recurrent")
    m.params["out.w"].value *= 1e-3          # near-uniform next-token distributions
    m.params["out.b"].value[:] = 0.0
    m.params["out.b"].value[EOS] = -5.0
    cfg = DecodeConfig(beam=3, max_len=3, diversity=100.0)
    firsts = [h.tokens[0] for h in diverse_beam_search(m, TINY_X, cfg)]
    assert len(set(firsts)) == 3


def test_group_count_must_divide_beam():
    with pytest.raises(DecodeError):
        diverse_beam_search(tiny_model(), TINY_X, DecodeConfig(beam=5, groups=2))


@pytest.mark.parametrize("kind,direction", ARCHS)
def test_topk_matches_enumeration(kind, direction):
    m = tiny_model(kind, direction)
    ranked, _ = enumerated_ranking(m, TINY_X, 0.6)
    cfg = DecodeConfig(beam=len(SPACE), max_len=5)
    assert topk_pseudo(m, [TINY_X], 7, cfg)[0] == ranked[:7]
    assert topk_pseudo(m, [TINY_X], 1, DecodeConfig(beam=5, max_len=5))[0] == \
        [beam_search(m, TINY_X, DecodeConfig(beam=5, max_len=5))[0].tokens]


def test_topk_larger_than_beam():
    with pytest.raises(DecodeError):
        topk_pseudo(tiny_model(), [TINY_X], 6, DecodeConfig(beam=5))


@settings(max_examples=15, deadline=None)
@given(st.lists(st.lists(st.integers(4, 7), min_size=1, max_size=5).map(tuple), min_size=1, max_size=4),
       st.integers(1, 4))
def test_early_stop_keeps_top_k(xs, k):
    """Stopping once the top k are settled never changes them."""
    m = tiny_model("attention", max_target_len=None)
    cfg = DecodeConfig(beam=4, max_len=6)
    full = beam_search_batch(m, xs, cfg)
    fast = beam_search_batch(m, xs, cfg, n_best=k)
    assert [[h.tokens for h in hs[:k]] for hs in fast] == [[h.tokens for h in hs[:k]] for hs in full]


def test_batch_matches_single():
    m = tiny_model("convolutional")
    xs = [TINY_X, (4,), (6, 6, 6, 6)]
    cfg = DecodeConfig(beam=3, max_len=5)
    batched = beam_search_batch(m, xs, cfg)
    for x, hs in zip(xs, batched):
        single = beam_search(m, x, cfg)
        assert [h.tokens for h in hs] == [h.tokens for h in single]
        assert np.allclose([h.score for h in hs], [h.score for h in single], atol=1e-12)


def test_non_empty_forbids_immediate_eos():
    m = tiny_model("recurrent")
    m.params["out.b"].value[EOS] += 50.0           # eos first is overwhelmingly likely
    assert greedy(m, [TINY_X], 5)[0] == (EOS,)
    wrapped = NonEmpty(m)
    logp, state = wrapped.step(wrapped.start([TINY_X]))
    assert logp[0, EOS] == -np.inf
    assert abs(np.exp(logp[0]).sum() - 1.0) < 1e-12
    # later steps pass through untouched
    raw, _ = m.step(m.start([TINY_X]).push([4]))
    nxt, _ = wrapped.step(state.push([4]))
    assert raw.tobytes() == nxt.tobytes()
    out = decode_best(wrapped, [TINY_X], DecodeConfig(beam=3, max_len=5))[0]
    assert len(out) >= 2 and out[-1] == EOS
