import math

import numpy as np
import pytest

from rsl_lab.corpus import (EOS, ConfigError, MonolingualCorpus, ParallelCorpus, SyntheticTaskSpec, Vocabulary,
                            combine_sources, generate_task)
from rsl_lab.decoding import DecodeConfig, decode_best
from rsl_lab.experiment import heldout_bleu, split_heldout
from rsl_lab.models import KINDS, L2R, R2L, default_arch, derive_rng, init_model
from rsl_lab.rsl import (
    OracleInvalid, OracleTooLarge, PseudoPair, RSLConfig, back_translation, co_em, density_weights, e_step,
    enumerate_distribution, enumerate_support, exact_kl_and_grads, m_step, pseudo_scale, rs_grad_estimate,
    rs_grad_expectation, score_gradient, self_training,
)
from rsl_lab.training import OptimizerState, TrainConfig, mle_epoch, train_model

from helpers import TINY_LMAX, TINY_X, max_rel_err, tiny_model

ARCHS = [(k, d) for k in KINDS for d in (L2R, R2L)]

# KL(P_j||P_i), KL(P_i||P_j) for the seed-3 / seed-4 tiny pair, L2R.  Computed once
# and cross-checked against the plain-numpy enumeration in test_kl_values.
FROZEN_KL = {
    "attention": (2.9105781604588774, 1.9768697701847753),
    "recurrent": (0.1648217738297722, 0.18332321874137378),
    "convolutional": (0.20923239754599035, 0.24314712799692317),
}


def zero_like(g):
    return {k: np.zeros_like(v) for k, v in g.items()}


def max_abs(g):
    return max(float(np.abs(v).max()) for v in g.values())


@pytest.mark.parametrize("kind", KINDS)
def test_kl_values(kind):
    mi, mj = tiny_model(kind, seed=3), tiny_model(kind, seed=4)
    pi, _ = enumerate_distribution(mi, TINY_X, TINY_LMAX)
    pj, _ = enumerate_distribution(mj, TINY_X, TINY_LMAX)
    ys = list(pi)
    a = np.array([pi[y] for y in ys])
    b = np.array([pj[y] for y in ys])
    a, b = a / a.sum(), b / b.sum()
    rep = exact_kl_and_grads(mi, mj, TINY_X, TINY_LMAX)
    assert rep.kl_ji == pytest.approx(float(np.sum(b * np.log(b / a))), abs=1e-12)
    assert rep.kl_ij == pytest.approx(float(np.sum(a * np.log(a / b))), abs=1e-12)
    assert (rep.kl_ji, rep.kl_ij) == pytest.approx(FROZEN_KL[kind], abs=1e-10)
    assert rep.support == 40 and rep.kl_ji >= 0 and rep.kl_ij >= 0


def test_enumeration_totals():
    probs, truncated = enumerate_distribution(tiny_model("attention", max_target_len=None), TINY_X, 2)
    assert abs(sum(probs.values()) + truncated - 1.0) < 1e-12
    assert truncated > 0.0


def test_eos_only_model():
    m = tiny_model("recurrent", max_target_len=0)
    probs, truncated = enumerate_distribution(m, TINY_X, 2)
    assert probs[(EOS,)] == pytest.approx(1.0, abs=1e-12)


def test_oracle_guard():
    big = Vocabulary.from_tokens(f"t{i}" for i in range(40))
    m = init_model(default_arch("recurrent", d_model=4), L2R, big, big, seed=0)
    with pytest.raises(OracleTooLarge):
        enumerate_support(m, 4)


def test_oracle_rejects_truncated_mass():
    a, b = tiny_model(max_target_len=None), tiny_model(seed=4, max_target_len=None)
    with pytest.raises(OracleInvalid, match="model_i"):
        exact_kl_and_grads(a, b, TINY_X, 2)


@pytest.mark.parametrize("kind,direction", ARCHS)
def test_identical_models_have_zero_kl_and_gradient(kind, direction):
    m = tiny_model(kind, direction)
    rep = exact_kl_and_grads(m, m.copy(), TINY_X, TINY_LMAX)
    assert abs(rep.kl_ji) < 1e-10 and abs(rep.kl_ij) < 1e-10
    assert max_abs(rep.grad_ji) < 1e-10 and max_abs(rep.grad_ij) < 1e-10
    w, _ = density_weights(m, m.copy(), [TINY_X] * 5, [(4, EOS), (5, 6, EOS), (EOS,), (4, 4, 4, EOS), (6, EOS)], 5.0)
    assert np.array_equal(w, np.zeros(5))
    assert max_abs(rs_grad_expectation(m, [m.copy()], TINY_X, TINY_LMAX)) < 1e-10


@pytest.mark.parametrize("kind,direction", ARCHS)
def test_cross_gradient_closed_form(kind, direction):
    """Autodiff of the enumerated KL(P_j||P_i) equals -sum_y P_j(y) grad log P_i(y)."""
    mi, mj = tiny_model(kind, direction, seed=3), tiny_model(kind, direction, seed=4)
    rep = exact_kl_and_grads(mi, mj, TINY_X, TINY_LMAX)
    closed = rs_grad_expectation(mi, [mj], TINY_X, TINY_LMAX, self_term=False)
    assert max_rel_err(closed, rep.grad_ji) < 1e-8


@pytest.mark.parametrize("kind,direction", ARCHS)
def test_estimator_expectation_is_symmetric_kl_gradient(kind, direction):
    mi, mj = tiny_model(kind, direction, seed=3), tiny_model(kind, direction, seed=4)
    rep = exact_kl_and_grads(mi, mj, TINY_X, TINY_LMAX)
    both = rs_grad_expectation(mi, [mj], TINY_X, TINY_LMAX, self_term=True, clip=math.inf)
    target = {k: rep.grad_ji[k] + rep.grad_ij[k] for k in both}
    assert max_rel_err(both, target) < 1e-6


def test_estimator_sums_over_opponents():
    mi = tiny_model(seed=3)
    opp = [tiny_model(seed=4), tiny_model(seed=5)]
    total = rs_grad_expectation(mi, opp, TINY_X, TINY_LMAX)
    parts = [rs_grad_expectation(mi, [o], TINY_X, TINY_LMAX) for o in opp]
    assert max_rel_err(total, {k: parts[0][k] + parts[1][k] for k in total}) < 1e-10


def test_sampled_estimate_concentrates():
    mi, mj = tiny_model(seed=3), tiny_model(seed=4)
    rep = exact_kl_and_grads(mi, mj, TINY_X, TINY_LMAX)
    exact = {k: rep.grad_ji[k] + rep.grad_ij[k] for k in rep.grad_ji}
    cfg = RSLConfig(samples=4000, self_term=True, clip=math.inf, max_len=5)
    est = rs_grad_estimate(mi, [mj], TINY_X, cfg, np.random.default_rng(1), stderr=True)
    for k in exact:
        z = np.abs(est.grads[k] - exact[k]) / np.maximum(est.stderr[k], 1e-300)
        z[np.abs(est.grads[k] - exact[k]) < 1e-12] = 0.0
        assert z.max() < 4.0
    fast = rs_grad_estimate(mi, [mj], TINY_X, cfg, np.random.default_rng(1))
    assert max_rel_err(fast.grads, est.grads, floor=1e-6) < 1e-8


def test_clip_counts_reported():
    mi, mj = tiny_model("attention", seed=3), tiny_model("attention", seed=4)
    ys = enumerate_support(mi, TINY_LMAX)
    w, clipped = density_weights(mi, mj, [TINY_X] * len(ys), ys, 0.5)
    assert clipped > 0 and np.all(np.abs(w) <= 0.5)


# ---------------------------------------------------------------------------
# co-EM plumbing


@pytest.fixture
def mini(small_task):
    P = small_task.parallel
    three = MonolingualCorpus(small_task.mono.sentences[:3], P.source_vocab)
    none = ParallelCorpus((), P.source_vocab, P.target_vocab)
    models = [init_model(default_arch(k, d_model=16), L2R, P.source_vocab, P.target_vocab, seed=0, model_id=i)
              for i, k in enumerate(("recurrent", "convolutional"))]
    return P, three, none, models


def test_e_step_counts(mini):
    P, three, none, models = mini
    sources = combine_sources(none, three)
    pc = e_step(models, sources, RSLConfig(k=2, samples=2, max_len=8))
    assert len(pc.pairs) == 12
    assert len(pc.view(0)) == 6 and len(pc.view(1)) == 6
    assert all(p.origin == 1 for p in pc.view(0))
    assert all(p.weight == 1.0 for p in pc.pairs)
    assert all(p.target[-1] == EOS and p.target.count(EOS) == 1 and len(p.target) <= 9 for p in pc.pairs)


def test_e_step_cross_total(mini, small_task):
    P, three, none, models = mini
    models = models + [init_model(default_arch("attention", d_model=16), L2R, P.source_vocab,
                                  P.target_vocab, seed=0, model_id=2)]
    pc = e_step(models, combine_sources(none, three), RSLConfig(k=3, samples=2, max_len=8))
    k, S, M = 3, 2, 3
    assert sum(len(pc.view(i)) for i in range(k)) == k * (k - 1) * S * M


def test_e_step_self_pairs(mini):
    P, three, none, models = mini
    pc = e_step(models, combine_sources(none, three), RSLConfig(k=2, samples=1, max_len=8, self_term=True))
    selfs = [p for p in pc.view(0) if p.is_self]
    assert len(selfs) == 3 and all(p.origin == 0 and p.opponent == 1 for p in selfs)
    w, _ = density_weights(models[0], models[1], [p.source for p in selfs], [p.target for p in selfs], 5.0)
    assert [p.weight for p in selfs] == w.tolist()


def test_beam_e_step_deterministic(mini):
    P, three, _, models = mini
    src = combine_sources(P, three)
    cfg = RSLConfig(k=2, mode="beam", samples=4, max_len=8)
    a, b = e_step(models, src, cfg, 1), e_step(models, src, cfg, 2)
    assert a.samples == 1
    assert [p.target for p in a.pairs] == [p.target for p in b.pairs]


def test_pseudo_scale():
    assert pseudo_scale(2000, 6000, 1, 6, False) == pytest.approx(1 / 3)
    assert pseudo_scale(2000, 6000, 2, 6, True) == pytest.approx(1 / 30)


def _same(a, b):
    return all(a.params[k].value.tobytes() == b.params[k].value.tobytes() for k in a.params)


def test_empty_view_is_plain_mle(mini):
    P, _, _, models = mini
    a, b = models[0].copy(), models[0].copy()
    cfg = TrainConfig(seed=5)
    m_step(a, P, [], RSLConfig(k=2), cfg, OptimizerState.for_model(a, cfg), 1.0, ("x",))
    mle_epoch(b, P, cfg, OptimizerState.for_model(b, cfg), derive_rng(cfg.seed, b.model_id, "m-step", "x", 0))
    assert _same(a, b)


def test_zero_weight_pseudo_pairs_contribute_nothing(mini):
    P, three, _, models = mini
    m = models[0]
    xs = list(P.sources[:4]) + list(three.sentences)
    ys = list(P.targets[:4]) + [(5, 6, EOS)] * 3
    g_all = score_gradient(m, xs, ys, [1.0] * 4 + [0.0] * 3)
    g_real = score_gradient(m, xs[:4], ys[:4], [1.0] * 4)
    assert all(np.array_equal(g_all[k], g_real[k]) for k in g_all)


def test_zero_rounds_is_identity(mini):
    P, three, _, models = mini
    before = [m.copy() for m in models]
    co_em(models, P, three, RSLConfig(k=2, rounds=0), TrainConfig())
    assert all(_same(a, b) for a, b in zip(models, before))


def test_co_em_without_mono_and_lr_zero_fixed_point(mini, tmp_path):
    P, _, _, models = mini
    empty = MonolingualCorpus((), P.source_vocab)
    cfg = RSLConfig(k=2, rounds=2, mode="beam", max_len=8, min_improvement=None)
    res = co_em(models, P, empty, cfg, TrainConfig(lr=0.0), dump_dir=tmp_path)
    assert res.rounds_run == 2
    counts = [r["value"] for r in res.history if r["metric"] == "pseudo_pairs"]
    assert counts == [2 * len(P)] * 2
    r1, r2 = (tmp_path / "pseudo.round1.tsv").read_text(), (tmp_path / "pseudo.round2.tsv").read_text()
    strip = lambda text: [line.rsplit("\t", 1)[0] for line in text.splitlines()]
    assert strip(r1) == strip(r2)
    assert r1.splitlines()[0].count("\t") == 4


def test_co_em_needs_two_models(mini):
    P, three, _, models = mini
    with pytest.raises(ConfigError):
        co_em(models[:1], P, three, RSLConfig(k=1), TrainConfig())


def test_self_training_reduces_to_self_pseudo_data(mini):
    """One round of ST equals an M-step on the model's own top-1 outputs."""
    P, three, _, models = mini
    a, b = models[0].copy(), models[0].copy()
    tcfg = TrainConfig(seed=2)
    cfg = RSLConfig(k=1, rounds=1, max_len=8)
    self_training(a, P, three, cfg, tcfg, OptimizerState.for_model(a, tcfg), topk=1)
    srcs = list(combine_sources(P, three).sentences)
    view = [PseudoPair(x, y, 1.0, 0, None, 1) for x, y in zip(srcs, decode_best(b, srcs, cfg.decode_config()))]
    m_step(b, P, view, cfg, tcfg, OptimizerState.for_model(b, tcfg), len(P) / len(srcs), ("st1", 1))
    assert _same(a, b)


def test_back_translation_counts_and_empty(small_task):
    P = small_task.parallel
    fwd = init_model(default_arch("recurrent", d_model=16), L2R, P.source_vocab, P.target_vocab, seed=0)
    bwd = init_model(default_arch("recurrent", d_model=16), L2R, P.target_vocab, P.source_vocab, seed=1)
    tm = MonolingualCorpus(((5, 6, 7), (6, 6)), P.target_vocab)
    tcfg = TrainConfig(seed=0)
    _, n = back_translation(fwd.copy(), bwd, P, tm, RSLConfig(k=1, max_len=8), tcfg, epochs=1)
    assert n == 2
    a = fwd.copy()
    back_translation(a, bwd, P, MonolingualCorpus((), P.target_vocab), RSLConfig(k=1), tcfg, epochs=1)
    b = fwd.copy()
    mle_epoch(b, P, tcfg, OptimizerState.for_model(b, tcfg), derive_rng(0, b.model_id, "m-step", "bt", 0))
    assert _same(a, b)


def test_back_translation_vocab_mismatch(small_task):
    P = small_task.parallel
    fwd = init_model(default_arch("recurrent", d_model=8), L2R, P.source_vocab, P.target_vocab, seed=0)
    with pytest.raises(ConfigError):
        back_translation(fwd, fwd, P, MonolingualCorpus((), P.target_vocab), RSLConfig(k=1), TrainConfig())


@pytest.mark.slow
def test_self_training_preserves_copy_task():
    """Noiseless copy: top-1 ST stays within 0.5 BLEU of the base model in at least 2 of 3 seeds."""
    held = 0
    for seed in range(3):
        task = generate_task(SyntheticTaskSpec(task="noisy-copy", vocab_size=12, max_len=8, pairs=1000, mono=1000,
                                               heldout=200, noise=0.0, seed=seed))
        valid, test = split_heldout(task.heldout)
        P = task.parallel
        m = init_model(default_arch("convolutional", d_model=32), L2R, P.source_vocab, P.target_vocab, seed=seed)
        tcfg = TrainConfig(max_epochs=40, warmup=100, seed=seed)
        opt = OptimizerState.for_model(m, tcfg)
        train_model(m, P, valid, tcfg, opt)
        base = heldout_bleu(m, test, DecodeConfig())
        self_training(m, P, task.mono, RSLConfig(k=1, rounds=3, seed=seed), tcfg, opt, topk=1)
        held += heldout_bleu(m, test, DecodeConfig()) >= base - 0.5
    assert held >= 2
