import math

import numpy as np
import pytest

from rsl_lab import autodiff as ad
from rsl_lab.corpus import EOS, ParallelCorpus, SentencePair
from rsl_lab.models import default_arch, init_model, load_checkpoint, save_checkpoint
from rsl_lab.training import (
    CheckpointMismatch, DivergedTraining, OptimizerState, TrainConfig, adam_step, average_checkpoints,
    clip_gradients, corpus_nll, make_batches, mle_epoch, train_epoch, train_model, validation_bleu,
)

from helpers import TINY_SRC, TINY_TGT, TINY_X, tiny_model


def scalar_opt(lr=1.0, warmup=4, clip=None):
    return OptimizerState({"p": np.zeros(())}, {"p": np.zeros(())}, 0, 0.9, 0.98, 1e-9, lr, warmup, clip)


def test_learning_rate_schedule():
    opt = scalar_opt(lr=0.1, warmup=400)
    assert opt.learning_rate(1) == pytest.approx(0.1 / 400 ** 1.5)
    assert opt.learning_rate(400) == pytest.approx(0.1 / 20)
    assert opt.learning_rate(1600) == pytest.approx(0.1 / 40)
    assert max(opt.learning_rate(t) for t in range(1, 3000)) == opt.learning_rate(400)


def test_adam_hand_oracle():
    # Step 1 with g = 1: m = 0.1, v = 0.02, bias corrections give m_hat = v_hat = 1,
    # so the update is lr(1) / (1 + eps).  lr(1) = 1 * min(1, 1 * 4^-1.5) = 0.125.
    # Step 2 with g = 1: m = 0.19, v = 0.0396, m_hat = v_hat = 1 again, lr(2) = 0.25.
    p = {"p": ad.parameter(np.array(2.0))}
    opt = scalar_opt()
    adam_step(opt, p, {"p": np.array(1.0)})
    assert p["p"].value == 2.0 - 0.125 / (1.0 + 1e-9)
    adam_step(opt, p, {"p": np.array(1.0)})
    assert p["p"].value == pytest.approx(2.0 - 0.125 / (1 + 1e-9) - 0.25 / (1 + 1e-9), abs=1e-15)
    assert opt.m["p"] == pytest.approx(0.19) and opt.v["p"] == pytest.approx(0.0396)


def test_zero_gradient_leaves_parameters():
    p = {"p": ad.parameter(np.array(2.0))}
    adam_step(scalar_opt(), p, {"p": np.array(0.0)})
    assert p["p"].value == 2.0


def test_clipping_halves():
    g = {"a": np.array([3.0, 4.0])}                  # norm 5
    clipped, norm = clip_gradients(g, 2.5)
    assert norm == 5.0
    assert np.allclose(clipped["a"], [1.5, 2.0])
    assert clip_gradients(g, 10.0)[0]["a"] is g["a"]


def test_nan_gradient_aborts():
    with pytest.raises(DivergedTraining):
        adam_step(scalar_opt(), {"p": ad.parameter(np.array(1.0))}, {"p": np.array(np.nan)})


def test_batches_respect_budget_and_cover_everything(small_task, rng):
    P = small_task.parallel
    batches = make_batches(P.targets, P.sources, 64, rng)
    idx = np.sort(np.concatenate(batches))
    assert np.array_equal(idx, np.arange(len(P)))
    for b in batches:
        longest = max(len(P.targets[i]) for i in b)
        assert longest * len(b) <= 64 or len(b) == 1


def test_lr_zero_keeps_parameters_bitwise(small_task):
    m = init_model(default_arch("recurrent"), "L2R", small_task.parallel.source_vocab,
                   small_task.parallel.target_vocab, seed=0)
    before = {k: v.copy() for k, v in m.parameter_arrays().items()}
    cfg = TrainConfig(lr=0.0)
    mle_epoch(m, small_task.parallel, cfg, OptimizerState.for_model(m, cfg))
    assert all(before[k].tobytes() == v.tobytes() for k, v in m.parameter_arrays().items())


def test_uniform_model_loss_is_log_v(small_task):
    P = small_task.parallel
    m = init_model(default_arch("attention", dropout=0.0), "L2R", P.source_vocab, P.target_vocab, seed=0)
    m.params["out.w"].value[:] = 0.0
    m.params["out.b"].value[:] = 0.0
    V = len(P.target_vocab) - 3                 # pad, bos and unk are masked out
    assert corpus_nll(m, P.sources, P.targets) == pytest.approx(math.log(V), rel=1e-9)


def test_memorize_single_pair():
    m = tiny_model("attention")
    cfg = TrainConfig(batch_tokens=64)
    opt = OptimizerState.for_model(m, cfg)
    x, y = [TINY_X], [(5, 6, 4, EOS)]
    rng = np.random.default_rng(0)
    for _ in range(500):
        train_epoch(m, x, y, None, cfg, opt, rng)
    assert corpus_nll(m, x, y) < 0.01


def test_ten_pair_memorization_is_monotone(small_task):
    P = small_task.parallel
    ten = ParallelCorpus(P.pairs[:10], P.source_vocab, P.target_vocab)
    m = init_model(default_arch("recurrent", dropout=0.0), "L2R", P.source_vocab, P.target_vocab, seed=0)
    cfg = TrainConfig(lr=0.02, warmup=20, batch_tokens=1024)
    opt = OptimizerState.for_model(m, cfg)
    nlls = [mle_epoch(m, ten, cfg, opt) for _ in range(150)]
    after = nlls[cfg.warmup:]
    assert all(b - a <= 1e-3 for a, b in zip(after, after[1:]))
    assert after[-1] < 0.5 * after[0]


def test_batch_loss_gradient_matches_finite_differences():
    m = tiny_model("convolutional")
    name = "dec0.conv.w"
    xs, ys = [TINY_X, (4, 4)], [(5, EOS), (6, 6, 4, EOS)]

    def f(p):
        saved = m.params[name]
        m.params[name] = p
        try:
            return m.weighted_nll(xs, ys, [1.0, 1.0])[0]
        finally:
            m.params[name] = saved

    assert ad.finite_diff_check(f, m.params[name].value.copy()) < 1e-5


def test_padding_never_counts():
    m = tiny_model("recurrent")
    short, long_ = (TINY_X, (5, EOS)), ((4, 4, 4, 4, 4, 4), (6, 6, 6, EOS))
    alone = m.weighted_nll([short[0]], [short[1]], [1.0], normalizer=1.0)[0].value
    both = m.weighted_nll([short[0], long_[0]], [short[1], long_[1]], [1.0, 0.0], normalizer=1.0)[0].value
    assert abs(float(alone) - float(both)) < 1e-12


def test_divergence_names_batch():
    m = tiny_model("recurrent")
    m.params["out.w"].value[:] = np.inf
    cfg = TrainConfig()
    with np.errstate(invalid="ignore"), pytest.raises(DivergedTraining, match="batch"):
        train_epoch(m, [TINY_X], [(5, EOS)], None, cfg, OptimizerState.for_model(m, cfg), np.random.default_rng(0))


def test_training_is_deterministic(small_task):
    P = small_task.parallel
    out = []
    for _ in range(2):
        m = init_model(default_arch("convolutional"), "R2L", P.source_vocab, P.target_vocab, seed=4)
        train_model(m, P, None, TrainConfig(max_epochs=2, seed=3))
        out.append(m.parameter_arrays())
    assert all(out[0][k].tobytes() == out[1][k].tobytes() for k in out[0])


def test_average_of_copies_and_opposites(tmp_path):
    m = tiny_model("attention")
    for i in range(3):
        save_checkpoint(tmp_path / f"c{i}.ckpt", m)
    avg = average_checkpoints([tmp_path / f"c{i}.ckpt" for i in range(3)], tmp_path / "avg.ckpt")
    for k, v in m.parameter_arrays().items():
        assert np.allclose(avg.model.params[k].value, v, rtol=2.3e-16, atol=0)
    assert avg.optimizer is None
    assert avg.meta["averaged_from"][0].endswith("c0.ckpt")
    neg = m.copy()
    neg.set_parameters({k: -v for k, v in m.parameter_arrays().items()})
    save_checkpoint(tmp_path / "neg.ckpt", neg)
    zero = average_checkpoints([tmp_path / "c0.ckpt", tmp_path / "neg.ckpt"])
    assert all(not np.any(v) for v in zero.model.parameter_arrays().values())


def test_average_mismatch_names_field(tmp_path):
    save_checkpoint(tmp_path / "a.ckpt", tiny_model("attention"))
    save_checkpoint(tmp_path / "b.ckpt", tiny_model("attention", direction="R2L"))
    with pytest.raises(CheckpointMismatch, match="direction"):
        average_checkpoints([tmp_path / "a.ckpt", tmp_path / "b.ckpt"])


def test_early_stopping_restores_best(small_task):
    P, held = small_task.parallel, small_task.heldout
    m = init_model(default_arch("recurrent"), "L2R", P.source_vocab, P.target_vocab, seed=1)
    res = train_model(m, P, held, TrainConfig(max_epochs=6, patience=2))
    best = max(r["value"] for r in res.history if r["metric"] == "valid_bleu")
    assert validation_bleu(m, held) == best == res.best_bleu


def test_checkpoint_average_of_converged_run(small_task, tmp_path):
    """Averaging the last five checkpoints costs at most 0.5 validation BLEU."""
    P, held = small_task.parallel, small_task.heldout
    m = init_model(default_arch("convolutional"), "L2R", P.source_vocab, P.target_vocab, seed=2)
    cfg = TrainConfig(max_epochs=40, checkpoint_every=1)
    res = train_model(m, P, None, cfg, ckpt_dir=tmp_path)
    last = res.checkpoints[-1]
    avg = average_checkpoints(res.checkpoints[-5:])
    single = validation_bleu(load_checkpoint(last).model, held)
    assert single > 50
    assert validation_bleu(avg.model, held) >= single - 0.5
