"""Reciprocal supervision: the symmetric-KL agreement loss, its sampled
gradient estimators, an enumeration oracle, and the co-EM loop.

For model ``i`` and an opposing model ``j`` the two score-function terms are

    grad KL(P_j || P_i) = -E_{y~P_j} grad log P_i(y)                (cross)
    grad KL(P_i || P_j) = -E_{y~P_i} log(P_j(y)/P_i(y)) grad log P_i(y)  (self)

Both are realized as weighted NLL on generated pairs, which is how the M-step
trains on pseudo data.
"""
from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .corpus import (EOS, CombinedSourceCorpus, ConfigError, MonolingualCorpus, ParallelCorpus,
                     TokenSeq, combine_sources, strip_eos)
from .decoding import DecodeConfig, NonEmpty, decode_best, topk_pseudo
from .evaluation import corpus_bleu, matrix_from_decodes
from .models import BasicModel, derive_rng, sample_batch
from .training import DivergedTraining, OptimizerState, TrainConfig, train_epoch

log = logging.getLogger(__name__)

ENUM_GUARD = 10 ** 6


class OracleTooLarge(ValueError):
    pass


class OracleInvalid(AssertionError):
    pass


@dataclass
class RSLConfig:
    k: int = 6
    samples: int = 1                 # S, generations per source per model
    rounds: int = 3                  # R
    mode: str = "sample"             # "sample" or "beam"
    temperature: float = 1.0
    self_term: bool = False
    clip: float = 5.0                # density-ratio clip c; math.inf disables
    mstep_epochs: int = 1
    normalize_pairs: bool = False    # also divide the RS side by (k - 1)
    max_len: int = 32
    beam: int = 5
    alpha: float = 0.6
    min_improvement: float | None = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.k < 1 or self.samples < 1 or self.rounds < 0 or not self.clip > 0:
            raise ConfigError("need k >= 1, samples >= 1, rounds >= 0, clip > 0")
        if self.mode not in ("sample", "beam"):
            raise ConfigError(f"unknown generation mode {self.mode!r}")
        if self.temperature <= 0 or self.mstep_epochs < 0:
            raise ConfigError("temperature must be positive, mstep_epochs nonnegative")

    @property
    def samples_effective(self) -> int:
        return 1 if self.mode == "beam" else self.samples

    def decode_config(self) -> DecodeConfig:
        return DecodeConfig(beam=self.beam, alpha=self.alpha, max_len=self.max_len)


@dataclass(frozen=True)
class PseudoPair:
    source: TokenSeq
    target: TokenSeq
    weight: float
    origin: int                      # index of the generating model
    opponent: int | None = None      # self pairs: the model j in log(P_j / P_i)
    round: int = 0

    @property
    def is_self(self) -> bool:
        return self.opponent is not None

    def origin_label(self) -> str:
        return f"self:{self.origin}/{self.opponent}" if self.is_self else f"model:{self.origin}"


@dataclass
class PseudoCorpus:
    pairs: list[PseudoPair]
    k: int
    n_sources: int
    samples: int
    clipped: int = 0

    def view(self, i: int) -> list[PseudoPair]:
        """Pairs that supervise model ``i``: other models' generations plus its own self pairs."""
        return [p for p in self.pairs if (p.origin == i) == p.is_self]

    def dump(self, path, source_vocab, target_vocab) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for p in self.pairs:
                fh.write("\t".join([source_vocab.decode(p.source), target_vocab.decode(strip_eos(p.target)),
                                    repr(p.weight), p.origin_label(), str(p.round)]) + "\n")


@dataclass
class ExactKLReport:
    support: int
    truncated_i: float
    truncated_j: float
    kl_ji: float                     # KL(P_j || P_i)
    kl_ij: float                     # KL(P_i || P_j)
    grad_ji: dict[str, np.ndarray]   # d KL(P_j||P_i) / d theta_i
    grad_ij: dict[str, np.ndarray]   # d KL(P_i||P_j) / d theta_i


@dataclass
class GradEstimate:
    grads: dict[str, np.ndarray]
    stderr: dict[str, np.ndarray] | None = None
    clipped: int = 0
    draws: int = 0


# ---------------------------------------------------------------------------
# enumeration oracle


def emittable_content(model: BasicModel) -> list[int]:
    return [int(t) for t in np.flatnonzero(model._vocab_mask == 0.0) if t != EOS]


def enumerate_support(model: BasicModel, L_max: int) -> list[TokenSeq]:
    """Every eos-terminated sequence with at most ``L_max`` content tokens (natural order)."""
    content = emittable_content(model)
    if len(content) ** L_max > ENUM_GUARD:
        raise OracleTooLarge(f"{len(content)}^{L_max} sequences exceeds the {ENUM_GUARD} guard")
    return [tuple(c) + (EOS,) for n in range(L_max + 1) for c in itertools.product(content, repeat=n)]


def enumerate_distribution(model: BasicModel, x: TokenSeq, L_max: int) -> tuple[dict[TokenSeq, float], float]:
    """Exact probabilities of the truncated support and the mass left outside it."""
    ys = enumerate_support(model, L_max)
    lp = model.log_probs([x] * len(ys), ys)
    probs = dict(zip(ys, np.exp(lp).tolist()))
    return probs, max(0.0, 1.0 - math.fsum(probs.values()))


def _named(model: BasicModel, grads: dict[int, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: grads.get(p.id, np.zeros_like(p.value)) for k, p in model.params.items()}


def exact_kl_and_grads(model_i: BasicModel, model_j: BasicModel, x: TokenSeq, L_max: int,
                       tol: float = 1e-6) -> ExactKLReport:
    """Both KLs over the renormalized truncated support, differentiated w.r.t. ``theta_i``."""
    ys = enumerate_support(model_i, L_max)
    if set(ys) != set(enumerate_support(model_j, L_max)):
        raise OracleInvalid("models emit different token sets")
    lj_raw = model_j.log_probs([x] * len(ys), ys)
    li_raw = model_i.log_probs([x] * len(ys), ys)
    tr_i = max(0.0, 1.0 - math.fsum(np.exp(li_raw)))
    tr_j = max(0.0, 1.0 - math.fsum(np.exp(lj_raw)))
    if tr_i >= tol or tr_j >= tol:
        raise OracleInvalid(f"truncated mass too large: model_i {tr_i:.3g}, model_j {tr_j:.3g}")
    lj = ad.constant(ad._log_softmax(lj_raw))
    pj = ad.constant(np.exp(lj.value))

    def kls():
        li = ad.log_softmax(model_i.sequence_log_probs([x] * len(ys), ys))
        kl_ji = ad.sum_(ad.mul(pj, ad.add(lj, ad.neg(li))))
        kl_ij = ad.sum_(ad.mul(ad.softmax(li), ad.add(li, ad.neg(lj))))
        return kl_ji, kl_ij

    out = []
    for which in (0, 1):
        with ad.Tape() as tape:
            node = kls()[which]
        out.append((float(node.value), _named(model_i, ad.backward(tape, node))))
    (kl_ji, g_ji), (kl_ij, g_ij) = out
    return ExactKLReport(len(ys), tr_i, tr_j, kl_ji, kl_ij, g_ji, g_ij)


# ---------------------------------------------------------------------------
# score-function estimators


def density_weights(model_i: BasicModel, model_j: BasicModel, xs, ys, clip: float) -> tuple[np.ndarray, int]:
    """``clip(log P_j(y) - log P_i(y), -c, c)`` and how many entries hit the clip."""
    r = model_j.log_probs(xs, ys) - model_i.log_probs(xs, ys)
    clipped = int(np.sum(np.abs(r) > clip))
    return np.clip(r, -clip, clip), clipped


def score_gradient(model: BasicModel, xs, ys, weights, normalizer: float = 1.0) -> dict[str, np.ndarray]:
    """Gradient of ``-sum_b w_b log P(y_b|x_b) / normalizer`` w.r.t. the model parameters."""
    with ad.Tape() as tape:
        loss, _ = model.weighted_nll(xs, ys, weights, normalizer)
    return _named(model, ad.backward(tape, loss))


def _unique_score_grads(model, x, ys):
    uniq = sorted(set(ys))
    return uniq, [score_gradient(model, [x], [y], [1.0]) for y in uniq]


def rs_grad_estimate(model_i: BasicModel, opponents: Sequence[BasicModel], x: TokenSeq, cfg: RSLConfig,
                     rng: np.random.Generator, stderr: bool = False) -> GradEstimate:
    """Sampled estimate of ``sum_j grad [KL(P_j||P_i) + KL(P_i||P_j)]`` for one source.

    With ``stderr`` the per-coordinate standard error of the mean is computed
    from per-draw contributions (grouped by distinct sequence).
    """
    S = cfg.samples
    terms: list[tuple[list[TokenSeq], np.ndarray]] = []
    clipped = 0
    for mj in opponents:
        ys = [y for y, _ in sample_batch(mj, [x] * S, cfg.max_len, cfg.temperature, rng)]
        terms.append((ys, np.ones(S)))
        if cfg.self_term:
            ys = [y for y, _ in sample_batch(model_i, [x] * S, cfg.max_len, cfg.temperature, rng)]
            w, c = density_weights(model_i, mj, [x] * S, ys, cfg.clip)
            terms.append((ys, w))
            clipped += c
    total = {k: np.zeros_like(p.value) for k, p in model_i.params.items()}
    var = {k: np.zeros_like(p.value) for k, p in model_i.params.items()} if stderr else None
    for ys, w in terms:
        if not stderr:
            g = score_gradient(model_i, [x] * S, ys, w, normalizer=S)
            for k in total:
                total[k] += g[k]
            continue
        uniq, grads = _unique_score_grads(model_i, x, ys)
        index = {y: n for n, y in enumerate(uniq)}
        for k in total:
            per = np.stack([grads[index[y]][k] * wi for y, wi in zip(ys, w)])   # (S, ...)
            total[k] += per.mean(axis=0)
            var[k] += per.var(axis=0, ddof=1) / S
    se = {k: np.sqrt(v) for k, v in var.items()} if stderr else None
    return GradEstimate(total, se, clipped, S * len(terms))


def rs_grad_expectation(model_i: BasicModel, opponents: Sequence[BasicModel], x: TokenSeq, L_max: int,
                        self_term: bool = True, clip: float = math.inf) -> dict[str, np.ndarray]:
    """The estimator's exact mean: each enumerated ``y`` weighted by its sampling probability."""
    ys = enumerate_support(model_i, L_max)
    xs = [x] * len(ys)
    li = model_i.log_probs(xs, ys)
    total = {k: np.zeros_like(p.value) for k, p in model_i.params.items()}
    for mj in opponents:
        lj = mj.log_probs(xs, ys)
        parts = [np.exp(lj)]
        if self_term:
            parts.append(np.exp(li) * np.clip(lj - li, -clip, clip))
        for w in parts:
            g = score_gradient(model_i, xs, ys, w)
            for k in total:
                total[k] += g[k]
    return total


# ---------------------------------------------------------------------------
# co-EM


def _generate(model: BasicModel, sources: Sequence[TokenSeq], cfg: RSLConfig, rng) -> list[list[TokenSeq]]:
    """``S`` generations per source, shape ``[S][len(sources)]``."""
    if cfg.mode == "beam":
        return [decode_best(model, sources, cfg.decode_config())]
    return [[y for y, _ in sample_batch(model, sources, cfg.max_len, cfg.temperature, rng)]
            for _ in range(cfg.samples)]


def e_step(models: Sequence[BasicModel], sources: CombinedSourceCorpus, cfg: RSLConfig, round_index: int = 0,
           threads: int = 1) -> PseudoCorpus:
    """Every model labels every source; self pairs reuse model ``i``'s own generations."""
    srcs = list(sources.sentences)
    S = cfg.samples_effective

    def gen(i):
        rng = derive_rng(cfg.seed, models[i].model_id, "e-step", round_index)
        return _generate(models[i], srcs, cfg, rng)

    with ThreadPoolExecutor(max(1, threads)) as pool:
        generations = list(pool.map(gen, range(len(models))))
    pairs: list[PseudoPair] = []
    clipped = 0
    for i, gens in enumerate(generations):
        for ys in gens:
            pairs += [PseudoPair(x, y, 1.0, i, None, round_index) for x, y in zip(srcs, ys)]
    if cfg.self_term:
        for i, gens in enumerate(generations):
            for j in range(len(models)):
                if j == i:
                    continue
                for ys in gens:
                    w, c = density_weights(models[i], models[j], srcs, ys, cfg.clip)
                    clipped += c
                    pairs += [PseudoPair(x, y, float(wi), i, j, round_index) for x, y, wi in zip(srcs, ys, w)]
    return PseudoCorpus(pairs, len(models), len(srcs), S, clipped)


def pseudo_scale(n_parallel: int, n_sources: int, samples: int, k: int, normalize_pairs: bool) -> float:
    """Per-pair factor putting the RS side on the 1/M scale of the real-data 1/N."""
    scale = n_parallel / (n_sources * samples)
    return scale / max(k - 1, 1) if normalize_pairs else scale


def m_step(model: BasicModel, parallel: ParallelCorpus, view: Sequence[PseudoPair], cfg: RSLConfig,
           train_cfg: TrainConfig, opt: OptimizerState, scale: float, rng_key=()) -> float:
    """Weighted MLE over real pairs (weight 1) and pseudo pairs (stored weight x ``scale``)."""
    xs = list(parallel.sources) + [p.source for p in view]
    ys = list(parallel.targets) + [p.target for p in view]
    w = [1.0] * len(parallel) + [p.weight * scale for p in view]
    nll = float("nan")
    for epoch in range(cfg.mstep_epochs):
        rng = derive_rng(train_cfg.seed, model.model_id, "m-step", *rng_key, epoch)
        nll = train_epoch(model, xs, ys, w, train_cfg, opt, rng)
    return nll


@dataclass
class CoEMResult:
    models: list[BasicModel]
    history: list[dict] = field(default_factory=list)
    rounds_run: int = 0


def _evaluate(models, valid: ParallelCorpus | None, max_len: int) -> tuple[list[float], float]:
    if valid is None:
        return [], float("nan")
    decodes = [decode_best(m, valid.sources, DecodeConfig(beam=1, max_len=max_len)) for m in models]
    bleus = [corpus_bleu(d, valid.targets).bleu for d in decodes]
    if len(models) > 1:
        mat = matrix_from_decodes(decodes, [m.label for m in models]).values
        off = [mat[a][b] for a in range(len(models)) for b in range(len(models)) if a != b]
        div = float(np.mean(off))
    else:
        div = float("nan")
    return bleus, div


def co_em(models: Sequence[BasicModel], parallel: ParallelCorpus, mono: MonolingualCorpus, cfg: RSLConfig,
          train_cfg: TrainConfig, opts: Sequence[OptimizerState] | None = None,
          valid: ParallelCorpus | None = None, on_record: Callable[[dict], None] | None = None,
          dump_dir: Path | None = None, threads: int = 1) -> CoEMResult:
    """Alternate E-steps over parallel+mono sources with per-model weighted M-steps.

    Models are updated in place.  Stops early when mean validation BLEU
    improves by less than ``cfg.min_improvement`` over a round.
    """
    cfg.validate()
    models = list(models)
    if len(models) < 2:
        raise ConfigError("co-EM needs at least two models")
    opts = list(opts) if opts is not None else [OptimizerState.for_model(m, train_cfg) for m in models]
    sources = combine_sources(parallel, mono)
    result = CoEMResult(models)

    def emit(rec):
        result.history.append(rec)
        if on_record:
            on_record(rec)

    bleus, div = _evaluate(models, valid, cfg.max_len)
    prev = float(np.mean(bleus)) if bleus else None
    for i, b in enumerate(bleus):
        emit({"model_id": models[i].model_id, "round": 0, "metric": "valid_bleu", "value": b})
    for r in range(1, cfg.rounds + 1):
        pseudo = e_step(models, sources, cfg, r, threads)
        if dump_dir is not None:
            Path(dump_dir).mkdir(parents=True, exist_ok=True)
            pseudo.dump(Path(dump_dir) / f"pseudo.round{r}.tsv", parallel.source_vocab, parallel.target_vocab)
        scale = pseudo_scale(len(parallel), pseudo.n_sources, pseudo.samples, len(models), cfg.normalize_pairs)
        emit({"model_id": -1, "round": r, "metric": "pseudo_pairs", "value": len(pseudo.pairs)})
        emit({"model_id": -1, "round": r, "metric": "clipped_weights", "value": pseudo.clipped})

        def train(i):
            try:
                return m_step(models[i], parallel, pseudo.view(i), cfg, train_cfg, opts[i], scale, ("rsl", r))
            except DivergedTraining as exc:
                raise DivergedTraining(f"round {r}, model {models[i].model_id}: {exc}") from None

        with ThreadPoolExecutor(max(1, threads)) as pool:
            nlls = list(pool.map(train, range(len(models))))
        bleus, div = _evaluate(models, valid, cfg.max_len)
        for i, m in enumerate(models):
            emit({"model_id": m.model_id, "round": r, "metric": "train_nll", "value": nlls[i]})
            if bleus:
                emit({"model_id": m.model_id, "round": r, "metric": "valid_bleu", "value": bleus[i]})
        if bleus:
            emit({"model_id": -1, "round": r, "metric": "diversity_bleu", "value": div})
        result.rounds_run = r
        if bleus and cfg.min_improvement is not None:
            mean = float(np.mean(bleus))
            if mean - prev < cfg.min_improvement:
                log.info("co-EM converged after round %d (mean BLEU %.2f)", r, mean)
                break
            prev = mean
    return result


# ---------------------------------------------------------------------------
# single-model baselines


def self_training(model: BasicModel, parallel: ParallelCorpus, mono: MonolingualCorpus, cfg: RSLConfig,
                  train_cfg: TrainConfig, opt: OptimizerState | None = None, topk: int = 1,
                  on_record: Callable[[dict], None] | None = None) -> BasicModel:
    """Retrain on the model's own beam outputs; with ``topk > 1`` each source gets
    its ``topk`` best hypotheses, each weighted ``1/topk``."""
    cfg.validate()
    opt = opt or OptimizerState.for_model(model, train_cfg)
    sources = list(combine_sources(parallel, mono).sentences)
    dcfg = DecodeConfig(beam=max(cfg.beam, topk), alpha=cfg.alpha, max_len=cfg.max_len)
    for r in range(1, cfg.rounds + 1):
        hyps = topk_pseudo(model, sources, topk, dcfg)
        view = [PseudoPair(x, y, 1.0, 0, None, r) for x, hs in zip(sources, hyps) for y in hs]
        scale = pseudo_scale(len(parallel), len(sources), topk, 1, False)
        nll = m_step(model, parallel, view, cfg, train_cfg, opt, scale, (f"st{topk}", r))
        if on_record:
            on_record({"model_id": model.model_id, "round": r, "metric": "train_nll", "value": nll})
    return model


def back_translation(fwd: BasicModel, bwd: BasicModel, parallel: ParallelCorpus, target_mono: MonolingualCorpus,
                     cfg: RSLConfig, train_cfg: TrainConfig, opt: OptimizerState | None = None,
                     epochs: int | None = None) -> tuple[BasicModel, int]:
    """Train ``fwd`` on real pairs plus (back-translated source, real target) pairs.

    Returns the model and the number of synthetic pairs.
    """
    if bwd.source_vocab != fwd.target_vocab or bwd.target_vocab != fwd.source_vocab:
        raise ConfigError("backward model vocabularies do not mirror the forward model")
    if target_mono.vocab != fwd.target_vocab:
        raise ConfigError("target monolingual corpus uses a different vocabulary")
    opt = opt or OptimizerState.for_model(fwd, train_cfg)
    targets = [tuple(y) + (EOS,) for y in target_mono.sentences]
    # sources may not be empty, so the backward model must emit at least one token
    synth = [strip_eos(s) for s in decode_best(NonEmpty(bwd), list(target_mono.sentences), cfg.decode_config())] \
        if targets else []
    view = [PseudoPair(x, y, 1.0, 0, None, 0) for x, y in zip(synth, targets)]
    n_epochs = cfg.rounds * cfg.mstep_epochs if epochs is None else epochs
    bt_cfg = RSLConfig(**{**cfg.__dict__, "mstep_epochs": n_epochs})
    m_step(fwd, parallel, view, bt_cfg, train_cfg, opt, 1.0, ("bt",))
    return fwd, len(view)
