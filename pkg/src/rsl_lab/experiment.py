"""The cipher-task experiment shared by the acceptance suite and scripts/.

One seed trains six basic models (three architectures x two directions) plus
a second-seed L2R model per architecture, then compares RSL, self-training
(top-1 and top-3 pseudo targets) and a token-level ensemble on held-out data.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus import MonolingualCorpus, ParallelCorpus, SyntheticTaskSpec, generate_task, target_mono
from .decoding import DecodeConfig, Ensemble, decode_best
from .evaluation import corpus_bleu, matrix_from_decodes
from .models import KINDS, L2R, R2L, BasicModel, default_arch, init_model
from .rsl import RSLConfig, back_translation, co_em, self_training
from .training import OptimizerState, TrainConfig, train_model

log = logging.getLogger(__name__)


@dataclass
class CipherExperimentConfig:
    task: SyntheticTaskSpec = field(default_factory=lambda: SyntheticTaskSpec(heldout=400))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(max_epochs=40))
    rsl: RSLConfig = field(default_factory=lambda: RSLConfig(mode="beam", min_improvement=None))
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    st_directions: tuple[str, ...] = (L2R,)
    bt_directions: tuple[str, ...] = ()     # back-translation baseline; empty skips it
    d_model: int = 32


def split_heldout(held: ParallelCorpus) -> tuple[ParallelCorpus, ParallelCorpus]:
    """First half validation (early stopping), second half test."""
    n = len(held) // 2
    mk = lambda pairs: ParallelCorpus(tuple(pairs), held.source_vocab, held.target_vocab)
    return mk(held.pairs[:n]), mk(held.pairs[n:])


def heldout_bleu(decoder, test: ParallelCorpus, cfg: DecodeConfig) -> float:
    return corpus_bleu(decode_best(decoder, test.sources, cfg), test.targets).bleu


@dataclass
class SeedResult:
    seed: int
    basic: dict[str, float]
    rsl: dict[str, float]
    st_top1: dict[str, float]
    st_top3: dict[str, float]
    bt: dict[str, float]
    ensemble_l2r: float
    cross_arch_diversity: float
    same_arch_diversity: float
    rsl_history: list[dict]
    seconds: dict[str, float]

    def mean(self, name: str) -> float:
        return float(np.mean(list(getattr(self, name).values())))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Setup:
    P: ParallelCorpus
    mono: MonolingualCorpus
    valid: ParallelCorpus
    test: ParallelCorpus
    train: TrainConfig
    basic: list[BasicModel]
    opts: list[OptimizerState]
    target_mono: MonolingualCorpus

    def build(self, kind: str, direction: str, model_id: int, init_seed: int, d_model: int) -> BasicModel:
        arch = default_arch(kind, d_model=d_model)
        return init_model(arch, direction, self.P.source_vocab, self.P.target_vocab, seed=init_seed,
                          model_id=model_id)


def clone_opt(o: OptimizerState) -> OptimizerState:
    return OptimizerState(**{**asdict(o), "m": {k: v.copy() for k, v in o.m.items()},
                             "v": {k: v.copy() for k, v in o.v.items()}})


def train_basic_models(seed: int, cfg: CipherExperimentConfig) -> Setup:
    """Generate the seed's task and MLE-train the six basic models."""
    spec = SyntheticTaskSpec(**{**asdict(cfg.task), "seed": seed})
    task = generate_task(spec)
    valid, test = split_heldout(task.heldout)
    tcfg = TrainConfig(**{**asdict(cfg.train), "seed": seed})
    setup = Setup(task.parallel, task.mono, valid, test, tcfg, [], [], target_mono(task, spec))
    for kind in KINDS:
        for direction in (L2R, R2L):
            m = setup.build(kind, direction, len(setup.basic), seed, cfg.d_model)
            opt = OptimizerState.for_model(m, tcfg)
            train_model(m, setup.P, valid, tcfg, opt)
            setup.basic.append(m)
            setup.opts.append(opt)
    return setup


def run_cipher_seed(seed: int, cfg: CipherExperimentConfig | None = None) -> SeedResult:
    cfg = cfg or CipherExperimentConfig()
    timer: dict[str, float] = {}
    t0 = time.perf_counter()
    setup = train_basic_models(seed, cfg)
    P, valid, test, tcfg, basic, opts = setup.P, setup.valid, setup.test, setup.train, setup.basic, setup.opts
    twins = []
    for kind in KINDS:
        m = setup.build(kind, L2R, 100 + len(twins), seed + 1000, cfg.d_model)
        train_model(m, P, valid, tcfg)
        twins.append(m)
    timer["basic"] = time.perf_counter() - t0

    dcfg = cfg.decode
    basic_bleu = {m.label: heldout_bleu(m, test, dcfg) for m in basic}
    l2r = [m for m in basic if m.direction == L2R]
    decodes = {m.label: decode_best(m, test.sources, dcfg) for m in l2r + twins}
    mat = matrix_from_decodes(list(decodes.values()), list(decodes))
    labels = list(decodes)
    models_by_label = {m.label: m for m in l2r + twins}
    cross, same = [], []
    for a, la in enumerate(labels):
        for b, lb in enumerate(labels):
            if a == b:
                continue
            ka, kb = models_by_label[la].arch.kind, models_by_label[lb].arch.kind
            both_first = la in {m.label for m in l2r} and lb in {m.label for m in l2r}
            if ka == kb:
                same.append(mat.values[a][b])
            elif both_first:
                cross.append(mat.values[a][b])
    ensemble_bleu = heldout_bleu(Ensemble(l2r), test, dcfg)
    timer["analysis"] = time.perf_counter() - t0 - timer["basic"]

    t1 = time.perf_counter()
    rsl_cfg = RSLConfig(**{**asdict(cfg.rsl), "seed": seed, "k": len(basic)})
    rsl_models = [m.copy() for m in basic]
    result = co_em(rsl_models, P, setup.mono, rsl_cfg, tcfg, [clone_opt(o) for o in opts], valid)
    rsl_bleu = {m.label: heldout_bleu(m, test, dcfg) for m in rsl_models}
    timer["rsl"] = time.perf_counter() - t1

    t2 = time.perf_counter()
    st = {1: {}, 3: {}}
    for k in st:
        for m, o in zip(basic, opts):
            if m.direction not in cfg.st_directions:
                continue
            sm = m.copy()
            self_training(sm, P, setup.mono, rsl_cfg, tcfg, clone_opt(o), topk=k)
            st[k][m.label] = heldout_bleu(sm, test, dcfg)
    timer["st"] = time.perf_counter() - t2

    t3 = time.perf_counter()
    bt = {}
    swapped, swapped_valid = P.swapped(), valid.swapped()
    for m, o in zip(basic, opts):
        if m.direction not in cfg.bt_directions:
            continue
        bwd = init_model(m.arch, m.direction, swapped.source_vocab, swapped.target_vocab,
                         seed=seed + 7919, model_id=m.model_id)
        train_model(bwd, swapped, swapped_valid, tcfg)
        fwd = m.copy()
        back_translation(fwd, bwd, P, setup.target_mono, rsl_cfg, tcfg, clone_opt(o))
        bt[m.label] = heldout_bleu(fwd, test, dcfg)
    timer["bt"] = time.perf_counter() - t3
    timer["total"] = time.perf_counter() - t0
    res = SeedResult(seed, basic_bleu, rsl_bleu, st[1], st[3], bt, ensemble_bleu,
                     float(np.mean(cross)), float(np.mean(same)), result.history, timer)
    log.info("seed %d: %s", seed, res.to_dict())
    return res


def mono_sweep(seed: int, sizes, cfg: CipherExperimentConfig | None = None) -> list[tuple[int, dict[str, float]]]:
    """Per-model test BLEU after RSL with the first ``n`` monolingual sources, for each ``n``.

    Size 0 reports the basic models themselves.
    """
    cfg = cfg or CipherExperimentConfig()
    setup = train_basic_models(seed, cfg)
    rsl_cfg = RSLConfig(**{**asdict(cfg.rsl), "seed": seed, "k": len(setup.basic)})
    runs = []
    for n in sorted(set(sizes)):
        if n == 0:
            runs.append((0, {m.label: heldout_bleu(m, setup.test, cfg.decode) for m in setup.basic}))
            continue
        mono = MonolingualCorpus(setup.mono.sentences[:n], setup.mono.vocab)
        models = [m.copy() for m in setup.basic]
        co_em(models, setup.P, mono, rsl_cfg, setup.train, [clone_opt(o) for o in setup.opts], setup.valid)
        runs.append((n, {m.label: heldout_bleu(m, setup.test, cfg.decode) for m in models}))
    return runs
