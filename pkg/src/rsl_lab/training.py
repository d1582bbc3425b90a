"""Maximum-likelihood training: batching, Adam with warmup, checkpoints."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .corpus import ParallelCorpus, TokenSeq
from .decoding import greedy
from .evaluation import corpus_bleu
from .models import BasicModel, Checkpoint, derive_rng, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


class DivergedTraining(RuntimeError):
    pass


class CheckpointMismatch(ValueError):
    pass


@dataclass
class TrainConfig:
    max_epochs: int = 50
    batch_tokens: int = 512
    clip_norm: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0       # epochs; 0 disables periodic checkpoints
    eval_every: int = 1             # epochs
    patience: int = 5               # evaluations without validation-BLEU improvement
    lr: float = 0.1                 # base rate; peaks at lr / sqrt(warmup) = 5e-3
    warmup: int = 400
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9

    def validate(self) -> None:
        if self.max_epochs < 0 or self.batch_tokens <= 0 or self.eval_every <= 0 or self.patience <= 0:
            raise ValueError("training budgets must be positive")
        if self.lr < 0 or self.warmup <= 0 or self.clip_norm <= 0:
            raise ValueError("need lr >= 0, warmup > 0, clip_norm > 0")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    lr: float = 5e-3
    warmup: int = 400
    clip_norm: float | None = 1.0

    @classmethod
    def for_model(cls, model: BasicModel, cfg: TrainConfig) -> "OptimizerState":
        zeros = {k: np.zeros_like(v.value) for k, v in model.params.items()}
        return cls({k: z.copy() for k, z in zeros.items()}, zeros, 0, cfg.beta1, cfg.beta2, cfg.eps,
                   cfg.lr, cfg.warmup, cfg.clip_norm)

    def learning_rate(self, t: int) -> float:
        return self.lr * min(t ** -0.5, t * self.warmup ** -1.5)

    def as_dict(self) -> dict:
        return {"step": self.step, "m": self.m, "v": self.v}


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float | None) -> tuple[dict[str, np.ndarray], float]:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if not math.isfinite(norm):
        raise DivergedTraining("non-finite gradient")
    if max_norm is not None and norm > max_norm:
        f = max_norm / norm
        grads = {k: g * f for k, g in grads.items()}
    return grads, norm


def adam_step(opt: OptimizerState, params: dict[str, ad.Node], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Clip, then one bias-corrected Adam update applied in place."""
    grads, _ = clip_gradients(grads, opt.clip_norm)
    opt.step += 1
    t = opt.step
    lr = opt.learning_rate(t)
    b1, b2 = opt.beta1, opt.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, g in grads.items():
        m = opt.m[name] = b1 * opt.m[name] + (1.0 - b1) * g
        v = opt.v[name] = b2 * opt.v[name] + (1.0 - b2) * g * g
        if lr == 0.0:
            continue
        node = params[name]
        node.value = node.value - lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    return {k: n.value for k, n in params.items()}


def make_batches(targets: Sequence[TokenSeq], sources: Sequence[TokenSeq], budget: int,
                 rng: np.random.Generator | None = None) -> list[np.ndarray]:
    """Sort by target (then source) length and pack while padded target tokens fit the budget."""
    order = sorted(range(len(targets)), key=lambda i: (len(targets[i]), len(sources[i]), i))
    batches, cur, longest = [], [], 0
    for i in order:
        L = max(longest, len(targets[i]))
        if cur and L * (len(cur) + 1) > budget:
            batches.append(np.asarray(cur))
            cur, L = [], len(targets[i])
        cur.append(i)
        longest = L
    if cur:
        batches.append(np.asarray(cur))
    if rng is not None:
        perm = rng.permutation(len(batches))
        batches = [batches[j] for j in perm]
    return batches


def train_epoch(model: BasicModel, sources: Sequence[TokenSeq], targets: Sequence[TokenSeq],
                weights: Sequence[float] | None, cfg: TrainConfig, opt: OptimizerState,
                rng: np.random.Generator) -> float:
    """One pass of weighted token-mean NLL; returns the epoch's weighted NLL per token."""
    if not sources:
        raise ValueError("empty training set")
    w = np.ones(len(sources)) if weights is None else np.asarray(weights, dtype=np.float64)
    model.dropout_mode(True)
    total, count = 0.0, 0
    try:
        for b, idx in enumerate(make_batches(targets, sources, cfg.batch_tokens, rng)):
            xs = [sources[i] for i in idx]
            ys = [targets[i] for i in idx]
            with ad.Tape() as tape:
                loss, ntok = model.weighted_nll(xs, ys, w[idx])
            value = float(loss.value)
            if not math.isfinite(value):
                raise DivergedTraining(f"non-finite loss in batch {b}")
            grads = ad.backward(tape, loss)
            named = {k: grads.get(p.id, np.zeros_like(p.value)) for k, p in model.params.items()}
            try:
                adam_step(opt, model.params, named)
            except DivergedTraining as exc:
                raise DivergedTraining(f"{exc} in batch {b}") from None
            total += value * ntok
            count += ntok
    finally:
        model.dropout_mode(False)
    return total / count


def mle_epoch(model: BasicModel, corpus: ParallelCorpus, cfg: TrainConfig, opt: OptimizerState,
              rng: np.random.Generator | None = None) -> float:
    rng = rng or derive_rng(cfg.seed, model.model_id, "mle", opt.step)
    return train_epoch(model, corpus.sources, corpus.targets, None, cfg, opt, rng)


def corpus_nll(model: BasicModel, sources, targets) -> float:
    """Per-token NLL in evaluation mode."""
    lp = model.log_probs(list(sources), list(targets))
    return float(-lp.sum() / sum(len(t) for t in targets))


def validation_bleu(model, corpus: ParallelCorpus, max_len: int = 32) -> float:
    return corpus_bleu(greedy(model, corpus.sources, max_len), corpus.targets).bleu


@dataclass
class TrainResult:
    epochs: int
    best_bleu: float
    history: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def train_model(model: BasicModel, corpus: ParallelCorpus, valid: ParallelCorpus | None, cfg: TrainConfig,
                opt: OptimizerState | None = None, ckpt_dir: Path | None = None,
                on_record: Callable[[dict], None] | None = None, max_len: int = 32) -> TrainResult:
    """MLE training with early stopping on validation BLEU; keeps the best parameters."""
    cfg.validate()
    opt = opt or OptimizerState.for_model(model, cfg)
    best, best_params, stale = -1.0, None, 0
    result = TrainResult(0, -1.0)
    for epoch in range(1, cfg.max_epochs + 1):
        rng = derive_rng(cfg.seed, model.model_id, "mle-epoch", epoch)
        nll = train_epoch(model, corpus.sources, corpus.targets, None, cfg, opt, rng)
        rec = {"epoch": epoch, "step": opt.step, "metric": "train_nll", "value": nll}
        result.history.append(rec)
        if on_record:
            on_record(rec)
        result.epochs = epoch
        if ckpt_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            path = Path(ckpt_dir) / f"epoch{epoch:04d}.ckpt"
            save_checkpoint(path, model, opt.as_dict(), epoch)
            result.checkpoints.append(path)
        if valid is not None and epoch % cfg.eval_every == 0:
            bleu = validation_bleu(model, valid, max_len)
            rec = {"epoch": epoch, "step": opt.step, "metric": "valid_bleu", "value": bleu}
            result.history.append(rec)
            if on_record:
                on_record(rec)
            log.info("model %s epoch %d nll %.4f bleu %.2f", model.label, epoch, nll, bleu)
            if bleu > best:
                best, stale = bleu, 0
                best_params = {k: v.copy() for k, v in model.parameter_arrays().items()}
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    if best_params is not None:
        model.set_parameters(best_params)
    result.best_bleu = best
    return result


def average_checkpoints(paths: Sequence, out=None) -> Checkpoint:
    """Parameter-wise mean; optimizer state is dropped, sources recorded in ``meta``."""
    if not paths:
        raise ValueError("no checkpoints to average")
    ckpts = [load_checkpoint(p) for p in paths]
    ref = ckpts[0].model
    for c, p in zip(ckpts[1:], paths[1:]):
        m = c.model
        for field_name in ("arch", "direction", "source_vocab", "target_vocab"):
            if getattr(m, field_name) != getattr(ref, field_name):
                raise CheckpointMismatch(f"{p}: field {field_name!r} differs from {paths[0]}")
        ref_shapes = [(k, v.shape) for k, v in ref.parameter_arrays().items()]
        shapes = [(k, v.shape) for k, v in m.parameter_arrays().items()]
        if shapes != ref_shapes:
            raise CheckpointMismatch(f"{p}: field 'params' differs from {paths[0]}")
    avg = {k: np.mean(np.stack([c.model.params[k].value for c in ckpts]), axis=0)
           for k in ref.params}
    model = ref.copy()
    model.set_parameters(avg)
    meta = {"averaged_from": [str(p) for p in paths]}
    if out is not None:
        save_checkpoint(out, model, None, max(c.epoch for c in ckpts), None, meta)
    return Checkpoint(model, None, max(c.epoch for c in ckpts), None, meta)
