"""Greedy, beam, diverse-beam and token-level ensemble decoding.

All searches are batched over sentences.  A *decoder* is anything with the
``start / step / orient / direction`` surface of :class:`BasicModel`;
:class:`Ensemble` provides the same surface over several models.

Hypotheses are ranked by ``raw_logprob / lp(L)`` with the GNMT penalty
``lp(L) = ((5 + L) / 6) ** alpha`` where ``L`` counts tokens including the
terminal eos.  Exact score ties go to the lexicographically smaller token
sequence (internal order).

The beam shrinks as hypotheses finish: each step keeps the best
``K - finished`` candidates, eos candidates among them are finalized and the
rest stay alive.  A dominant hypothesis therefore can never be crowded out by
low-probability early endings, and ``K = 1`` reproduces greedy decoding.

Plain beam search stops a sentence early once its ``n_best`` finished
hypotheses are certain to stay on top: a live prefix with log-probability
``s <= 0`` can finish with a score of at most ``s / lp(max_len + 1)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import _log_softmax
from .corpus import EOS, UNK, TokenSeq
from .models import NEG_INF

_DEAD = NEG_INF / 2


class DecodeError(ValueError):
    pass


class UnsupportedCombination(ValueError):
    pass


@dataclass(frozen=True)
class DecodeConfig:
    beam: int = 5
    alpha: float = 0.6
    max_len: int = 32
    diversity: float = 0.5
    groups: int | None = None     # diverse beam only; None -> one group per beam slot

    def validate(self) -> None:
        if self.beam < 1 or self.alpha < 0 or self.diversity < 0 or self.max_len < 1:
            raise DecodeError("need beam >= 1, alpha >= 0, diversity >= 0, max_len >= 1")


@dataclass(frozen=True)
class Hypothesis:
    tokens: TokenSeq
    logprob: float
    score: float
    truncated: bool = False


def length_penalty(length: int, alpha: float) -> float:
    return ((5.0 + length) / 6.0) ** alpha


# ---------------------------------------------------------------------------
# ensembles


class EnsembleState:
    def __init__(self, states):
        self.states = list(states)

    def __len__(self):
        return len(self.states[0])

    @property
    def tokens(self):
        return self.states[0].tokens

    def push(self, tokens):
        return EnsembleState(s.push(tokens) for s in self.states)

    def select(self, rows):
        return EnsembleState(s.select(rows) for s in self.states)


def average_log_probs(logps: Sequence[np.ndarray]) -> np.ndarray:
    """``log(mean_i exp(logp_i))``; returns the input unchanged when all members agree."""
    stack = np.stack(logps)
    top = stack.max(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.exp(stack - top)
        out = top + np.log(rel.mean(axis=0))
    return np.where(np.isneginf(top), -np.inf, out)


class Ensemble:
    """Token-level ensemble: arithmetic mean of per-model next-token probabilities."""

    def __init__(self, models):
        if not models:
            raise UnsupportedCombination("empty ensemble")
        directions = {m.direction for m in models}
        if len(directions) > 1:
            raise UnsupportedCombination("cannot ensemble L2R and R2L models token by token")
        if len({m.target_vocab for m in models}) > 1:
            raise UnsupportedCombination("ensemble members need one target vocabulary")
        self.models = list(models)
        self.direction = models[0].direction
        self.target_vocab = models[0].target_vocab

    def orient(self, y):
        return self.models[0].orient(y)

    def start(self, xs):
        return EnsembleState(m.start(xs) for m in self.models)

    def step(self, state: EnsembleState):
        outs = [m.step(s) for m, s in zip(self.models, state.states)]
        return average_log_probs([o[0] for o in outs]), EnsembleState(o[1] for o in outs)


class NonEmpty:
    """Decoder wrapper that forbids eos as the first token (no empty outputs)."""

    def __init__(self, decoder):
        self.decoder = decoder
        self.direction = decoder.direction
        self.target_vocab = decoder.target_vocab

    def orient(self, y):
        return self.decoder.orient(y)

    def start(self, xs):
        return self.decoder.start(xs)

    def step(self, state):
        logp, state = self.decoder.step(state)
        if state.tokens.shape[1] == 0:
            logp = logp.copy()
            logp[:, EOS] = -np.inf
            logp = _log_softmax(logp)
        return logp, state


def ensemble_step(models, states) -> np.ndarray:
    """Ensemble next-token log-distribution for aligned per-model states."""
    return Ensemble(models).step(EnsembleState(states))[0]


# ---------------------------------------------------------------------------
# greedy


def greedy(decoder, xs: Sequence[TokenSeq], max_len: int = 32, chunk: int = 512) -> list[TokenSeq]:
    out: list = []
    for i in range(0, len(xs), chunk):
        out += _greedy_chunk(decoder, xs[i:i + chunk], max_len)
    return out


def _greedy_chunk(decoder, xs, max_len):
    n = len(xs)
    out: list = [None] * n
    state = decoder.start(xs)
    rows = np.arange(n)
    for _ in range(max_len):
        logp, state = decoder.step(state)
        tok = logp.argmax(axis=1)
        state = state.push(tok)
        done = tok == EOS
        for r in np.flatnonzero(done):
            out[rows[r]] = decoder.orient(tuple(int(v) for v in state.tokens[r]))
        if done.all():
            return out
        if done.any():
            keep = np.flatnonzero(~done)
            state, rows = state.select(keep), rows[keep]
    for r in range(len(rows)):
        out[rows[r]] = decoder.orient(tuple(int(v) for v in state.tokens[r]) + (EOS,))
    return out


# ---------------------------------------------------------------------------
# beam engine


def _lex_ranks(tokens: np.ndarray) -> np.ndarray:
    """Rank of each row's prefix in lexicographic order within its block; tokens (G, K, t)."""
    G, K, t = tokens.shape
    if t == 0:
        return np.zeros((G, K), dtype=np.int64)
    keys = [tokens[:, :, j] for j in range(t - 1, -1, -1)]
    order = np.lexsort(keys, axis=-1)
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(K)[None, :].repeat(G, 0), axis=-1)
    return ranks


def _search_chunk(decoder, xs, K: int, G: int, alpha: float, max_len: int, diversity: float,
                  n_best: int | None = None):
    N = len(xs)
    # early stopping only for a single group; groups interact through the diversity penalty
    stop_at = n_best if G == 1 and n_best is not None else None
    worst_lp = length_penalty(max_len + 1, alpha)
    finished: list[list[Hypothesis]] = [[] for _ in range(N * G)]
    base = decoder.start(xs)
    live = np.arange(N * G)                         # live group ids, K rows each
    state = base.select(np.repeat(np.arange(N), G * K))
    scores = np.tile(np.r_[0.0, np.full(K - 1, -np.inf)], N * G)
    for t in range(max_len + 1):
        logp, state = decoder.step(state)
        V = logp.shape[1]
        if t == max_len:
            forced = np.full_like(logp, -np.inf)
            forced[:, EOS] = logp[:, EOS]
            logp = forced
        cand = (scores[:, None] + logp).reshape(len(live), K * V)
        ranks = _lex_ranks(state.tokens.reshape(len(live), K, t))
        prefix_rank = np.repeat(ranks, V, axis=1)
        token_id = np.tile(np.arange(V), (len(live), K))
        counts = np.zeros((N, V))
        new_parent, new_tok, new_score = [], [], []
        keep_groups = []
        sent = live // G
        grp = live % G
        for g in range(G):
            sel = np.flatnonzero(grp == g)
            if not len(sel):
                continue
            pen = cand[sel] - diversity * counts[sent[sel]][:, np.tile(np.arange(V), K)] if diversity and g else cand[sel]
            order = np.lexsort((token_id[sel], prefix_rank[sel], -pen), axis=-1)[:, :K]
            for j, li in enumerate(sel):
                gid = live[li]
                n = gid // G
                slots = K - len(finished[gid])
                parents, toks, scs = [], [], []
                for c in order[j][:slots]:
                    raw = cand[li, c]
                    if raw < _DEAD:
                        break
                    k, v = divmod(int(c), V)
                    row = li * K + k
                    counts[n, v] += 1
                    if v == EOS:
                        seq = tuple(int(a) for a in state.tokens[row]) + (EOS,)
                        finished[gid].append(Hypothesis(
                            seq, float(raw), float(raw) / length_penalty(len(seq), alpha)))
                    else:
                        parents.append(row)
                        toks.append(v)
                        scs.append(raw)
                if not parents:
                    continue
                if stop_at is not None and len(finished[gid]) >= stop_at:
                    nth = sorted((h.score for h in finished[gid]), reverse=True)[stop_at - 1]
                    if nth > max(scs) / worst_lp:
                        continue
                while len(parents) < K:
                    parents.append(parents[0])
                    toks.append(UNK)
                    scs.append(-np.inf)
                keep_groups.append(gid)
                new_parent += parents
                new_tok += toks
                new_score += scs
        if not keep_groups:
            break
        order_groups = np.argsort(keep_groups, kind="stable")
        live = np.asarray(keep_groups)[order_groups]
        idx = (order_groups[:, None] * K + np.arange(K)[None, :]).reshape(-1)
        parents = np.asarray(new_parent)[idx]
        state = state.select(parents).push(np.asarray(new_tok)[idx])
        scores = np.asarray(new_score, dtype=np.float64)[idx]
    return finished


def _search(decoder, xs, beam: int, groups: int, alpha: float, max_len: int, diversity: float,
            chunk: int, n_best: int | None = None) -> list[list[Hypothesis]]:
    if beam % groups:
        raise DecodeError(f"group count {groups} must divide beam size {beam}")
    K = beam // groups
    results = []
    step = max(1, chunk // beam)
    for i in range(0, len(xs), step):
        part = xs[i:i + step]
        fin = _search_chunk(decoder, part, K, groups, alpha, max_len, diversity, n_best)
        for n in range(len(part)):
            best: dict[TokenSeq, Hypothesis] = {}
            for g in range(groups):
                for h in fin[n * groups + g]:
                    if h.tokens not in best or h.score > best[h.tokens].score:
                        best[h.tokens] = h
            ranked = sorted(best.values(), key=lambda h: (-h.score, h.tokens))[:beam]
            results.append([Hypothesis(decoder.orient(h.tokens), h.logprob, h.score,
                                       len(h.tokens) > max_len) for h in ranked])
    return results


def beam_search_batch(decoder, xs: Sequence[TokenSeq], cfg: DecodeConfig, chunk: int = 2048,
                      n_best: int | None = None) -> list[list[Hypothesis]]:
    """Up to ``cfg.beam`` hypotheses per source, best first.

    With ``n_best`` set, only the first ``n_best`` entries of each list are
    guaranteed to match a full search; the search may stop sooner.
    """
    cfg.validate()
    return _search(decoder, list(xs), cfg.beam, 1, cfg.alpha, cfg.max_len, 0.0, chunk, n_best)


def beam_search(decoder, x: TokenSeq, cfg: DecodeConfig) -> list[Hypothesis]:
    return beam_search_batch(decoder, [x], cfg)[0]


def diverse_beam_search_batch(decoder, xs: Sequence[TokenSeq], cfg: DecodeConfig,
                              chunk: int = 2048) -> list[list[Hypothesis]]:
    """Groups decoded in turn at every step; later groups pay ``diversity`` per
    earlier selection of the same token at that step (Hamming diversity)."""
    cfg.validate()
    groups = cfg.groups or cfg.beam
    return _search(decoder, list(xs), cfg.beam, groups, cfg.alpha, cfg.max_len, cfg.diversity, chunk)


def diverse_beam_search(decoder, x: TokenSeq, cfg: DecodeConfig) -> list[Hypothesis]:
    return diverse_beam_search_batch(decoder, [x], cfg)[0]


def topk_pseudo(decoder, xs: Sequence[TokenSeq], k: int, cfg: DecodeConfig,
                diverse: bool = False) -> list[list[TokenSeq]]:
    """The ``k`` best distinct hypotheses per source."""
    if k > cfg.beam:
        raise DecodeError("k must not exceed the beam size")
    hyps = (diverse_beam_search_batch(decoder, xs, cfg) if diverse
            else beam_search_batch(decoder, xs, cfg, n_best=k))
    return [[h.tokens for h in hs[:k]] for hs in hyps]


def decode_best(decoder, xs: Sequence[TokenSeq], cfg: DecodeConfig) -> list[TokenSeq]:
    """Top-1 output per source (greedy when ``cfg.beam == 1``)."""
    if cfg.beam == 1:
        return greedy(decoder, list(xs), cfg.max_len)
    return [hyps[0].tokens for hyps in beam_search_batch(decoder, xs, cfg, n_best=1)]
