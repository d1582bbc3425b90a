"""BLEU, inter-model diversity matrices and monolingual-size sweep tables."""
from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

from .corpus import EOS, TokenSeq
from .decoding import DecodeConfig, decode_best

SMOOTH_EPS = 1e-9
MAX_ORDER = 4


@dataclass(frozen=True)
class BleuReport:
    bleu: float
    precisions: tuple[float, ...]
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    smoothing: str = f"floor-eps={SMOOTH_EPS}"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _ngrams(seq: TokenSeq, n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def corpus_bleu(hypotheses: Sequence[TokenSeq], references: Sequence[TokenSeq]) -> BleuReport:
    """Corpus BLEU-4 on token ids, eos excluded, single reference."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp = [t for t in hyp if t != EOS]
        ref = [t for t in ref if t != EOS]
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, MAX_ORDER + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    precisions = tuple(m / t if t and m else SMOOTH_EPS for m, t in zip(matches, totals))
    if hyp_len == 0:
        bp = 0.0
    else:
        bp = min(1.0, math.exp(1.0 - ref_len / hyp_len))
    score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER)
    if matches == totals and hyp_len == ref_len and hyp_len:
        score = 100.0
    return BleuReport(score, precisions, bp, hyp_len, ref_len)


def exact_match(hypotheses: Sequence[TokenSeq], references: Sequence[TokenSeq]) -> float:
    return sum(h == r for h, r in zip(hypotheses, references)) / max(len(references), 1)


@dataclass(frozen=True)
class DiversityMatrix:
    labels: tuple[str, ...]
    values: tuple[tuple[float, ...], ...]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([""] + list(self.labels))
        for label, row in zip(self.labels, self.values):
            w.writerow([label] + [f"{v:.2f}" for v in row])
        return buf.getvalue()


def diversity_matrix(models, sources: Sequence[TokenSeq], cfg: DecodeConfig = DecodeConfig(),
                     labels: Sequence[str] | None = None) -> DiversityMatrix:
    """Entry (a, b) is BLEU of model a's decodes scored against model b's decodes."""
    decodes = [decode_best(m, sources, cfg) for m in models]
    return matrix_from_decodes(decodes, labels or [m.label for m in models])


def matrix_from_decodes(decodes: Sequence[Sequence[TokenSeq]], labels: Sequence[str]) -> DiversityMatrix:
    k = len(decodes)
    vals = tuple(tuple(100.0 if a == b else corpus_bleu(decodes[a], decodes[b]).bleu for b in range(k))
                 for a in range(k))
    return DiversityMatrix(tuple(labels), vals)


def sweep_report(runs: Sequence[tuple[int, dict[str, float]]]) -> tuple[str, list[dict]]:
    """Size-vs-BLEU table per model; returns ``(aligned text table, records)``.

    The size-0 row is the basic models' BLEU by construction.
    """
    sizes = [s for s, _ in runs]
    if 0 not in sizes or len(set(sizes)) < 2:
        raise ValueError("need at least two monolingual sizes including 0")
    rows = sorted(runs, key=lambda r: r[0])
    names = sorted({name for _, scores in rows for name in scores})
    records = [{"mono_size": size, "model": name, "bleu": scores[name]}
               for size, scores in rows for name in names if name in scores]
    header = ["mono"] + names
    table = [header] + [[str(size)] + [f"{scores[n]:.2f}" if n in scores else "-" for n in names]
                        for size, scores in rows]
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    text = "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in table) + "\n"
    return text, records
