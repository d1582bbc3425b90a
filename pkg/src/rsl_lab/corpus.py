"""Vocabularies, corpora, synthetic translation tasks and corpus file I/O.

Token sequences are plain tuples of ints.  Targets held in memory end with
``EOS``; sources carry content tokens only.  On disk neither side stores the
terminal eos (it is appended again when reading targets).
"""
from __future__ import annotations

import dataclasses
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<s>", "</s>", "<unk>")

TokenSeq = tuple[int, ...]

TASKS = ("cipher-reverse", "number-spelling", "noisy-copy")
DIGIT_WORDS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine")


class CorpusError(ValueError):
    """Base error for malformed corpora."""


class EmptyCorpusError(CorpusError):
    pass


class CorpusFormatError(CorpusError):
    pass


class ConfigError(ValueError):
    """Inconsistent task or corpus configuration."""


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if tuple(self.tokens[:4]) != RESERVED:
            raise ConfigError("reserved tokens must occupy ids 0-3")
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigError("duplicate surface strings in vocabulary")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self):
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self._index.get(token, UNK)

    def encode(self, line: str) -> TokenSeq:
        return tuple(self.id(t) for t in line.split())

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids if i != EOS)

    @classmethod
    def from_tokens(cls, content: Iterable[str]) -> "Vocabulary":
        return cls(RESERVED + tuple(content))

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(tuple(Path(path).read_text(encoding="utf-8").splitlines()))


def build_vocab(lines: Sequence[str], max_size: int) -> Vocabulary:
    """Reserved tokens, then tokens by descending frequency (ties lexicographic)."""
    if max_size < 5:
        raise ConfigError("max_size must be at least 5")
    counts = Counter(tok for line in lines for tok in line.split() if tok not in RESERVED)
    if not counts:
        raise EmptyCorpusError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocabulary.from_tokens(ranked[: max_size - len(RESERVED)])


@dataclass(frozen=True)
class SentencePair:
    source: TokenSeq
    target: TokenSeq

    def __post_init__(self):
        if not self.source or not self.target:
            raise CorpusError("sentence pair sides must be nonempty")


@dataclass(frozen=True)
class ParallelCorpus:
    pairs: tuple[SentencePair, ...]
    source_vocab: Vocabulary
    target_vocab: Vocabulary

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))

    def __len__(self):
        return len(self.pairs)

    @property
    def sources(self) -> list[TokenSeq]:
        return [p.source for p in self.pairs]

    @property
    def targets(self) -> list[TokenSeq]:
        return [p.target for p in self.pairs]

    def swapped(self) -> "ParallelCorpus":
        """Target->source corpus (sources gain eos, targets lose it)."""
        return ParallelCorpus(
            tuple(SentencePair(strip_eos(p.target), p.source + (EOS,)) for p in self.pairs),
            self.target_vocab, self.source_vocab)


@dataclass(frozen=True)
class MonolingualCorpus:
    sentences: tuple[TokenSeq, ...]
    vocab: Vocabulary

    def __post_init__(self):
        object.__setattr__(self, "sentences", tuple(self.sentences))

    def __len__(self):
        return len(self.sentences)


@dataclass(frozen=True)
class CombinedSourceCorpus:
    sentences: tuple[TokenSeq, ...]
    provenance: tuple[str, ...]

    def __len__(self):
        return len(self.sentences)


def combine_sources(parallel: ParallelCorpus, mono: MonolingualCorpus) -> CombinedSourceCorpus:
    """Parallel sources first, then monolingual ones; duplicates are kept."""
    if parallel.source_vocab != mono.vocab:
        raise ConfigError("parallel and monolingual corpora use different source vocabularies")
    sents = tuple(parallel.sources) + tuple(mono.sentences)
    prov = ("parallel-source",) * len(parallel) + ("monolingual",) * len(mono)
    return CombinedSourceCorpus(sents, prov)


def strip_eos(seq: TokenSeq) -> TokenSeq:
    return seq[:-1] if seq and seq[-1] == EOS else seq


def reverse_content(seq: TokenSeq) -> TokenSeq:
    """Reverse the tokens before the terminal eos, keeping the eos in place."""
    if seq and seq[-1] == EOS:
        return tuple(reversed(seq[:-1])) + (EOS,)
    return tuple(reversed(seq))


# ---------------------------------------------------------------------------
# synthetic tasks


@dataclass(frozen=True)
class SyntheticTaskSpec:
    task: str = "cipher-reverse"
    vocab_size: int = 30          # content tokens on the source side
    max_len: int = 12
    min_len: int = 2
    pairs: int = 2000
    mono: int = 4000
    heldout: int = 200
    noise: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.max_len < 2 or not 1 <= self.min_len <= self.max_len:
            raise ConfigError("need max_len >= 2 and 1 <= min_len <= max_len")
        if self.pairs <= 0 or self.mono < 0 or self.heldout <= 0:
            raise ConfigError("pair/heldout counts must be positive, mono nonnegative")
        if not 0.0 <= self.noise < 1.0:
            raise ConfigError("noise rate must be in [0, 1)")
        if self.task == "number-spelling" and self.vocab_size != 10:
            raise ConfigError("number-spelling uses exactly 10 source tokens (digits)")
        if self.task == "cipher-reverse" and self.vocab_size < 2:
            raise ConfigError("cipher needs at least 2 content tokens for a bijection")
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be positive")


@dataclass(frozen=True)
class SyntheticTask:
    parallel: ParallelCorpus
    mono: MonolingualCorpus
    heldout: ParallelCorpus
    cipher: tuple[int, ...] | None = None   # source content index -> target content index


def _space_size(spec: SyntheticTaskSpec) -> int:
    v = spec.vocab_size
    return sum(v ** n for n in range(spec.min_len, spec.max_len + 1))


def generate_task(spec: SyntheticTaskSpec) -> SyntheticTask:
    """Deterministic parallel / monolingual / held-out corpora for ``spec``.

    All three sets have pairwise disjoint source sentences.  Noise in
    ``noisy-copy`` corrupts training targets only; held-out references are
    clean.
    """
    spec.validate()
    need = spec.pairs + spec.mono + spec.heldout
    if _space_size(spec) < 2 * need:
        raise ConfigError("sentence space too small for disjoint splits")
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x7A5C]))
    v = spec.vocab_size

    if spec.task == "number-spelling":
        src_vocab = Vocabulary.from_tokens(str(d) for d in range(10))
        tgt_vocab = Vocabulary.from_tokens(DIGIT_WORDS)
    else:
        src_vocab = Vocabulary.from_tokens(f"s{i}" for i in range(v))
        tgt_vocab = Vocabulary.from_tokens(f"t{i}" for i in range(v))

    cipher = tuple(int(c) for c in rng.permutation(v)) if spec.task == "cipher-reverse" else None

    seen: set[TokenSeq] = set()

    def draw() -> TokenSeq:
        while True:
            n = int(rng.integers(spec.min_len, spec.max_len + 1))
            s = tuple(int(t) + 4 for t in rng.integers(0, v, size=n))
            if s not in seen:
                seen.add(s)
                return s

    def translate(src: TokenSeq, noisy: bool) -> TokenSeq:
        content = [t - 4 for t in src]
        if spec.task == "cipher-reverse":
            out = [cipher[c] for c in reversed(content)]
        elif spec.task == "number-spelling":
            out = content
        else:
            out = list(content)
            if noisy and spec.noise > 0:
                flips = rng.random(len(out)) < spec.noise
                for pos in np.flatnonzero(flips):
                    out[pos] = int((out[pos] + rng.integers(1, v)) % v) if v > 1 else out[pos]
        return tuple(c + 4 for c in out) + (EOS,)

    train = [SentencePair(s, translate(s, True)) for s in (draw() for _ in range(spec.pairs))]
    mono = [draw() for _ in range(spec.mono)]
    held = [SentencePair(s, translate(s, False)) for s in (draw() for _ in range(spec.heldout))]
    return SyntheticTask(
        ParallelCorpus(tuple(train), src_vocab, tgt_vocab),
        MonolingualCorpus(tuple(mono), src_vocab),
        ParallelCorpus(tuple(held), src_vocab, tgt_vocab),
        cipher,
    )


def target_mono(task: SyntheticTask, spec: SyntheticTaskSpec) -> MonolingualCorpus:
    """Target-side monolingual text (gold translations of the source mono set).

    Used by back-translation; the sentences carry no eos.
    """
    return MonolingualCorpus(
        tuple(strip_eos(_gold(task, spec, s)) for s in task.mono.sentences), task.parallel.target_vocab)


def _gold(task: SyntheticTask, spec: SyntheticTaskSpec, src: TokenSeq) -> TokenSeq:
    content = [t - 4 for t in src]
    if spec.task == "cipher-reverse":
        content = [task.cipher[c] for c in reversed(content)]
    return tuple(c + 4 for c in content) + (EOS,)


def decipher(task: SyntheticTask, target: TokenSeq) -> TokenSeq:
    """Invert the cipher-reverse mapping (exact-accuracy oracle)."""
    if task.cipher is None:
        raise ConfigError("task has no cipher")
    inverse = {c: i for i, c in enumerate(task.cipher)}
    return tuple(inverse[t - 4] + 4 for t in reversed(strip_eos(target)))


# ---------------------------------------------------------------------------
# file I/O


def _write_lines(path, lines: Iterable[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")


def _read_lines(path) -> list[str]:
    with open(path, encoding="utf-8", newline="\n") as fh:
        text = fh.read()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def write_corpus(corpus: ParallelCorpus, paths: tuple) -> None:
    src_path, tgt_path = paths
    _write_lines(src_path, (corpus.source_vocab.decode(p.source) for p in corpus.pairs))
    _write_lines(tgt_path, (corpus.target_vocab.decode(p.target) for p in corpus.pairs))


def read_corpus(paths: tuple, source_vocab: Vocabulary | None = None,
                target_vocab: Vocabulary | None = None, max_vocab: int = 100_000) -> ParallelCorpus:
    """Read a parallel corpus; vocabularies are built from the files if absent."""
    src_path, tgt_path = paths
    src_lines, tgt_lines = _read_lines(src_path), _read_lines(tgt_path)
    for i in range(max(len(src_lines), len(tgt_lines))):
        if i >= len(src_lines) or i >= len(tgt_lines):
            raise CorpusFormatError(
                f"line count mismatch ({len(src_lines)} vs {len(tgt_lines)}) at line {i + 1}")
        if not src_lines[i].split() or not tgt_lines[i].split():
            raise CorpusFormatError(f"empty sentence at line {i + 1}")
    if not src_lines:
        raise EmptyCorpusError(f"{src_path} is empty")
    source_vocab = source_vocab or build_vocab(src_lines, max_vocab)
    target_vocab = target_vocab or build_vocab(tgt_lines, max_vocab)
    pairs = tuple(SentencePair(source_vocab.encode(s), target_vocab.encode(t) + (EOS,))
                  for s, t in zip(src_lines, tgt_lines))
    return ParallelCorpus(pairs, source_vocab, target_vocab)


def write_mono(corpus: MonolingualCorpus, path) -> None:
    _write_lines(path, (corpus.vocab.decode(s) for s in corpus.sentences))


def read_mono(path, vocab: Vocabulary) -> MonolingualCorpus:
    lines = _read_lines(path)
    for i, line in enumerate(lines):
        if not line.split():
            raise CorpusFormatError(f"empty sentence at line {i + 1}")
    return MonolingualCorpus(tuple(vocab.encode(l) for l in lines), vocab)


def spec_from_dict(d: dict) -> SyntheticTaskSpec:
    names = {f.name: f.type for f in dataclasses.fields(SyntheticTaskSpec)}
    unknown = set(d) - set(names)
    if unknown:
        raise ConfigError(f"unknown task keys: {sorted(unknown)}")
    kwargs = {}
    for k, v in d.items():
        default = getattr(SyntheticTaskSpec, k)
        kwargs[k] = type(default)(v)
    return SyntheticTaskSpec(**kwargs)
