from __future__ import annotations

import dataclasses
import hashlib
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import autodiff as ad
from ..corpus import BOS, EOS, PAD, UNK, TokenSeq, Vocabulary, reverse_content
from .networks import NETWORKS, NEG_INF, Memory

KINDS = ("attention", "recurrent", "convolutional")
L2R, R2L = "L2R", "R2L"
MAGIC = b"RSLCKPT1"


class SpecError(ValueError):
    pass


class ContractError(RuntimeError):
    """A caller broke an operation's precondition (e.g. stepping a finished row)."""


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class ArchitectureSpec:
    kind: str
    d_model: int = 32
    layers: int = 2
    heads: int = 2
    kernel: int = 3
    ffn: int = 64
    dropout: float = 0.1
    # After this many content tokens only eos may be emitted; None = unbounded.
    max_target_len: int | None = None

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise SpecError(f"unknown architecture {self.kind!r}")
        if self.d_model <= 0 or self.layers <= 0 or self.ffn <= 0:
            raise SpecError("d_model, layers and ffn must be positive")
        if self.kind == "attention" and (self.heads <= 0 or self.d_model % self.heads):
            raise SpecError(f"head count {self.heads} does not divide d_model {self.d_model}")
        if self.kind == "convolutional" and (self.kernel < 1 or self.kernel % 2 == 0):
            raise SpecError("kernel width must be odd")
        if not 0.0 <= self.dropout < 1.0:
            raise SpecError("dropout must lie in [0, 1)")
        if self.max_target_len is not None and self.max_target_len < 0:
            raise SpecError("max_target_len must be nonnegative")


def default_arch(kind: str, **overrides) -> ArchitectureSpec:
    base = {"attention": dict(layers=2, heads=2, ffn=64),
            "recurrent": dict(layers=1),
            "convolutional": dict(layers=2, kernel=3)}[kind]
    base.update(overrides)
    return ArchitectureSpec(kind=kind, **base)


def derive_rng(*key) -> np.random.Generator:
    """Independent stream keyed by ints and strings (strings are CRC-hashed)."""
    ints = [k if isinstance(k, int) else zlib.crc32(str(k).encode()) for k in key]
    return np.random.default_rng(np.random.SeedSequence(ints))


def pad_batch(seqs: Sequence[Sequence[int]], length: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    length = length or max(len(s) for s in seqs)
    ids = np.full((len(seqs), length), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), length))
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = 1.0
    return ids, mask


@dataclass
class StepState:
    """Incremental decoding state for a batch of rows (internal token order)."""
    owner: int
    memory: Memory
    tokens: np.ndarray                   # (B, t) tokens emitted so far, bos excluded
    hidden: list | None = None           # decoder state after consuming bos + tokens[:, :consumed-1]
    consumed: int = 0
    last: np.ndarray | None = None       # logits produced by the last consumed input

    def __len__(self):
        return self.tokens.shape[0]

    def push(self, tokens: np.ndarray) -> "StepState":
        tok = np.asarray(tokens, dtype=np.int64).reshape(-1, 1)
        return dataclasses.replace(self, tokens=np.concatenate([self.tokens, tok], axis=1))

    def select(self, rows) -> "StepState":
        rows = np.asarray(rows, dtype=np.int64)
        hidden = None if self.hidden is None else [ad.constant(h.value[rows]) for h in self.hidden]
        last = None if self.last is None else self.last[rows]
        return StepState(self.owner, self.memory.select(rows), self.tokens[rows], hidden, self.consumed, last)


class BasicModel:
    """A conditional distribution P(y | x; theta) with a fixed architecture and direction.

    All public methods take and return targets in natural (left-to-right)
    order.  R2L models reverse the content tokens internally.
    """

    def __init__(self, arch: ArchitectureSpec, direction: str, source_vocab: Vocabulary,
                 target_vocab: Vocabulary, params: dict[str, np.ndarray], model_id: int = 0,
                 seed: int = 0):
        arch.validate()
        if direction not in (L2R, R2L):
            raise SpecError(f"unknown direction {direction!r}")
        self.arch = arch
        self.direction = direction
        self.source_vocab = source_vocab
        self.target_vocab = target_vocab
        self.model_id = model_id
        self.seed = seed
        self.net = NETWORKS[arch.kind](arch, len(source_vocab), len(target_vocab))
        expected = self.net.param_shapes()
        if [n for n, _, _ in expected] != list(params):
            raise SpecError("parameter table does not match the architecture")
        for name, shape, _ in expected:
            if params[name].shape != shape:
                raise SpecError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
        self.params: dict[str, ad.Node] = {k: ad.parameter(v) for k, v in params.items()}
        self.training = False
        self.net.drop_rng = derive_rng(seed, model_id, "dropout")
        self._uid = id(self)
        bias = np.zeros(len(target_vocab))
        bias[[PAD, BOS, UNK]] = NEG_INF
        self._vocab_mask = bias

    # -- bookkeeping ----------------------------------------------------
    @property
    def label(self) -> str:
        return f"{self.arch.kind}-{self.direction}-s{self.seed}"

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.value for k, v in self.params.items()}

    def set_parameters(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            self.params[k].value = np.array(v, dtype=np.float64)

    def copy(self, model_id: int | None = None) -> "BasicModel":
        m = BasicModel(self.arch, self.direction, self.source_vocab, self.target_vocab,
                       {k: v.copy() for k, v in self.parameter_arrays().items()},
                       self.model_id if model_id is None else model_id, self.seed)
        return m

    def dropout_mode(self, training: bool) -> None:
        self.training = training
        self.net.dropout = self.arch.dropout if training else 0.0

    def orient(self, y: TokenSeq) -> TokenSeq:
        """Map a natural-order target to the internal factorization order (an involution)."""
        return reverse_content(y) if self.direction == R2L else tuple(y)

    def _check_ids(self, xs, ys):
        sv, tv = len(self.source_vocab), len(self.target_vocab)
        for x in xs:
            if not x or min(x) < 0 or max(x) >= sv:
                raise InputError(f"source ids out of range or empty: {x}")
        for y in ys:
            if not y or y[-1] != EOS:
                raise InputError("targets must end with eos")
            if min(y) < 0 or max(y) >= tv:
                raise InputError(f"target ids out of range: {y}")

    # -- scoring --------------------------------------------------------
    def _output_mask(self, B: int, T: int) -> np.ndarray:
        mask = np.broadcast_to(self._vocab_mask, (B, T, len(self.target_vocab))).copy()
        L = self.arch.max_target_len
        if L is not None and T > L:
            mask[:, L:, :] = NEG_INF
            mask[:, L:, EOS] = 0.0
        return mask

    def _position_mask(self, B: int, positions: np.ndarray) -> np.ndarray:
        mask = np.broadcast_to(self._vocab_mask, (B, len(self.target_vocab))).copy()
        L = self.arch.max_target_len
        if L is not None:
            over = positions >= L
            mask[over, :] = NEG_INF
            mask[over, EOS] = 0.0
        return mask

    def token_log_probs(self, xs: Sequence[TokenSeq], ys: Sequence[TokenSeq]) -> tuple[ad.Node, np.ndarray, np.ndarray]:
        """Teacher-forced log-distributions ``(B, T, V)`` plus internal targets and their mask."""
        self._check_ids(xs, ys)
        src, src_mask = pad_batch(xs)
        tgt, tgt_mask = pad_batch([self.orient(y) for y in ys])
        dec_in = np.concatenate([np.full((len(ys), 1), BOS, dtype=np.int64), tgt[:, :-1]], axis=1)
        mem = self.net.encode(self.params, src, src_mask)
        logits = self.net.decode(self.params, mem, dec_in)
        B, T = tgt.shape
        logp = ad.log_softmax(ad.add(logits, ad.constant(self._output_mask(B, T))))
        return logp, tgt, tgt_mask

    def sequence_log_probs(self, xs: Sequence[TokenSeq], ys: Sequence[TokenSeq]) -> ad.Node:
        """Node of shape ``(B,)`` holding log P(y_b | x_b)."""
        logp, tgt, tmask = self.token_log_probs(xs, ys)
        pick = np.zeros(logp.shape)
        B, T = tgt.shape
        pick[np.arange(B)[:, None], np.arange(T)[None, :], tgt] = tmask
        return ad.sum_(ad.mul(logp, ad.constant(pick)), axis=(1, 2))

    def weighted_nll(self, xs, ys, weights: Sequence[float], normalizer: float | None = None) -> tuple[ad.Node, int]:
        """``-sum_b w_b log P(y_b|x_b) / normalizer`` (default: token count)."""
        logp, tgt, tmask = self.token_log_probs(xs, ys)
        B, T = tgt.shape
        ntok = int(tmask.sum())
        norm = float(normalizer if normalizer is not None else ntok)
        pick = np.zeros(logp.shape)
        w = np.asarray(weights, dtype=np.float64)[:, None] * tmask
        pick[np.arange(B)[:, None], np.arange(T)[None, :], tgt] = w
        return ad.scale(ad.sum_(ad.mul(logp, ad.constant(pick))), -1.0 / norm), ntok

    def log_prob(self, x: TokenSeq, y: TokenSeq) -> float:
        with ad.no_grad():
            return float(self.sequence_log_probs([x], [y]).value[0])

    def log_probs(self, xs, ys, batch: int = 256) -> np.ndarray:
        out = []
        with ad.no_grad():
            for i in range(0, len(xs), batch):
                out.append(self.sequence_log_probs(xs[i:i + batch], ys[i:i + batch]).value)
        return np.concatenate(out) if out else np.zeros(0)

    # -- incremental decoding --------------------------------------------
    def start(self, xs: Sequence[TokenSeq]) -> StepState:
        self._check_ids(xs, [])
        src, src_mask = pad_batch(xs)
        with ad.no_grad():
            mem = self.net.encode(self.params, src, src_mask)
            hidden = self.net.initial_hidden(self.params, mem)
        return StepState(self._uid, mem, np.zeros((len(xs), 0), dtype=np.int64), hidden, 0)

    def step(self, state: StepState) -> tuple[np.ndarray, StepState]:
        """Next-token log-distribution ``(B, V)`` for every row of ``state``."""
        if state.owner != self._uid:
            raise ContractError("state was produced by a different model")
        B, t = state.tokens.shape
        if t and np.any(state.tokens[:, -1] == EOS):
            raise ContractError("cannot step a row that already emitted eos")
        with ad.no_grad():
            hidden, last = state.hidden, state.last
            # fold in inputs (bos, then emitted tokens) not yet consumed
            for pos in range(state.consumed, t + 1):
                inp = np.full(B, BOS, dtype=np.int64) if pos == 0 else state.tokens[:, pos - 1]
                logits, hidden = self.net.decode_step(self.params, state.memory, hidden, inp, pos)
                last = logits.value[:, -1, :]
            state = dataclasses.replace(state, hidden=hidden, consumed=t + 1, last=last)
        z = last + self._position_mask(B, np.full(B, t))
        return ad._log_softmax(z), state


# ---------------------------------------------------------------------------


def init_model(arch: ArchitectureSpec, direction: str, source_vocab: Vocabulary,
               target_vocab: Vocabulary, seed: int = 0, model_id: int = 0) -> BasicModel:
    """Fresh model; parameters are a pure function of ``(arch, vocab sizes, seed)``."""
    arch.validate()
    net = NETWORKS[arch.kind](arch, len(source_vocab), len(target_vocab))
    params = net.init_params(derive_rng(seed, "init", arch.kind))
    return BasicModel(arch, direction, source_vocab, target_vocab, params, model_id, seed)


@dataclass
class Checkpoint:
    model: BasicModel
    optimizer: dict | None = None
    epoch: int = 0
    score: float | None = None
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, model: BasicModel, optimizer: dict | None = None, epoch: int = 0,
                    score: float | None = None, meta: dict | None = None) -> None:
    """Write ``RSLCKPT1``, a one-line JSON preamble, then little-endian float64 data.

    The preamble carries a SHA-256 of the data block, checked on load.

    ``optimizer`` (optional) is ``{"step": int, "m": {...}, "v": {...}}`` keyed
    like the model parameters.
    """
    blocks: list[tuple[str, np.ndarray]] = list(model.parameter_arrays().items())
    opt_meta = None
    if optimizer is not None:
        opt_meta = {"step": int(optimizer["step"])}
        blocks += [(f"opt.m/{k}", optimizer["m"][k]) for k in model.params]
        blocks += [(f"opt.v/{k}", optimizer["v"][k]) for k in model.params]
    payload = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in blocks)
    preamble = {
        "arch": dataclasses.asdict(model.arch),
        "direction": model.direction,
        "model_id": model.model_id,
        "seed": model.seed,
        "source_vocab": list(model.source_vocab.tokens),
        "target_vocab": list(model.target_vocab.tokens),
        "vocab_sizes": [len(model.source_vocab), len(model.target_vocab)],
        "params": [[name, list(arr.shape)] for name, arr in blocks],
        "optimizer": opt_meta,
        "epoch": epoch,
        "score": score,
        "meta": meta or {},
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC + b"\n")
        fh.write(json.dumps(preamble, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(payload)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.readline().rstrip(b"\n") != MAGIC:
            raise CheckpointError(f"{path}: bad magic header")
        try:
            pre = json.loads(fh.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise CheckpointError(f"{path}: unreadable preamble") from None
        data = fh.read()
    if "sha256" in pre and hashlib.sha256(data).hexdigest() != pre["sha256"]:
        raise CheckpointError(f"{path}: parameter data fails its checksum")
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in pre["params"]:
        n = int(np.prod(shape)) if shape else 1
        chunk = data[offset: offset + 8 * n]
        if len(chunk) != 8 * n:
            raise CheckpointError(f"{path}: truncated data at {name}")
        arrays[name] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
        offset += 8 * n
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    arch = ArchitectureSpec(**pre["arch"])
    params = {k: v for k, v in arrays.items() if not k.startswith("opt.")}
    model = BasicModel(arch, pre["direction"], Vocabulary(tuple(pre["source_vocab"])),
                       Vocabulary(tuple(pre["target_vocab"])), params, pre["model_id"], pre["seed"])
    opt = None
    if pre.get("optimizer") is not None:
        opt = {"step": pre["optimizer"]["step"],
               "m": {k[6:]: v for k, v in arrays.items() if k.startswith("opt.m/")},
               "v": {k[6:]: v for k, v in arrays.items() if k.startswith("opt.v/")}}
    return Checkpoint(model, opt, pre.get("epoch", 0), pre.get("score"), pre.get("meta", {}))


def sample_batch(model: BasicModel, xs: Sequence[TokenSeq], max_len: int, temperature: float,
                 rng: np.random.Generator) -> list[tuple[TokenSeq, bool]]:
    """Ancestral samples, one per source; returns ``(target, truncated)`` pairs.

    Rows that reach ``max_len`` content tokens without eos get eos appended and
    are flagged as truncated.
    """
    if max_len < 1 or temperature <= 0:
        raise ValueError("need max_len >= 1 and temperature > 0")
    n = len(xs)
    out: list = [None] * n
    state = model.start(xs)
    rows = np.arange(n)
    for t in range(max_len):
        logp, state = model.step(state)
        p = np.exp(ad._log_softmax(logp / temperature))
        cdf = np.cumsum(p, axis=1)
        u = rng.random(len(rows)) * cdf[:, -1]
        tok = np.minimum((cdf <= u[:, None]).sum(axis=1), p.shape[1] - 1)
        state = state.push(tok)
        done = tok == EOS
        for r in np.flatnonzero(done):
            out[rows[r]] = (model.orient(tuple(int(v) for v in state.tokens[r])), False)
        if done.all():
            return out
        if done.any():
            keep = np.flatnonzero(~done)
            state, rows = state.select(keep), rows[keep]
    for r in range(len(rows)):
        seq = tuple(int(v) for v in state.tokens[r]) + (EOS,)
        out[rows[r]] = (model.orient(seq), True)
    return out


def sample(model: BasicModel, x: TokenSeq, max_len: int, temperature: float,
           rng: np.random.Generator) -> TokenSeq:
    return sample_batch(model, [x], max_len, temperature, rng)[0][0]
