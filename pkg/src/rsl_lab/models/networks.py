"""Encoder-decoder networks built from autodiff primitives.

Every network maps padded id batches to next-token logits.  Shapes:
sources ``(B, S)``, decoder inputs ``(B, T)``, logits ``(B, T, V)``.  Pad
positions of the source are excluded from attention with an additive
``-1e9`` mask; the convolutional encoder also zeroes them so results never
depend on how much padding a batch carries.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .. import autodiff as ad

NEG_INF = -1e9


@dataclass
class Memory:
    """Encoder output for a batch, reused at every decoding step."""
    enc: ad.Node                 # (B, S, D)
    key_mask: np.ndarray         # (B, S) additive mask, 0 or NEG_INF
    src_mask: np.ndarray         # (B, S) 1.0 for real tokens
    extra: dict

    def select(self, rows: np.ndarray) -> "Memory":
        return Memory(ad.constant(self.enc.value[rows]), self.key_mask[rows], self.src_mask[rows],
                      {k: ad.constant(v.value[rows]) for k, v in self.extra.items()})


def sinusoid(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _glorot(rng, fan_in, fan_out):
    s = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(fan_in, fan_out))


class Network:
    """Shared parameter helpers; subclasses define the topology."""

    def __init__(self, arch, src_vocab_size: int, tgt_vocab_size: int):
        self.arch = arch
        self.d = arch.d_model
        self.sv = src_vocab_size
        self.tv = tgt_vocab_size
        self.dropout = 0.0
        self.drop_rng: np.random.Generator | None = None

    # -- parameters ------------------------------------------------------
    def param_shapes(self) -> list[tuple[str, tuple[int, ...], str]]:
        raise NotImplementedError

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        out = {}
        for name, shape, kind in self.param_shapes():
            if kind == "embed":
                out[name] = rng.normal(0.0, self.d ** -0.5, size=shape)
            elif kind == "matrix":
                out[name] = _glorot(rng, *shape)
            elif kind == "ones":
                out[name] = np.ones(shape)
            else:
                out[name] = np.zeros(shape)
        return out

    # -- helpers ---------------------------------------------------------
    def drop(self, x: ad.Node) -> ad.Node:
        if self.dropout <= 0.0 or self.drop_rng is None:
            return x
        keep = 1.0 - self.dropout
        mask = (self.drop_rng.random(x.shape) < keep) / keep
        return ad.mul(x, ad.constant(mask))

    @staticmethod
    def linear(P, name: str, x: ad.Node) -> ad.Node:
        return ad.add(ad.matmul(x, P[name + ".w"]), P[name + ".b"])

    def embed(self, P, table: str, ids: np.ndarray, positional: bool) -> ad.Node:
        e = ad.scale(ad.embedding_gather(P[table], ids), math.sqrt(self.d))
        if positional:
            pe = sinusoid(ids.shape[1], self.d)
            e = ad.add(e, ad.constant(np.broadcast_to(pe, e.shape)))
        return e

    def embed_at(self, P, table: str, ids: np.ndarray, pos: int) -> ad.Node:
        """Embedding of one token per row at decoder position ``pos``; ``(B, 1, D)``."""
        e = ad.scale(ad.embedding_gather(P[table], ids[:, None]), math.sqrt(self.d))
        return ad.add(e, ad.constant(np.broadcast_to(sinusoid(pos + 1, self.d)[pos], e.shape)))

    def project(self, P, h: ad.Node) -> ad.Node:
        return self.linear(P, "out", h)

    def attention(self, q: ad.Node, k: ad.Node, v: ad.Node, mask: np.ndarray) -> ad.Node:
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
        scores = ad.add(scores, ad.constant(mask))
        return ad.matmul(ad.softmax(scores), v)

    # -- interface -------------------------------------------------------
    def encode(self, P, src: np.ndarray, src_mask: np.ndarray) -> Memory:
        raise NotImplementedError

    def decode(self, P, mem: Memory, dec_in: np.ndarray) -> ad.Node:
        """Teacher-forced logits for every position of ``dec_in``."""
        raise NotImplementedError

    def initial_hidden(self, P, mem: Memory) -> list[ad.Node]:
        """Per-row decoder state before bos; every entry has the batch on axis 0."""
        raise NotImplementedError

    def decode_step(self, P, mem: Memory, hidden: list[ad.Node], token_ids: np.ndarray,
                    pos: int) -> tuple[ad.Node, list[ad.Node]]:
        """Consume the input token at position ``pos``; returns ``(logits (B,1,V), hidden)``.

        Matches column ``pos`` of :meth:`decode` on the same prefix.
        """
        raise NotImplementedError


def _key_mask(src_mask: np.ndarray) -> np.ndarray:
    return np.where(src_mask > 0, 0.0, NEG_INF)


class AttentionNet(Network):
    """Pre-norm Transformer encoder-decoder."""

    def param_shapes(self):
        d, f, a = self.d, self.arch.ffn, self.arch
        shapes = [("src_embed", (self.sv, d), "embed"), ("tgt_embed", (self.tv, d), "embed")]

        def ln(prefix):
            return [(prefix + ".g", (d,), "ones"), (prefix + ".b", (d,), "zeros")]

        def lin(prefix, i, o):
            return [(prefix + ".w", (i, o), "matrix"), (prefix + ".b", (o,), "zeros")]

        for l in range(a.layers):
            p = f"enc{l}"
            shapes += ln(p + ".ln1") + lin(p + ".qkv", d, 3 * d) + lin(p + ".o", d, d)
            shapes += ln(p + ".ln2") + lin(p + ".ff1", d, f) + lin(p + ".ff2", f, d)
        shapes += ln("enc.ln")
        for l in range(a.layers):
            p = f"dec{l}"
            shapes += ln(p + ".ln1") + lin(p + ".qkv", d, 3 * d) + lin(p + ".o", d, d)
            shapes += ln(p + ".ln2") + lin(p + ".q", d, d) + lin(p + ".kv", d, 2 * d) + lin(p + ".co", d, d)
            shapes += ln(p + ".ln3") + lin(p + ".ff1", d, f) + lin(p + ".ff2", f, d)
        shapes += ln("dec.ln") + lin("out", d, self.tv)
        return shapes

    def _ln(self, P, name, x):
        return ad.layer_norm(x, P[name + ".g"], P[name + ".b"])

    def _heads(self, q, k, v, mask):
        h = self.arch.heads
        dh = self.d // h
        outs = []
        for i in range(h):
            sl = (Ellipsis, slice(i * dh, (i + 1) * dh))
            outs.append(self.attention(ad.slice_(q, sl), ad.slice_(k, sl), ad.slice_(v, sl), mask))
        return outs[0] if h == 1 else ad.concat(outs, axis=-1)

    def _self_attn(self, P, p, x, mask):
        d = self.d
        qkv = self.linear(P, p + ".qkv", x)
        q = ad.slice_(qkv, (Ellipsis, slice(0, d)))
        k = ad.slice_(qkv, (Ellipsis, slice(d, 2 * d)))
        v = ad.slice_(qkv, (Ellipsis, slice(2 * d, 3 * d)))
        return self.linear(P, p + ".o", self._heads(q, k, v, mask))

    def _ffn(self, P, p, x):
        return self.linear(P, p + ".ff2", self.drop(ad.relu(self.linear(P, p + ".ff1", x))))

    def encode(self, P, src, src_mask):
        B, S = src.shape
        km = _key_mask(src_mask)
        mask = np.broadcast_to(km[:, None, :], (B, S, S))
        h = self.drop(self.embed(P, "src_embed", src, positional=True))
        for l in range(self.arch.layers):
            p = f"enc{l}"
            h = ad.add(h, self.drop(self._self_attn(P, p, self._ln(P, p + ".ln1", h), mask)))
            h = ad.add(h, self.drop(self._ffn(P, p, self._ln(P, p + ".ln2", h))))
        return Memory(self._ln(P, "enc.ln", h), km, src_mask, {})

    def decode(self, P, mem, dec_in):
        B, T = dec_in.shape
        S = mem.enc.shape[1]
        causal = np.triu(np.full((T, T), NEG_INF), k=1)
        self_mask = np.broadcast_to(causal, (B, T, T))
        cross_mask = np.broadcast_to(mem.key_mask[:, None, :], (B, T, S))
        d = self.d
        h = self.drop(self.embed(P, "tgt_embed", dec_in, positional=True))
        for l in range(self.arch.layers):
            p = f"dec{l}"
            h = ad.add(h, self.drop(self._self_attn(P, p, self._ln(P, p + ".ln1", h), self_mask)))
            q = self.linear(P, p + ".q", self._ln(P, p + ".ln2", h))
            kv = self.linear(P, p + ".kv", mem.enc)
            k = ad.slice_(kv, (Ellipsis, slice(0, d)))
            v = ad.slice_(kv, (Ellipsis, slice(d, 2 * d)))
            h = ad.add(h, self.drop(self.linear(P, p + ".co", self._heads(q, k, v, cross_mask))))
            h = ad.add(h, self.drop(self._ffn(P, p, self._ln(P, p + ".ln3", h))))
        return self.project(P, self._ln(P, "dec.ln", h))

    # hidden: per layer [self K, self V, cross K, cross V]
    def initial_hidden(self, P, mem):
        B, d = mem.enc.shape[0], self.d
        out = []
        for l in range(self.arch.layers):
            kv = self.linear(P, f"dec{l}.kv", mem.enc)
            empty = ad.constant(np.zeros((B, 0, d)))
            out += [empty, empty, ad.slice_(kv, (Ellipsis, slice(0, d))), ad.slice_(kv, (Ellipsis, slice(d, 2 * d)))]
        return out

    def decode_step(self, P, mem, hidden, token_ids, pos):
        B, d = len(token_ids), self.d
        cross_mask = mem.key_mask[:, None, :]
        h = self.drop(self.embed_at(P, "tgt_embed", token_ids, pos))
        new = []
        for l in range(self.arch.layers):
            p = f"dec{l}"
            sk, sv, ck, cv = hidden[4 * l: 4 * l + 4]
            qkv = self.linear(P, p + ".qkv", self._ln(P, p + ".ln1", h))
            q = ad.slice_(qkv, (Ellipsis, slice(0, d)))
            sk = ad.concat([sk, ad.slice_(qkv, (Ellipsis, slice(d, 2 * d)))], axis=1)
            sv = ad.concat([sv, ad.slice_(qkv, (Ellipsis, slice(2 * d, 3 * d)))], axis=1)
            att = self._heads(q, sk, sv, np.zeros((B, 1, pos + 1)))
            h = ad.add(h, self.drop(self.linear(P, p + ".o", att)))
            q = self.linear(P, p + ".q", self._ln(P, p + ".ln2", h))
            h = ad.add(h, self.drop(self.linear(P, p + ".co", self._heads(q, ck, cv, cross_mask))))
            h = ad.add(h, self.drop(self._ffn(P, p, self._ln(P, p + ".ln3", h))))
            new += [sk, sv, ck, cv]
        return self.project(P, self._ln(P, "dec.ln", h)), new


class RecurrentNet(Network):
    """GRU encoder/decoder with dot-product attention over encoder states."""

    def param_shapes(self):
        d = self.d
        shapes = [("src_embed", (self.sv, d), "embed"), ("tgt_embed", (self.tv, d), "embed")]
        for side in ("enc", "dec"):
            for l in range(self.arch.layers):
                p = f"{side}{l}"
                shapes += [(p + ".x.w", (d, 3 * d), "matrix"), (p + ".x.b", (3 * d,), "zeros"),
                           (p + ".h.w", (d, 3 * d), "matrix"), (p + ".h.b", (3 * d,), "zeros")]
        shapes += [("init.w", (d, d * self.arch.layers), "matrix"), ("init.b", (d * self.arch.layers,), "zeros"),
                   ("comb.w", (2 * d, d), "matrix"), ("comb.b", (d,), "zeros"),
                   ("out.w", (d, self.tv), "matrix"), ("out.b", (self.tv,), "zeros")]
        return shapes

    def _cell(self, P, p, xp: ad.Node, h: ad.Node) -> ad.Node:
        """One GRU update; ``xp`` is the precomputed input projection (B, 1, 3D)."""
        d = self.d
        hp = self.linear(P, p + ".h", h)
        rz = ad.sigmoid(ad.add(ad.slice_(xp, (Ellipsis, slice(0, 2 * d))),
                               ad.slice_(hp, (Ellipsis, slice(0, 2 * d)))))
        r = ad.slice_(rz, (Ellipsis, slice(0, d)))
        z = ad.slice_(rz, (Ellipsis, slice(d, 2 * d)))
        n = ad.tanh(ad.add(ad.slice_(xp, (Ellipsis, slice(2 * d, 3 * d))),
                           ad.mul(r, ad.slice_(hp, (Ellipsis, slice(2 * d, 3 * d))))))
        return ad.add(n, ad.mul(z, ad.add(h, ad.neg(n))))

    def _run(self, P, side: str, x: ad.Node, hs: list[ad.Node]) -> tuple[ad.Node, list[ad.Node]]:
        T = x.shape[1]
        hs = list(hs)
        for l in range(self.arch.layers):
            p = f"{side}{l}"
            xp = self.linear(P, p + ".x", x)
            outs = []
            h = hs[l]
            for t in range(T):
                h = self._cell(P, p, ad.slice_(xp, (slice(None), slice(t, t + 1))), h)
                outs.append(h)
            hs[l] = h
            x = outs[0] if T == 1 else ad.concat(outs, axis=1)
            if l + 1 < self.arch.layers:
                x = self.drop(x)
        return x, hs

    def encode(self, P, src, src_mask):
        B, S = src.shape
        zeros = ad.constant(np.zeros((B, 1, self.d)))
        x = self.drop(self.embed(P, "src_embed", src, positional=False))
        enc, _ = self._run(P, "enc", x, [zeros] * self.arch.layers)
        weights = src_mask / src_mask.sum(axis=1, keepdims=True)
        pooled = ad.matmul(ad.constant(weights[:, None, :]), enc)            # (B, 1, D)
        init = ad.tanh(self.linear(P, "init", pooled))
        d = self.d
        hs = {f"h{l}": ad.slice_(init, (Ellipsis, slice(l * d, (l + 1) * d))) for l in range(self.arch.layers)}
        return Memory(enc, _key_mask(src_mask), src_mask, hs)

    def _readout(self, P, mem: Memory, dec: ad.Node) -> ad.Node:
        B, T = dec.shape[:2]
        mask = np.broadcast_to(mem.key_mask[:, None, :], (B, T, mem.enc.shape[1]))
        ctx = self.attention(dec, mem.enc, mem.enc, mask)
        h = ad.tanh(self.linear(P, "comb", ad.concat([dec, ctx], axis=-1)))
        return self.project(P, self.drop(h))

    def initial_hidden(self, P, mem: Memory) -> list[ad.Node]:
        return [mem.extra[f"h{l}"] for l in range(self.arch.layers)]

    def decode(self, P, mem, dec_in):
        x = self.drop(self.embed(P, "tgt_embed", dec_in, positional=False))
        dec, _ = self._run(P, "dec", x, self.initial_hidden(P, mem))
        return self._readout(P, mem, dec)

    def decode_step(self, P, mem, hs, token_ids, pos):
        x = self.drop(self.embed(P, "tgt_embed", token_ids[:, None], positional=False))
        dec, hs = self._run(P, "dec", x, hs)
        return self._readout(P, mem, dec), hs


class ConvNet(Network):
    """Convolutional encoder-decoder with GLU blocks and per-layer decoder attention."""

    def param_shapes(self):
        d, k = self.d, self.arch.kernel
        shapes = [("src_embed", (self.sv, d), "embed"), ("tgt_embed", (self.tv, d), "embed")]
        for l in range(self.arch.layers):
            shapes += [(f"enc{l}.conv.w", (k * d, 2 * d), "matrix"), (f"enc{l}.conv.b", (2 * d,), "zeros")]
        for l in range(self.arch.layers):
            p = f"dec{l}"
            shapes += [(p + ".conv.w", (k * d, 2 * d), "matrix"), (p + ".conv.b", (2 * d,), "zeros"),
                       (p + ".q.w", (d, d), "matrix"), (p + ".q.b", (d,), "zeros"),
                       (p + ".c.w", (d, d), "matrix"), (p + ".c.b", (d,), "zeros")]
        shapes += [("out.w", (d, self.tv), "matrix"), ("out.b", (self.tv,), "zeros")]
        return shapes

    def _conv(self, P, name, h: ad.Node, left: int, right: int) -> ad.Node:
        B, T, d = h.shape
        k = self.arch.kernel
        parts = []
        if left:
            parts.append(ad.constant(np.zeros((B, left, d))))
        parts.append(h)
        if right:
            parts.append(ad.constant(np.zeros((B, right, d))))
        padded = ad.concat(parts, axis=1) if len(parts) > 1 else h
        windows = ad.concat([ad.slice_(padded, (slice(None), slice(i, i + T))) for i in range(k)], axis=-1)
        return ad.glu(self.linear(P, name, windows))

    def encode(self, P, src, src_mask):
        B, S = src.shape
        keep = ad.constant(np.broadcast_to(src_mask[:, :, None], (B, S, self.d)))
        h = ad.mul(self.drop(self.embed(P, "src_embed", src, positional=True)), keep)
        half = self.arch.kernel // 2
        for l in range(self.arch.layers):
            c = self._conv(P, f"enc{l}.conv", self.drop(h), half, half)
            h = ad.mul(ad.scale(ad.add(h, c), math.sqrt(0.5)), keep)
        return Memory(h, _key_mask(src_mask), src_mask, {})

    def decode(self, P, mem, dec_in):
        B, T = dec_in.shape
        mask = np.broadcast_to(mem.key_mask[:, None, :], (B, T, mem.enc.shape[1]))
        h = self.drop(self.embed(P, "tgt_embed", dec_in, positional=True))
        for l in range(self.arch.layers):
            p = f"dec{l}"
            c = self._conv(P, p + ".conv", self.drop(h), self.arch.kernel - 1, 0)
            h = ad.scale(ad.add(h, c), math.sqrt(0.5))
            ctx = self.attention(self.linear(P, p + ".q", h), mem.enc, mem.enc, mask)
            h = ad.scale(ad.add(h, self.linear(P, p + ".c", ctx)), math.sqrt(0.5))
        return self.project(P, self.drop(h))

    # hidden: per layer, the last ``kernel - 1`` inputs to its convolution
    def initial_hidden(self, P, mem):
        B = mem.enc.shape[0]
        return [ad.constant(np.zeros((B, self.arch.kernel - 1, self.d)))] * self.arch.layers

    def decode_step(self, P, mem, hidden, token_ids, pos):
        k = self.arch.kernel
        mask = mem.key_mask[:, None, :]
        h = self.drop(self.embed_at(P, "tgt_embed", token_ids, pos))
        new = []
        for l in range(self.arch.layers):
            p = f"dec{l}"
            seq = ad.concat([hidden[l], self.drop(h)], axis=1)                  # (B, k, D)
            window = ad.concat([ad.slice_(seq, (slice(None), slice(i, i + 1))) for i in range(k)], axis=-1)
            c = ad.glu(self.linear(P, p + ".conv", window))
            new.append(ad.slice_(seq, (slice(None), slice(1, k))))
            h = ad.scale(ad.add(h, c), math.sqrt(0.5))
            ctx = self.attention(self.linear(P, p + ".q", h), mem.enc, mem.enc, mask)
            h = ad.scale(ad.add(h, self.linear(P, p + ".c", ctx)), math.sqrt(0.5))
        return self.project(P, self.drop(h)), new


NETWORKS: dict[str, Callable[..., Network]] = {
    "attention": AttentionNet,
    "recurrent": RecurrentNet,
    "convolutional": ConvNet,
}
