"""Shared builders for the test suite (imported by conftest and test modules)."""
import numpy as np

from rsl_lab import autodiff as ad
from rsl_lab.corpus import Vocabulary
from rsl_lab.models import default_arch, init_model

# Tiny enumeration setup: three content target tokens plus eos, at most three
# content tokens per sequence (40 sequences in total).
TINY_SRC = Vocabulary.from_tokens(f"s{i}" for i in range(4))
TINY_TGT = Vocabulary.from_tokens(f"t{i}" for i in range(3))
TINY_X = (4, 5, 6)
TINY_LMAX = 3


def tiny_model(kind="recurrent", direction="L2R", seed=3, **over):
    arch = default_arch(kind, **{"d_model": 8, "ffn": 16, "dropout": 0.0, "max_target_len": TINY_LMAX, **over})
    return init_model(arch, direction, TINY_SRC, TINY_TGT, seed=seed)


def max_rel_err(a: dict, b: dict, floor: float = 1e-8) -> float:
    """Largest coordinate-wise ``|a - b| / max(|b|, floor)`` over named arrays."""
    return max(float(np.max(np.abs(a[k] - b[k]) / np.maximum(np.abs(b[k]), floor))) for k in b)


def _probe(shape, seed):
    return np.random.default_rng(seed).normal(size=shape)


def _contract(node, seed=99):
    """Scalar ``sum(node * R)`` with a fixed random ``R`` so every output entry matters."""
    return ad.sum_(ad.mul(node, ad.constant(_probe(node.shape, seed))))


def primitive_cases():
    """``(name, f, x0)`` triples covering every primitive and every differentiable input."""
    g = np.random.default_rng(7)
    A, B = g.normal(size=(3, 4)), g.normal(size=(4, 2))
    X3 = g.normal(size=(2, 3, 4))
    gain, bias = g.normal(size=4), g.normal(size=4)
    table = g.normal(size=(5, 3))
    ids = np.array([[0, 2, 2], [4, 1, 0]])
    c = ad.constant
    cases = [
        ("matmul/a", lambda p: _contract(ad.matmul(p, c(B))), A),
        ("matmul/b", lambda p: _contract(ad.matmul(c(A), p)), B),
        ("matmul/batched", lambda p: _contract(ad.matmul(p, c(np.ones((4, 3)) * 0.3))), X3),
        ("add/broadcast", lambda p: _contract(ad.add(c(X3), p)), gain),
        ("add", lambda p: _contract(ad.add(p, c(X3))), X3),
        ("mul", lambda p: _contract(ad.mul(p, c(X3))), X3),
        ("neg", lambda p: _contract(ad.neg(p)), A),
        ("scale", lambda p: _contract(ad.scale(p, -1.7)), A),
        ("concat", lambda p: _contract(ad.concat([p, ad.scale(p, 2.0), c(A)], axis=0)), A),
        ("slice", lambda p: _contract(ad.slice_(p, (slice(None), slice(1, 3)))), X3),
        ("transpose", lambda p: _contract(ad.transpose(p)), X3),
        ("embedding_gather", lambda p: _contract(ad.embedding_gather(p, ids)), table),
        ("tanh", lambda p: _contract(ad.tanh(p)), X3),
        ("sigmoid", lambda p: _contract(ad.sigmoid(p)), X3),
        ("relu", lambda p: _contract(ad.relu(p)), X3 + 0.05 * np.sign(X3)),
        ("glu", lambda p: _contract(ad.glu(p)), X3),
        ("layer_norm/x", lambda p: _contract(ad.layer_norm(p, c(gain), c(bias))), X3),
        ("layer_norm/gain", lambda p: _contract(ad.layer_norm(c(X3), p, c(bias))), gain),
        ("layer_norm/bias", lambda p: _contract(ad.layer_norm(c(X3), c(gain), p)), bias),
        ("softmax", lambda p: _contract(ad.softmax(p)), X3),
        ("log_softmax", lambda p: _contract(ad.log_softmax(p)), X3),
        ("sum/all", lambda p: ad.sum_(ad.mul(p, p)), X3),
        ("sum/axis", lambda p: _contract(ad.sum_(p, axis=1)), X3),
        ("mean/axis", lambda p: _contract(ad.mean(p, axis=-1, keepdims=True)), X3),
        ("mean/all", lambda p: ad.mean(ad.mul(p, p)), A),
    ]
    return cases


def nll_case():
    """Per-token NLL of a 2-token target under a tiny Transformer, as a function of one matrix."""
    m = tiny_model("attention", seed=5)
    name = "dec0.qkv.w"
    x0 = m.params[name].value.copy()

    def f(p):
        saved = m.params[name]
        m.params[name] = p
        try:
            loss, _ = m.weighted_nll([TINY_X], [(5, 6, 2)], [1.0])
        finally:
            m.params[name] = saved
        return loss

    return f, x0


# Acceptance verdicts, printed by the terminal-summary hook in conftest.
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def verdict(n: int, ok: bool, detail: str) -> None:
    ok = bool(ok)
    prev_ok, prev = ACCEPTANCE.get(n, (True, ""))
    ACCEPTANCE[n] = (prev_ok and ok, f"{prev}; {detail}" if prev else detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
