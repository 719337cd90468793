"""Decoder-only transformer over interleaved shadow tokens, in numpy.

Input layout for a record with Hamiltonian parameters g and tokens
(P_1, b_1, ..., P_N, b_N)::

    position   0        1     2     ...  2N-1   2N
    content    enc(g)   P_1   b_1   ...  P_N    b_N

Position 0 carries the g-encoder output with no positional encoding; token
slot t (position t+1) carries ``tok_emb[token] + pos_emb[t]``.  Blocks are
pre-norm (LN -> causal MHA -> residual, LN -> GELU MLP -> residual).  The
outputs at the P_i positions (1, 3, ..., 2N-1) go through a final LN and a
two-layer head giving logits over b_i in (+1, -1).

The b_N slot is never attended to by a read-out position, so training and
sampling run on the first 2N positions only; results are identical.

Gradients are hand-derived; ``loss_and_grad`` is checked against finite
differences in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..dataset import VOCAB_SIZE

LN_EPS = 1e-5
INIT_STD = 0.02
_GELU_C = math.sqrt(2.0 / math.pi)


class NumericalError(FloatingPointError):
    """Non-finite activation or gradient."""


@dataclass(frozen=True)
class ModelConfig:
    n_qubits: int
    param_dim: int
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 8
    d_ff: int = 512
    vocab_size: int = VOCAB_SIZE
    dtype: str = "float64"

    def __post_init__(self):
        for name in ("n_qubits", "param_dim", "d_model", "n_layers", "n_heads", "d_ff", "vocab_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype}")

    @property
    def max_seq(self) -> int:
        return 2 * self.n_qubits + 1

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Parameter names and shapes in declared (checkpoint) order."""
    d, f = cfg.d_model, cfg.d_ff
    shapes = {
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (2 * cfg.n_qubits, d),
        "g_w1": (cfg.param_dim, d),
        "g_b1": (d,),
        "g_w2": (d, d),
        "g_b2": (d,),
    }
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        shapes.update({
            p + "ln1_g": (d,), p + "ln1_b": (d,),
            p + "w_qkv": (d, 3 * d), p + "b_qkv": (3 * d,),
            p + "w_o": (d, d), p + "b_o": (d,),
            p + "ln2_g": (d,), p + "ln2_b": (d,),
            p + "w_ff1": (d, f), p + "b_ff1": (f,),
            p + "w_ff2": (f, d), p + "b_ff2": (d,),
        })
    shapes.update({
        "lnf_g": (d,), "lnf_b": (d,),
        "head_w1": (d, d), "head_b1": (d,),
        "head_w2": (d, 2), "head_b2": (2,),
    })
    return shapes


def decayed(name: str) -> bool:
    """Weight decay applies to matrices (projections and embeddings)."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf.startswith("w") or leaf.endswith("_emb") or leaf in ("g_w1", "g_w2", "head_w1", "head_w2")


def _trunc_normal(rng, shape, std):
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g") and leaf.startswith("ln"):
            value = np.ones(shape)
        elif len(shape) == 1:
            value = np.zeros(shape)
        else:
            value = _trunc_normal(rng, shape, INIT_STD)
        params[name] = value.astype(cfg.dtype)
    return params


def check_params(cfg: ModelConfig, params: dict) -> None:
    shapes = param_shapes(cfg)
    if list(params) != list(shapes):
        raise ValueError("parameter names do not match the configuration")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise ValueError(f"{name}: shape {params[name].shape}, expected {shape}")
        if not np.all(np.isfinite(params[name])):
            raise NumericalError(f"{name} contains non-finite values")


# ------------------------------------------------------------------ primitives


def _gelu(x):
    """tanh-approximate GELU; returns (output, tanh term) for the backward pass."""
    t = x * x
    t *= 0.044715 * _GELU_C
    t += _GELU_C
    t *= x
    np.tanh(t, out=t)
    y = t + 1.0
    y *= x
    y *= 0.5
    return y, t


def _gelu_grad(x, t):
    # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) C (1 + 3 * 0.044715 x^2)
    inner = x * x
    inner *= 3 * 0.044715 * _GELU_C
    inner += _GELU_C
    inner *= x
    sech2 = t * t
    np.subtract(1.0, sech2, out=sech2)
    inner *= sech2
    inner += 1.0
    inner += t
    inner *= 0.5
    return inner


def _ln(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _ln_back(dy, g, cache):
    xhat, inv = cache
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    axes = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axes), dy.sum(axes)


def _mm(x, w):
    # 2-D GEMM; stacked matmul would loop over the leading axes
    return (x.reshape(-1, x.shape[-1]) @ w).reshape(*x.shape[:-1], w.shape[-1])


def _linear_back(dy, x, w):
    d2 = dy.reshape(-1, dy.shape[-1])
    return _mm(dy, w.T), x.reshape(-1, x.shape[-1]).T @ d2, d2.sum(0)


def _causal_mask(t: int) -> np.ndarray:
    return np.triu(np.ones((t, t), dtype=bool), k=1)


# ------------------------------------------------------------------ forward


def _prepare(cfg: ModelConfig, g, tokens):
    g = np.asarray(g, dtype=cfg.dtype)
    if g.ndim == 1:
        g = g[:, None] if cfg.param_dim == 1 else g[None, :]
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if g.shape[-1] != cfg.param_dim:
        raise ValueError(f"parameter vector has dimension {g.shape[-1]}, model expects {cfg.param_dim}")
    if g.shape[0] == 1 and tokens.shape[0] > 1:
        g = np.repeat(g, tokens.shape[0], axis=0)
    if g.shape[0] != tokens.shape[0]:
        raise ValueError("batch sizes of g and tokens differ")
    if tokens.shape[1] > 2 * cfg.n_qubits:
        raise ValueError(f"at most {2 * cfg.n_qubits} tokens per record")
    return g, tokens.astype(np.intp)


def embed(params, cfg: ModelConfig, g, tokens) -> np.ndarray:
    """(B, 1 + T, d) input sequence for T tokens."""
    return _embed(params, cfg, *_prepare(cfg, g, tokens))[0]


def _embed(params, cfg, g, tokens):
    e1 = g @ params["g_w1"] + params["g_b1"]
    eu, et = _gelu(e1)
    e0 = eu @ params["g_w2"] + params["g_b2"]
    t = tokens.shape[1]
    x = np.empty((g.shape[0], t + 1, cfg.d_model), dtype=e0.dtype)
    x[:, 0] = e0
    x[:, 1:] = params["tok_emb"][tokens] + params["pos_emb"][:t]
    return x, (g, e1, eu, et)


def _block(params, cfg, l, x, keep):
    p = f"layers.{l}."
    b, t, d = x.shape
    h, dh = cfg.n_heads, cfg.head_dim
    a, ln1 = _ln(x, params[p + "ln1_g"], params[p + "ln1_b"])
    qkv = _mm(a, params[p + "w_qkv"]) + params[p + "b_qkv"]
    q, k, v = qkv.reshape(b, t, 3, h, dh).transpose(2, 0, 3, 1, 4)
    s = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    s = np.where(_causal_mask(t), -np.inf, s)
    s = s - s.max(-1, keepdims=True)
    pr = np.exp(s)
    pr /= pr.sum(-1, keepdims=True)
    y = (pr @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
    x2 = x + _mm(y, params[p + "w_o"]) + params[p + "b_o"]
    c, ln2 = _ln(x2, params[p + "ln2_g"], params[p + "ln2_b"])
    f1 = _mm(c, params[p + "w_ff1"]) + params[p + "b_ff1"]
    u, ut = _gelu(f1)
    x3 = x2 + _mm(u, params[p + "w_ff2"]) + params[p + "b_ff2"]
    cache = (x, a, ln1, q, k, v, pr, y, x2, c, ln2, f1, u, ut) if keep else None
    return x3, cache


def _head(params, x):
    hf, lnf = _ln(x, params["lnf_g"], params["lnf_b"])
    h1 = _mm(hf, params["head_w1"]) + params["head_b1"]
    hu, ht = _gelu(h1)
    z = _mm(hu, params["head_w2"]) + params["head_b2"]
    return z, (x, hf, lnf, h1, hu, ht)


def _log_softmax(z):
    m = z.max(-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(-1, keepdims=True))


def _run(params, cfg, x, keep=False):
    caches = []
    for l in range(cfg.n_layers):
        x, c = _block(params, cfg, l, x, keep)
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite activation after layer {l}")
        caches.append(c)
    z, hc = _head(params, x[:, 1::2])
    return z, caches, hc


def forward_embedded(params, cfg: ModelConfig, x) -> np.ndarray:
    """Log-probabilities (B, n_slots, 2) at the P positions of an embedded sequence."""
    z, _, _ = _run(params, cfg, np.asarray(x))
    return _log_softmax(z)


def log_probs(params, cfg: ModelConfig, g, tokens) -> np.ndarray:
    """(B, N, 2) log p(b_i | P_1..P_i, b_1..b_{i-1}, g); column 0 is b=+1."""
    g, tokens = _prepare(cfg, g, tokens)
    x, _ = _embed(params, cfg, g, tokens[:, : 2 * cfg.n_qubits - 1])
    return forward_embedded(params, cfg, x)


def record_log_likelihood(params, cfg: ModelConfig, g, tokens) -> np.ndarray:
    """Per-record sum of log p(b_i | ...)."""
    _, tokens = _prepare(cfg, g, tokens)
    lp = log_probs(params, cfg, g, tokens)
    picked = np.take_along_axis(lp, tokens[:, 1::2, None], axis=-1)[..., 0]
    return picked.sum(-1)


def loss(params, cfg: ModelConfig, g, tokens) -> float:
    """Mean negative log-likelihood per record."""
    return float(-record_log_likelihood(params, cfg, g, tokens).mean())


# ------------------------------------------------------------------ backward


def loss_and_grad(params, cfg: ModelConfig, g, tokens) -> tuple[float, dict[str, np.ndarray]]:
    g, tokens = _prepare(cfg, g, tokens)
    bsz = tokens.shape[0]
    n = cfg.n_qubits
    x, ecache = _embed(params, cfg, g, tokens[:, : 2 * n - 1])
    z, caches, hcache = _run(params, cfg, x, keep=True)

    lp = _log_softmax(z)
    target = tokens[:, 1::2]
    nll = -np.take_along_axis(lp, target[..., None], axis=-1).sum() / bsz
    dz = np.exp(lp)
    np.put_along_axis(dz, target[..., None], np.take_along_axis(dz, target[..., None], -1) - 1.0, -1)
    dz /= bsz

    grads = {}
    xr, hf, lnf, h1, hu, ht = hcache
    dhu, grads["head_w2"], grads["head_b2"] = _linear_back(dz, hu, params["head_w2"])
    dh1 = dhu * _gelu_grad(h1, ht)
    dhf, grads["head_w1"], grads["head_b1"] = _linear_back(dh1, hf, params["head_w1"])
    dxr, grads["lnf_g"], grads["lnf_b"] = _ln_back(dhf, params["lnf_g"], lnf)
    dx = np.zeros_like(x)
    dx[:, 1::2] = dxr

    for l in reversed(range(cfg.n_layers)):
        dx = _block_back(params, cfg, l, dx, caches[l], grads)

    g_in, e1, eu, et = ecache
    de0 = dx[:, 0]
    deu, grads["g_w2"], grads["g_b2"] = _linear_back(de0, eu, params["g_w2"])
    de1 = deu * _gelu_grad(e1, et)
    _, grads["g_w1"], grads["g_b1"] = _linear_back(de1, g_in, params["g_w1"])

    dtok = dx[:, 1:]
    t = dtok.shape[1]
    gpos = np.zeros_like(params["pos_emb"])
    gpos[:t] = dtok.sum(0)
    grads["pos_emb"] = gpos
    gtok = np.zeros_like(params["tok_emb"])
    np.add.at(gtok, tokens[:, :t].ravel(), dtok.reshape(-1, cfg.d_model))
    grads["tok_emb"] = gtok

    ordered = {name: grads[name] for name in params}
    for name, gr in ordered.items():
        if not np.all(np.isfinite(gr)):
            raise NumericalError(f"non-finite gradient for {name}")
    return float(nll), ordered


def _block_back(params, cfg, l, dx3, cache, grads):
    p = f"layers.{l}."
    x, a, ln1, q, k, v, pr, y, x2, c, ln2, f1, u, ut = cache
    b, t, d = x.shape
    h, dh = cfg.n_heads, cfg.head_dim

    du, grads[p + "w_ff2"], grads[p + "b_ff2"] = _linear_back(dx3, u, params[p + "w_ff2"])
    df1 = du * _gelu_grad(f1, ut)
    dc, grads[p + "w_ff1"], grads[p + "b_ff1"] = _linear_back(df1, c, params[p + "w_ff1"])
    dln2, grads[p + "ln2_g"], grads[p + "ln2_b"] = _ln_back(dc, params[p + "ln2_g"], ln2)
    dx2 = dx3 + dln2

    dy, grads[p + "w_o"], grads[p + "b_o"] = _linear_back(dx2, y, params[p + "w_o"])
    dy = dy.reshape(b, t, h, dh).transpose(0, 2, 1, 3)
    dpr = dy @ v.transpose(0, 1, 3, 2)
    dv = pr.transpose(0, 1, 3, 2) @ dy
    ds = pr * (dpr - (dpr * pr).sum(-1, keepdims=True)) * (1.0 / math.sqrt(dh))
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(b, t, 3 * d)
    da, grads[p + "w_qkv"], grads[p + "b_qkv"] = _linear_back(dqkv, a, params[p + "w_qkv"])
    dln1, grads[p + "ln1_g"], grads[p + "ln1_b"] = _ln_back(da, params[p + "ln1_g"], ln1)
    return dx2 + dln1


def backward(params, cfg: ModelConfig, g, tokens) -> dict[str, np.ndarray]:
    return loss_and_grad(params, cfg, g, tokens)[1]


# ------------------------------------------------------------------ sampling


def sample_outcomes(params, cfg: ModelConfig, g, bases, rng) -> np.ndarray:
    """Autoregressively sample outcomes for the given basis rows.

    Basis tokens are teacher-forced; only b_i is drawn, from the head at the
    P_i position.  Returns +1/-1 of shape (B, N).
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    bases = np.atleast_2d(np.asarray(bases, dtype=np.intp))
    bsz, n = bases.shape
    if n != cfg.n_qubits:
        raise ValueError(f"basis length {n} does not match model size {cfg.n_qubits}")
    g = np.asarray(g, dtype=cfg.dtype).reshape(-1, cfg.param_dim)
    if g.shape[0] == 1:
        g = np.repeat(g, bsz, axis=0)
    tokens = np.zeros((bsz, 2 * n), dtype=np.intp)
    tokens[:, 0::2] = bases + 2
    x_full, _ = _embed(params, cfg, g, tokens[:, : 2 * n - 1])
    for i in range(n):
        t = 2 * i + 1
        x = x_full[:, : t + 1].copy()
        z, _, _ = _run(params, cfg, x)
        lp = _log_softmax(z[:, -1])
        minus = rng.random(bsz) >= np.exp(lp[:, 0])
        tokens[:, t] = minus
        if i + 1 < n:
            x_full[:, t + 1] = params["tok_emb"][tokens[:, t]] + params["pos_emb"][t]
    return (1 - 2 * tokens[:, 1::2]).astype(np.int8)
