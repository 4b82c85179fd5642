"""Decoder-only causal transformer with a 4-way Q-value head.

Pre-norm residual blocks, learned absolute position embeddings, and no
language-model head: the only output is ``Q(history, action)`` read at
requested positions.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import codec
from . import numerics as nx
from .numerics import Tensor

N_ACTIONS = 4
MASK_VALUE = -1e9


class ContextLengthError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    vocab_size: int = codec.VOCAB_SIZE
    max_context: int = 1024
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.vocab_size != codec.VOCAB_SIZE:
            raise ValueError(f"vocab_size must equal the codec vocabulary ({codec.VOCAB_SIZE})")
        if min(self.n_layers, self.n_heads, self.d_model, self.d_ff, self.max_context) < 1:
            raise ValueError("model dimensions must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    d, f = cfg.d_model, cfg.d_ff
    shapes = {"tok_emb": (cfg.vocab_size, d), "pos_emb": (cfg.max_context, d)}
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.wq": (d, d), p + "attn.bq": (d,),
            p + "attn.wk": (d, d), p + "attn.bk": (d,),
            p + "attn.wv": (d, d), p + "attn.bv": (d,),
            p + "attn.wo": (d, d), p + "attn.bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.w1": (d, f), p + "mlp.b1": (f,),
            p + "mlp.w2": (f, d), p + "mlp.b2": (d,),
        })
    shapes.update({"lnf.g": (d,), "lnf.b": (d,), "q_head.w": (d, N_ACTIONS), "q_head.b": (N_ACTIONS,)})
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(cfg).values())


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    """N(0, 0.02) weights and embeddings, zero biases, unit norm gains, zero Q head."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.startswith("q_head") or leaf.startswith("b"):
            arr = np.zeros(shape)
        elif leaf == "g":
            arr = np.ones(shape)
        else:
            arr = rng.normal(0.0, 0.02, size=shape)
        params[name] = Tensor(arr, requires_grad=True, name=name, dtype=dtype)
    return params


def clone_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(v.data, requires_grad=v.requires_grad, name=k) for k, v in params.items()}


def cast_params(params: dict[str, Tensor], dtype) -> dict[str, Tensor]:
    return {k: Tensor(v.data, requires_grad=v.requires_grad, name=k, dtype=dtype) for k, v in params.items()}


def _dropout(x: Tensor, rate: float, rng) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return nx.mul(x, Tensor(keep, dtype=x.dtype))


def _attention(x: Tensor, params, pre: str, cfg: ModelConfig) -> Tensor:
    B, T, d = x.shape
    H, hd = cfg.n_heads, cfg.head_dim

    def proj(w, b):
        return nx.add(nx.matmul(x, params[pre + w]), params[pre + b])

    q = nx.transpose(nx.reshape(proj("wq", "bq"), (B, T, H, hd)), (0, 2, 1, 3))
    k = nx.transpose(nx.reshape(proj("wk", "bk"), (B, T, H, hd)), (0, 2, 1, 3))
    v = nx.transpose(nx.reshape(proj("wv", "bv"), (B, T, H, hd)), (0, 2, 1, 3))
    att = nx.causal_attention(nx.scale(q, 1.0 / math.sqrt(hd)), k, v)
    out = nx.reshape(nx.transpose(att, (0, 2, 1, 3)), (B, T, d))
    return nx.add(nx.matmul(out, params[pre + "wo"]), params[pre + "bo"])


def hidden_states(params: dict[str, Tensor], cfg: ModelConfig, tokens, dropout_rng=None) -> Tensor:
    """Final-layer (normed) hidden states, shape (B, T, d_model)."""
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.ndim == 1:
        toks = toks[None, :]
    B, T = toks.shape
    if T > cfg.max_context:
        raise ContextLengthError(f"context of {T} tokens exceeds max_context {cfg.max_context}")
    x = nx.add(nx.embedding(params["tok_emb"], toks), nx.embedding(params["pos_emb"], np.arange(T)))
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        h = nx.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        x = nx.add(x, _dropout(_attention(h, params, p + "attn.", cfg), cfg.dropout, dropout_rng))
        h = nx.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        h = nx.gelu(nx.add(nx.matmul(h, params[p + "mlp.w1"]), params[p + "mlp.b1"]))
        h = nx.add(nx.matmul(h, params[p + "mlp.w2"]), params[p + "mlp.b2"])
        x = nx.add(x, _dropout(h, cfg.dropout, dropout_rng))
    return nx.layer_norm(x, params["lnf.g"], params["lnf.b"])


def forward(params: dict[str, Tensor], cfg: ModelConfig, tokens, batch_idx, pos_idx,
            dropout_rng=None) -> Tensor:
    """Q-values (N, 4) at the requested (batch, position) pairs."""
    hid = hidden_states(params, cfg, tokens, dropout_rng)
    pos_idx = np.asarray(pos_idx, dtype=np.int64)
    if pos_idx.size and (pos_idx.min() < 0 or pos_idx.max() >= hid.shape[1]):
        raise IndexError("requested position outside the token stream")
    rows = nx.gather_rows(hid, batch_idx, pos_idx)
    return nx.add(nx.matmul(rows, params["q_head.w"]), params["q_head.b"])


def q_values(params: dict[str, Tensor], cfg: ModelConfig, tokens, positions) -> np.ndarray:
    """Inference helper for a single stream: (len(positions), 4) array."""
    positions = np.asarray(positions, dtype=np.int64)
    with nx.no_tape():
        q = forward(params, cfg, np.asarray(tokens)[None, :], np.zeros(len(positions), dtype=np.int64), positions)
    return q.numpy()


def _ln(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    return xc / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps) * g + b


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


class IncrementalDecoder:
    """Key/value-cached inference over one growing token stream.

    ``extend`` appends tokens and returns Q-values at the last appended
    position; ``reset`` drops the cache (used after context eviction).
    Produces the same numbers as :func:`forward` up to float rounding.
    """

    def __init__(self, params: dict[str, Tensor], cfg: ModelConfig):
        self.cfg = cfg
        self.p = {k: v.data for k, v in params.items()}
        self.reset()

    def reset(self) -> None:
        L, d, C = self.cfg.n_layers, self.cfg.d_model, self.cfg.max_context
        dt = self.p["tok_emb"].dtype
        self.k = np.zeros((L, C, d), dtype=dt)
        self.v = np.zeros((L, C, d), dtype=dt)
        self.length = 0
        self._last_hidden = None

    def extend(self, tokens) -> np.ndarray:
        toks = np.asarray(tokens, dtype=np.int64)
        n = len(toks)
        if n == 0:
            return self.q_last()
        start, end = self.length, self.length + n
        if end > self.cfg.max_context:
            raise ContextLengthError(f"context of {end} tokens exceeds max_context {self.cfg.max_context}")
        p, cfg = self.p, self.cfg
        H, hd = cfg.n_heads, cfg.head_dim
        x = p["tok_emb"][toks] + p["pos_emb"][start:end]
        # mask new query rows against all keys so far
        qpos = np.arange(start, end)[:, None]
        kpos = np.arange(end)[None, :]
        mask = kpos > qpos
        for i in range(cfg.n_layers):
            pre = f"blocks.{i}."
            h = _ln(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
            q = h @ p[pre + "attn.wq"] + p[pre + "attn.bq"]
            self.k[i, start:end] = h @ p[pre + "attn.wk"] + p[pre + "attn.bk"]
            self.v[i, start:end] = h @ p[pre + "attn.wv"] + p[pre + "attn.bv"]
            qh = q.reshape(n, H, hd).transpose(1, 0, 2)
            kh = self.k[i, :end].reshape(end, H, hd).transpose(1, 2, 0)
            vh = self.v[i, :end].reshape(end, H, hd).transpose(1, 0, 2)
            s = (qh @ kh) / math.sqrt(hd)
            s = np.where(mask, MASK_VALUE, s)
            s = np.exp(s - s.max(axis=-1, keepdims=True))
            s /= s.sum(axis=-1, keepdims=True)
            att = (s @ vh).transpose(1, 0, 2).reshape(n, cfg.d_model)
            x = x + att @ p[pre + "attn.wo"] + p[pre + "attn.bo"]
            h = _ln(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
            x = x + _gelu(h @ p[pre + "mlp.w1"] + p[pre + "mlp.b1"]) @ p[pre + "mlp.w2"] + p[pre + "mlp.b2"]
        self.length = end
        self._last_hidden = _ln(x[-1], p["lnf.g"], p["lnf.b"])
        return self.q_last()

    def q_last(self) -> np.ndarray:
        if self._last_hidden is None:
            raise RuntimeError("no tokens fed yet")
        return self._last_hidden @ self.p["q_head.w"] + self.p["q_head.b"]


class QModel:
    """Frozen parameters plus config; what the evaluation harness consumes."""

    def __init__(self, params: dict[str, Tensor], cfg: ModelConfig):
        self.params = params
        self.cfg = cfg

    @property
    def max_context(self) -> int:
        return self.cfg.max_context

    def decoder(self) -> IncrementalDecoder:
        return IncrementalDecoder(self.params, self.cfg)

    @classmethod
    def load(cls, path) -> "QModel":
        from .numerics import checkpoint

        params, header = checkpoint.load(path, requires_grad=False)
        return cls(params, ModelConfig.from_dict(header["model"]))
