"""Token/position embedding plus a post-LN Transformer stack.

Parameters are plain ``dict[str, Tensor]`` keyed by dotted path, e.g.
``emb.token`` or ``layers.2.attn.wq``. Every Transformer layer has the same
set of roles (``LAYER_ROLES``), which is what lets teacher block gradients be
averaged onto a student layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor

LAYER_ROLES = (
    "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
    "attn.wo", "attn.bo", "ln1.gamma", "ln1.beta",
    "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2", "ln2.gamma", "ln2.beta",
)


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


@dataclass
class EncoderConfig:
    vocab_size: int = 200
    max_seq_len: int = 16
    hidden_dim: int = 32
    num_heads: int = 4
    ffn_dim: int = 64
    num_layers: int = 4
    dropout: float = 0.2
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("vocab_size", "max_seq_len", "hidden_dim", "num_heads", "ffn_dim", "num_layers"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.hidden_dim % self.num_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    def with_layers(self, n):
        d = asdict(self)
        d["num_layers"] = n
        return EncoderConfig(**d)


@dataclass
class Encoder:
    config: EncoderConfig
    params: dict = field(default_factory=dict)

    def layer(self, j):
        """Role -> Tensor for 0-based layer ``j``."""
        return {r: self.params[f"layers.{j}.{r}"] for r in LAYER_ROLES}

    def tensors(self):
        return list(self.params.values())


@dataclass
class EncoderState:
    embeddings: Tensor          # (B, S, H)
    layer_hidden: list          # num_layers x (B, S, H)
    attention_mask: np.ndarray  # (B, S) bool
    attention_probs: list = field(default_factory=list)  # per layer (B, heads, S, S)


@dataclass(frozen=True)
class BlockMap:
    K: int
    N: int

    def __post_init__(self):
        if self.K < 1 or self.N < 1:
            raise ConfigError(f"K and N must be positive, got K={self.K}, N={self.N}")


def block_of(bmap, i):
    """1-based teacher layer indices making up block ``i`` (1-based)."""
    if not 1 <= i <= bmap.N:
        raise ValueError(f"block index {i} outside 1..{bmap.N}")
    return list(range((i - 1) * bmap.K + 1, i * bmap.K + 1))


def init_encoder(cfg, rng, prefix=""):
    H, F = cfg.hidden_dim, cfg.ffn_dim

    def w(shape, std):
        return rng.normal(0.0, std, size=shape)

    raw = {
        "emb.token": w((cfg.vocab_size, H), 1.0),
        "emb.position": w((cfg.max_seq_len, H), 0.1),
    }
    for j in range(cfg.num_layers):
        p = f"layers.{j}."
        for m in ("q", "k", "v", "o"):
            raw[p + f"attn.w{m}"] = w((H, H), H ** -0.5)
            raw[p + f"attn.b{m}"] = np.zeros(H)
        raw[p + "ffn.w1"] = w((H, F), H ** -0.5)
        raw[p + "ffn.b1"] = np.zeros(F)
        raw[p + "ffn.w2"] = w((F, H), F ** -0.5)
        raw[p + "ffn.b2"] = np.zeros(H)
        for ln in ("ln1", "ln2"):
            raw[p + f"{ln}.gamma"] = np.ones(H)
            raw[p + f"{ln}.beta"] = np.zeros(H)
    params = {k: Tensor(v, requires_grad=True, name=prefix + k) for k, v in raw.items()}
    return Encoder(cfg, params)


def init_student_from_teacher(teacher, n, prefix="student."):
    """Copy the teacher's embeddings and first ``n`` layers into a new encoder."""
    if n > teacher.config.num_layers:
        raise ConfigError(f"student depth {n} exceeds teacher depth {teacher.config.num_layers}")
    if n < 1:
        raise ConfigError(f"student depth must be positive, got {n}")
    params = {}
    for k, t in teacher.params.items():
        if k.startswith("layers.") and int(k.split(".")[1]) >= n:
            continue
        params[k] = Tensor(t.data.copy(), requires_grad=True, name=prefix + k)
    return Encoder(teacher.config.with_layers(n), params)


def _attention(x, lp, mask, cfg, train, rng, keep_probs):
    B, S, H = x.shape
    nh = cfg.num_heads
    dh = H // nh

    def heads(t):  # (B, S, H) -> (B, nh, S, dh)
        return T.transpose(T.reshape(t, (B, S, nh, dh)), (0, 2, 1, 3))

    q = heads(T.add(T.matmul(x, lp["attn.wq"]), lp["attn.bq"]))
    k = heads(T.add(T.matmul(x, lp["attn.wk"]), lp["attn.bk"]))
    v = heads(T.add(T.matmul(x, lp["attn.wv"]), lp["attn.bv"]))
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), dh ** -0.5)
    probs = T.softmax(scores, mask=mask[:, None, None, :])
    if keep_probs is not None:
        keep_probs.append(probs.data)
    if train:
        probs = T.dropout(probs, cfg.dropout, rng)
    ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (B, S, H))
    return T.add(T.matmul(ctx, lp["attn.wo"]), lp["attn.bo"])


def _layer(x, lp, mask, cfg, train, rng, keep_probs):
    a = _attention(x, lp, mask, cfg, train, rng, keep_probs)
    x = T.layer_norm(T.add(x, a), lp["ln1.gamma"], lp["ln1.beta"], cfg.ln_eps)
    f = T.gelu(T.add(T.matmul(x, lp["ffn.w1"]), lp["ffn.b1"]))
    f = T.add(T.matmul(f, lp["ffn.w2"]), lp["ffn.b2"])
    if train:
        f = T.dropout(f, cfg.dropout, rng)
    return T.layer_norm(T.add(x, f), lp["ln2.gamma"], lp["ln2.beta"], cfg.ln_eps)


def encode(enc, tokens, mask, train=False, rng=None, keep_probs=False):
    """Run the encoder on a (B, S) batch of token ids.

    A 1-D ``tokens`` is treated as a batch of one. Dropout is active only when
    ``train`` is set (and then ``rng`` is required).
    """
    cfg = enc.config
    tokens = np.asarray(tokens, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if tokens.ndim == 1:
        tokens, mask = tokens[None, :], mask[None, :]
    if tokens.shape != mask.shape:
        raise InputError(f"tokens {tokens.shape} and mask {mask.shape} differ")
    B, S = tokens.shape
    if S > cfg.max_seq_len:
        raise InputError(f"sequence length {S} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise InputError(f"token id out of range [0, {cfg.vocab_size})")
    if train and cfg.dropout > 0 and rng is None:
        raise ValueError("training-mode encode needs an rng for dropout")
    p = enc.params
    emb = T.reshape(T.take(p["emb.token"], tokens.reshape(-1)), (B, S, cfg.hidden_dim))
    pos = T.reshape(T.take(p["emb.position"], np.tile(np.arange(S), B)), (B, S, cfg.hidden_dim))
    x = T.add(emb, pos)
    probs = [] if keep_probs else None
    hidden = []
    h = x
    for j in range(cfg.num_layers):
        h = _layer(h, enc.layer(j), mask, cfg, train, rng, probs)
        hidden.append(h)
    return EncoderState(x, hidden, mask, probs or [])

