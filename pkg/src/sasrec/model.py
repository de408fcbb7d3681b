"""Self-attentive sequential recommender built on the in-repo tensor engine.

Input sequences are left-padded with item 0. Each block is a causal
self-attention layer and a point-wise feed-forward network, both wrapped as
``x + Dropout(g(LayerNorm(x)))``. Scores are inner products of the final
representation with the (shared or separate) item embedding table.
"""

import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import left_pad
from .errors import ConfigurationError

# When set, every forward pass verifies the attention mask/normalization invariant.
CHECK_ATTENTION = os.environ.get("SASREC_CHECK_ATTENTION", "0") == "1"


@dataclass
class ModelConfig:
    num_items: int
    num_users: int = 0
    d: int = 50
    n: int = 200
    blocks: int = 2
    heads: int = 1
    dropout_p: float = 0.2
    use_positional_embedding: bool = True
    share_item_embedding: bool = True
    use_residual: bool = True
    use_dropout: bool = True
    use_explicit_user: bool = False
    final_ln: bool = True
    ln_epsilon: float = 1e-8

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.num_items < 1:
            raise ConfigurationError("num_items must be >= 1")
        if self.d < 1 or self.n < 1:
            raise ConfigurationError("d and n must be >= 1")
        if self.blocks < 0:
            raise ConfigurationError("blocks must be >= 0")
        if self.heads < 1 or self.d % self.heads:
            raise ConfigurationError(f"heads={self.heads} must be >= 1 and divide d={self.d}")
        if not 0 <= self.dropout_p < 1:
            raise ConfigurationError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.use_explicit_user and self.num_users < 1:
            raise ConfigurationError("explicit user embedding needs num_users >= 1")
        if self.ln_epsilon <= 0:
            raise ConfigurationError("ln_epsilon must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ForwardTrace:
    E_hat: np.ndarray
    attention: list = field(default_factory=list)  # per block, (B, heads, n, n)
    S: list = field(default_factory=list)
    F: list = field(default_factory=list)
    final: np.ndarray = None


def init_params(config, rng):
    """Uniform(-1/sqrt(d), 1/sqrt(d)) weights, zero biases, unit LayerNorm scales."""
    d, dt = config.d, T.get_dtype()
    lim = 1.0 / math.sqrt(d)

    def uni(*shape):
        return T.Tensor(rng.uniform(-lim, lim, size=shape), requires_grad=True, dtype=dt)

    def const(v, *shape):
        return T.Tensor(np.full(shape, v), requires_grad=True, dtype=dt)

    p = {}
    p["item_emb"] = uni(config.num_items + 1, d)
    p["item_emb"].data[0] = 0
    if config.use_positional_embedding:
        p["pos_emb"] = uni(config.n, d)
    for b in range(config.blocks):
        for name in ("Wq", "Wk", "Wv"):
            p[f"block{b}.attn.{name}"] = uni(d, d)
        p[f"block{b}.ffn.W1"] = uni(d, d)
        p[f"block{b}.ffn.b1"] = const(0.0, d)
        p[f"block{b}.ffn.W2"] = uni(d, d)
        p[f"block{b}.ffn.b2"] = const(0.0, d)
        for ln in ("ln1", "ln2"):
            p[f"block{b}.{ln}.alpha"] = const(1.0, d)
            p[f"block{b}.{ln}.beta"] = const(0.0, d)
    if config.final_ln:
        p["final_ln.alpha"] = const(1.0, d)
        p["final_ln.beta"] = const(0.0, d)
    if not config.share_item_embedding:
        p["out_emb"] = uni(config.num_items + 1, d)
        p["out_emb"].data[0] = 0
    if config.use_explicit_user:
        p["user_emb"] = uni(config.num_users, d)
    return p


def pinned_rows(config):
    rows = {"item_emb": [0]}
    if not config.share_item_embedding:
        rows["out_emb"] = [0]
    return rows


def output_table(params, config):
    return params["item_emb"] if config.share_item_embedding else params["out_emb"]


def attention_mask(inputs):
    """(B, n, n) validity: key j is visible to query i iff j <= i and s_j is a real item.

    With left padding, pad query rows see no valid key at all; their weights
    are all zero and their outputs are never read by real rows.
    """
    n = inputs.shape[1]
    real = inputs != 0
    return np.tril(np.ones((n, n), dtype=bool))[None] & real[:, None, :]


def check_attention(weights, inputs, tol=1e-6):
    """Assert the mask/normalization invariant on (B, heads, n, n) weights.

    Masked entries (future or pad keys) must be exactly 0 in every row; rows
    with at least one valid key must sum to 1 within ``tol``.
    """
    w = weights.astype(np.float64)
    mask = attention_mask(inputs)[:, None]
    if np.any(np.where(mask, 0.0, w) != 0):
        raise AssertionError("attention weight at a masked (future or pad) position is not exactly 0")
    live = np.broadcast_to(mask.any(axis=-1), w.shape[:3])
    if np.any(np.abs(w.sum(axis=-1) - 1)[live] > tol):
        raise AssertionError("attention rows over valid positions do not sum to 1")


def embed(inputs, params, config, train=False, rng=None):
    inputs = np.asarray(inputs)
    if inputs.shape[-1] != config.n:
        raise ConfigurationError(f"input length {inputs.shape[-1]} != n={config.n}")
    if inputs.min() < 0 or inputs.max() > config.num_items:
        raise ConfigurationError(f"item index out of range [0, {config.num_items}]")
    E = T.embedding(params["item_emb"], inputs)
    if config.use_positional_embedding:
        E = T.add_broadcast(E, params["pos_emb"])
    if config.use_dropout:
        E = T.dropout(E, config.dropout_p, train, rng)
    return E


def causal_self_attention(X, params, prefix, config, mask):
    """Returns (S, weights) with weights shaped (B, heads, n, n)."""
    h = config.heads
    bsz, n, d = X.shape
    Q = T.matmul(X, params[prefix + "Wq"])
    K = T.matmul(X, params[prefix + "Wk"])
    V = T.matmul(X, params[prefix + "Wv"])
    if h > 1:
        Q, K, V = (T.split_heads(t, h) for t in (Q, K, V))
        mask = np.repeat(mask, h, axis=0)
    logits = T.mul_const(T.matmul(Q, K, transpose_b=True), 1.0 / math.sqrt(d // h))
    W = T.softmax_rows(logits, mask, allow_empty=True)
    S = T.matmul(W, V)
    if h > 1:
        S = T.merge_heads(S, h)
    return S, W.data.reshape(bsz, h, n, n)


def ffn(S, params, prefix):
    H = T.relu(T.add_broadcast(T.matmul(S, params[prefix + "W1"]), params[prefix + "b1"]))
    return T.add_broadcast(T.matmul(H, params[prefix + "W2"]), params[prefix + "b2"])


def sublayer_wrap(x, g, alpha, beta, config, train=False, rng=None):
    y = g(T.layer_norm(x, alpha, beta, config.ln_epsilon))
    if config.use_dropout:
        y = T.dropout(y, config.dropout_p, train, rng)
    return T.add(x, y) if config.use_residual else y


def forward(inputs, params, config, train=False, rng=None, users=None, trace=False):
    """Final per-position representations (B, n, d) and an optional trace."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.int64))
    if train and config.use_dropout and config.dropout_p > 0 and rng is None:
        raise ConfigurationError("training-mode forward with dropout needs an rng")
    X = embed(inputs, params, config, train, rng)
    tr = ForwardTrace(E_hat=X.data.copy()) if trace else None
    mask = attention_mask(inputs)
    for b in range(config.blocks):
        pre = f"block{b}."
        attn = {}

        def sa(z, pre=pre, attn=attn):
            S, w = causal_self_attention(z, params, pre + "attn.", config, mask)
            attn["w"] = w
            return S

        X = sublayer_wrap(X, sa, params[pre + "ln1.alpha"], params[pre + "ln1.beta"], config, train, rng)
        if CHECK_ATTENTION:
            check_attention(attn["w"], inputs)
        if tr is not None:
            tr.attention.append(attn["w"])
            tr.S.append(X.data.copy())
        X = sublayer_wrap(X, lambda z, pre=pre: ffn(z, params, pre + "ffn."),
                          params[pre + "ln2.alpha"], params[pre + "ln2.beta"], config, train, rng)
        if tr is not None:
            tr.F.append(X.data.copy())
    if config.final_ln:
        X = T.layer_norm(X, params["final_ln.alpha"], params["final_ln.beta"], config.ln_epsilon)
    if config.use_explicit_user:
        if users is None:
            raise ConfigurationError("explicit user embedding needs user indices")
        users = np.asarray(users, dtype=np.int64)
        U = T.embedding(params["user_emb"], np.repeat(users[:, None], config.n, axis=1))
        X = T.add(X, U)
    if tr is not None:
        tr.final = X.data.copy()
    return X, tr


def item_logits(F, items, params, config):
    """r_{items[b,t], t} for each position: (B, n)."""
    emb = T.embedding(output_table(params, config), items)
    return T.sum_last(T.mul(F, emb))


def full_scores(F, params, config):
    """Scores of every catalog item against representation(s) F (..., d); pad column is -inf."""
    table = output_table(params, config).data
    r = F @ table.T
    r[..., 0] = -np.inf
    return r


def bce_loss(pos_logits, neg_logits, targets):
    """Mean over supervised positions of -[log s(pos) + log(1 - s(neg))]."""
    w = (np.asarray(targets) != 0).astype(pos_logits.data.dtype)
    count = float(w.sum())
    ll = T.add(T.log_sigmoid(pos_logits), T.log_sigmoid(T.mul_const(neg_logits, -1.0)))
    return T.mul_const(T.total(T.mul_const(ll, w)), -1.0 / max(count, 1.0))


class SASRec:
    """Parameters plus config with training loss and candidate scoring."""

    kind = "sasrec"

    def __init__(self, config, params=None, rng=None):
        self.config = config
        self.params = params if params is not None else init_params(
            config, rng if rng is not None else np.random.default_rng(0))

    def pinned_rows(self):
        return pinned_rows(self.config)

    def loss(self, inputs, targets, negatives, users=None, rng=None):
        F, _ = forward(inputs, self.params, self.config, train=True, rng=rng, users=users)
        pos = item_logits(F, targets, self.params, self.config)
        neg = item_logits(F, negatives, self.params, self.config)
        return bce_loss(pos, neg, targets)

    def represent(self, histories, users=None, batch_size=256):
        """Last-position representation for each history (eval mode)."""
        out = []
        with T.no_grad():
            for lo in range(0, len(histories), batch_size):
                inp = left_pad(histories[lo:lo + batch_size], self.config.n)
                u = None if users is None else np.asarray(users)[lo:lo + batch_size]
                F, _ = forward(inp, self.params, self.config, train=False, users=u)
                out.append(F.data[:, -1])
        return np.concatenate(out) if out else np.zeros((0, self.config.d), dtype=T.get_dtype())

    def score(self, histories, users, candidates):
        F = self.represent(histories, users)
        table = output_table(self.params, self.config).data
        return np.einsum("bd,bcd->bc", F, table[candidates])

    def score_all(self, history, user=None):
        F = self.represent([np.asarray(history)], None if user is None else [user])
        return full_scores(F, self.params, self.config)[0]

    def config_dict(self):
        return self.config.to_dict()

    def arrays(self):
        return {k: v.data for k, v in self.params.items()}

    @classmethod
    def from_checkpoint(cls, config, arrays):
        return cls.from_arrays(ModelConfig.from_dict(config), arrays)

    @classmethod
    def from_arrays(cls, config, arrays):
        dt = T.get_dtype()
        params = {k: T.Tensor(v, requires_grad=True, dtype=dt) for k, v in arrays.items()}
        return cls(config, params)
