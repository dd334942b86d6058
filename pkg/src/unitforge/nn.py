"""Neural building blocks assembled by the decoder and alignment models.

Everything is desk scale: explicit per-head weight matrices, pre-norm
transformer blocks, dense soft MoE routing and a single-head text-guided
cross-attention module whose output projection starts at zero so the
fused path is exactly the identity until trained.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .tensor import Tensor


class Linear:
    def __init__(self, rng, d_in, d_out, bias=True, zero_init=False):
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            w = rng.normal(0.0, 1.0 / math.sqrt(d_in), (d_in, d_out))
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.w)
        if self.b is not None:
            y = T.add_rowvec(y, self.b)
        return y

    def parameters(self, prefix):
        out = {f"{prefix}.w": self.w}
        if self.b is not None:
            out[f"{prefix}.b"] = self.b
        return out


class Embedding:
    def __init__(self, rng, vocab, d, scale=0.02):
        self.table = Tensor(rng.normal(0.0, scale, (vocab, d)), requires_grad=True)

    def __call__(self, ids):
        return T.embedding_lookup(self.table, ids)

    def parameters(self, prefix):
        return {f"{prefix}.table": self.table}


class LayerNorm:
    def __init__(self, d, eps=1e-5):
        self.g = Tensor(np.ones(d), requires_grad=True)
        self.b = Tensor(np.zeros(d), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        return T.add_rowvec(T.mul_rowvec(T.layer_norm_last_dim(x, self.eps), self.g), self.b)

    def parameters(self, prefix):
        return {f"{prefix}.g": self.g, f"{prefix}.b": self.b}


def causal_mask(t: int) -> Tensor:
    m = np.zeros((t, t))
    m[np.triu_indices(t, k=1)] = T.NEG_INF
    return Tensor(m)


class SelfAttention:
    """Multi-head attention with optional causal mask; per-head weights."""

    def __init__(self, rng, d, heads):
        if d % heads != 0:
            raise ConfigurationError(f"model dim {d} not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        dh = d // heads
        self.wq = [Linear(rng, d, dh, bias=False) for _ in range(heads)]
        self.wk = [Linear(rng, d, dh, bias=False) for _ in range(heads)]
        self.wv = [Linear(rng, d, dh, bias=False) for _ in range(heads)]
        self.wo = Linear(rng, d, d, bias=False)

    def __call__(self, x, causal: bool):
        t = x.shape[0]
        dh = self.d // self.heads
        mask = causal_mask(t) if causal else None
        outs = []
        for h in range(self.heads):
            q = self.wq[h](x)
            k = self.wk[h](x)
            v = self.wv[h](x)
            scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dh))
            if mask is not None:
                scores = T.add(scores, mask)
            outs.append(T.matmul(T.softmax_last_dim(scores), v))
        return self.wo(T.concat_last_dim(*outs))

    def parameters(self, prefix):
        out = {}
        for h in range(self.heads):
            out.update(self.wq[h].parameters(f"{prefix}.q{h}"))
            out.update(self.wk[h].parameters(f"{prefix}.k{h}"))
            out.update(self.wv[h].parameters(f"{prefix}.v{h}"))
        out.update(self.wo.parameters(f"{prefix}.out"))
        return out


class Mlp:
    def __init__(self, rng, d, widen=4):
        self.fc1 = Linear(rng, d, widen * d)
        self.fc2 = Linear(rng, widen * d, d)

    def __call__(self, x):
        return self.fc2(T.relu(self.fc1(x)))

    def parameters(self, prefix):
        out = self.fc1.parameters(f"{prefix}.fc1")
        out.update(self.fc2.parameters(f"{prefix}.fc2"))
        return out


class DecoderBlock:
    """Pre-norm residual block; `causal` picks the attention mask."""

    def __init__(self, rng, d, heads):
        self.ln1 = LayerNorm(d)
        self.attn = SelfAttention(rng, d, heads)
        self.ln2 = LayerNorm(d)
        self.mlp = Mlp(rng, d)

    def __call__(self, x, causal: bool):
        x = T.add(x, self.attn(self.ln1(x), causal))
        x = T.add(x, self.mlp(self.ln2(x)))
        return x

    def parameters(self, prefix):
        out = self.ln1.parameters(f"{prefix}.ln1")
        out.update(self.attn.parameters(f"{prefix}.attn"))
        out.update(self.ln2.parameters(f"{prefix}.ln2"))
        out.update(self.mlp.parameters(f"{prefix}.mlp"))
        return out


class MoELayer:
    """Dense soft routing over E feed-forward experts (x4 hidden widening)."""

    def __init__(self, rng, d, experts):
        if experts < 1:
            raise ConfigurationError("MoELayer needs at least one expert")
        self.d = d
        self.experts = [Mlp(rng, d) for _ in range(experts)]
        self.router = Linear(rng, d, experts, bias=False)

    def routing_weights(self, x):
        return T.softmax_last_dim(self.router(x))

    def __call__(self, x):
        weights = self.routing_weights(x)
        t = x.shape[0]
        out = None
        for e, expert in enumerate(self.experts):
            w_e = T.take_per_row(weights, np.full(t, e, dtype=np.int64))
            term = T.scale_rows(expert(x), w_e)
            out = term if out is None else T.add(out, term)
        return out

    def parameters(self, prefix="moe"):
        out = self.router.parameters(f"{prefix}.router")
        for e, expert in enumerate(self.experts):
            out.update(expert.parameters(f"{prefix}.expert{e}"))
        return out


class TextGuidedModule:
    """Cross-attention fusion of decoder conditioning with response text.

    Queries come from the conditioning hidden states, keys/values from
    ground-truth response text embeddings. The output projection is
    zero-initialized, so before any training the module is exactly the
    identity on its hidden-state input. With no text (inference), the
    module is bypassed.
    """

    def __init__(self, rng, d):
        self.d = d
        self.wq = Linear(rng, d, d, bias=False)
        self.wk = Linear(rng, d, d, bias=False)
        self.wv = Linear(rng, d, d, bias=False)
        self.proj = Linear(rng, d, d, bias=False, zero_init=True)

    def __call__(self, hidden, text_embed=None):
        if text_embed is None:
            return hidden
        q = self.wq(hidden)
        k = self.wk(text_embed)
        v = self.wv(text_embed)
        scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(self.d))
        fused = T.matmul(T.softmax_last_dim(scores), v)
        return T.add(hidden, self.proj(fused))

    def parameters(self, prefix="tgm"):
        out = self.wq.parameters(f"{prefix}.xattn.q")
        out.update(self.wk.parameters(f"{prefix}.xattn.k"))
        out.update(self.wv.parameters(f"{prefix}.xattn.v"))
        out.update(self.proj.parameters(f"{prefix}.proj"))
        return out


class PositionalEmbedding:
    def __init__(self, rng, max_len, d, scale=0.02):
        self.table = Tensor(rng.normal(0.0, scale, (max_len, d)), requires_grad=True)

    def __call__(self, x):
        t = x.shape[0]
        return T.add(x, T.gather_rows(self.table, np.arange(t)))

    def parameters(self, prefix):
        return {f"{prefix}.table": self.table}


def cross_entropy(logits, targets, positions=None):
    """Mean NLL of ``targets`` rows of log-softmaxed ``logits``.

    ``positions`` restricts the loss to a subset of rows (loss masking).
    """
    logp = T.log_softmax_last_dim(logits)
    picked = T.take_per_row(logp, np.asarray(targets, dtype=np.int64))
    if positions is not None:
        picked = T.gather_rows(picked, np.asarray(positions, dtype=np.int64))
    return T.scale(T.tmean(picked), -1.0)
