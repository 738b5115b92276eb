"""Soft-masked KNN features plus fused global (linear) and local attention.

One block runs, pre-norm: gather each point's K neighbors, attenuate them
with a learnable rank-decay mask, then combine a linear-attention global
branch with a per-patch softmax local branch, concatenate and project back to
the hidden width, and finish with a GELU feed-forward. Both branches use
width d = C/2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .geometry import KnnIndex
from .tensor import (
    Tensor,
    TensorError,
    add,
    concat_lastdim,
    div,
    gather_rows,
    gelu,
    l1_lastdim,
    layer_norm,
    matmul,
    mul,
    reduce_sum,
    reshape,
    scale,
    sigmoid,
    softmax_lastdim,
    split_lastdim,
    sub,
    transpose,
)

__all__ = ["SoftMaskParams", "GlaLayerParams", "soft_mask",
           "weighted_knn_features", "global_attention", "local_attention",
           "gla", "la2_layer"]

# Rows whose l1 mass (or interaction denominator) falls below this are left
# unscaled to avoid 0/0 at initialization.
NORM_GUARD = 1e-12


@dataclass
class SoftMaskParams:
    """Learnable neighbor-count mask: scalar s, fixed sharpness alpha > 0."""

    s: Tensor
    alpha: float

    def __post_init__(self):
        if self.alpha <= 0:
            raise TensorError("soft mask sharpness alpha must be positive")
        if self.s.size != 1:
            raise TensorError("soft mask parameter s must be a scalar tensor")

    def fraction(self) -> float:
        """Current effective-neighbor fraction sigmoid(s), in (0, 1)."""
        return 1.0 / (1.0 + math.exp(-self.s.item()))


def soft_mask(p: SoftMaskParams, k: int) -> Tensor:
    """Rank weights w_r = sigmoid(-alpha * (r - sigmoid(s)*(K-1) - 1)), r=1..K.

    Strictly decreasing in rank, every weight in (0, 1); differentiable in s
    through both sigmoid applications.
    """
    if k < 1:
        raise TensorError("soft mask needs K >= 1")
    ranks = Tensor(np.arange(1.0, k + 1.0))
    frac = sigmoid(p.s)                                # sigma(s), shape of s
    thresh = add(scale(frac, k - 1.0), Tensor(np.ones(1)))
    arg = scale(sub(reshape(thresh, (1,)), ranks), p.alpha)
    return sigmoid(arg)


def weighted_knn_features(h_knn: Tensor, w: Tensor) -> Tensor:
    """Scale neighbor features by rank weight: out[a,b,c] = h_knn[a,b,c]*w[b]."""
    if h_knn.ndim != 3 or w.ndim != 1 or w.shape[0] != h_knn.shape[1]:
        raise TensorError(
            f"weighted_knn_features needs [M,K,C] and [K], got {h_knn.shape}, {w.shape}")
    return mul(h_knn, reshape(w, (w.shape[0], 1)))


@dataclass
class GlaLayerParams:
    """All learnables of one block; d = C/2 split across `heads`."""

    w_qg: Tensor
    b_qg: Tensor
    w_kg: Tensor
    b_kg: Tensor
    w_vg: Tensor
    b_vg: Tensor
    w_ql: Tensor
    b_ql: Tensor
    w_kl: Tensor          # neighbor-path projections carry no bias so a
    w_vl: Tensor          # zero-masked neighbor contributes exactly nothing
    w_out: Tensor
    b_out: Tensor
    ff_w1: Tensor
    ff_b1: Tensor
    ff_w2: Tensor
    ff_b2: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    mask: SoftMaskParams
    heads: int = 1

    @property
    def hidden(self) -> int:
        return self.w_qg.shape[0]

    @property
    def branch(self) -> int:
        return self.w_qg.shape[1]

    @classmethod
    def initialize(cls, rng: np.random.Generator, hidden: int, ff_hidden: int,
                   alpha: float, heads: int = 1) -> "GlaLayerParams":
        if hidden % 2 != 0:
            raise TensorError(f"hidden width must be even, got {hidden}")
        d = hidden // 2
        if d % heads != 0:
            raise TensorError(f"branch width {d} not divisible by {heads} heads")

        def w(fan_in, fan_out):
            bound = 1.0 / math.sqrt(fan_in)
            return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)),
                          requires_grad=True)

        def b(n):
            return Tensor(np.zeros(n), requires_grad=True)

        return cls(
            w_qg=w(hidden, d), b_qg=b(d),
            w_kg=w(hidden, d), b_kg=b(d),
            w_vg=w(hidden, d), b_vg=b(d),
            w_ql=w(hidden, d), b_ql=b(d),
            w_kl=w(hidden, d),
            w_vl=w(hidden, d),
            w_out=w(2 * d, hidden), b_out=b(hidden),
            ff_w1=w(hidden, ff_hidden), ff_b1=b(ff_hidden),
            ff_w2=w(ff_hidden, hidden), ff_b2=b(hidden),
            ln1_gamma=Tensor(np.ones(hidden), requires_grad=True),
            ln1_beta=b(hidden),
            ln2_gamma=Tensor(np.ones(hidden), requires_grad=True),
            ln2_beta=b(hidden),
            mask=SoftMaskParams(s=Tensor(np.zeros(1), requires_grad=True),
                                alpha=alpha),
            heads=heads,
        )

    def named_params(self) -> Iterator[tuple[str, Tensor]]:
        for name in ("w_qg", "b_qg", "w_kg", "b_kg", "w_vg", "b_vg",
                     "w_ql", "b_ql", "w_kl", "w_vl", "w_out", "b_out",
                     "ff_w1", "ff_b1", "ff_w2", "ff_b2",
                     "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta"):
            yield name, getattr(self, name)
        yield "mask_s", self.mask.s


def _guarded_div(num: Tensor, den: Tensor) -> Tensor:
    """num / den with rows of |den| < NORM_GUARD treated as den = 1."""
    keep = (np.abs(den.data) >= NORM_GUARD).astype(np.float64)
    safe = add(mul(den, Tensor(keep)), Tensor(1.0 - keep))
    return div(num, safe)


def _l1_normalize(x: Tensor) -> Tensor:
    return _guarded_div(x, l1_lastdim(x))


def _heads(x: Tensor, heads: int) -> list[Tensor]:
    if heads == 1:
        return [x]
    dh = x.shape[-1] // heads
    return [split_lastdim(x, h * dh, (h + 1) * dh) for h in range(heads)]


def _concat_all(parts: list[Tensor]) -> Tensor:
    out = parts[0]
    for p in parts[1:]:
        out = concat_lastdim(out, p)
    return out


def global_attention(h_bar: Tensor, p: GlaLayerParams) -> Tensor:
    """Linear-attention global branch: Qn (Kn^T V) / D + Qn, cost O(M*d^2).

    Queries and keys are l1-normalized per row; D is the per-row cumulative
    interaction mass Qn (Kn^T 1). The M x M score matrix is never formed.
    """
    m = h_bar.shape[0]
    q = add(matmul(h_bar, p.w_qg), p.b_qg)
    k = add(matmul(h_bar, p.w_kg), p.b_kg)
    v = add(matmul(h_bar, p.w_vg), p.b_vg)
    ones = Tensor(np.ones((m, 1)))

    outs = []
    for qh, kh, vh in zip(_heads(q, p.heads), _heads(k, p.heads), _heads(v, p.heads)):
        qn = _l1_normalize(qh)
        kn = _l1_normalize(kh)
        knt = transpose(kn)
        num = matmul(qn, matmul(knt, vh))            # [M, dh] via [dh, dh]
        den = matmul(qn, matmul(knt, ones))          # [M, 1]
        outs.append(add(_guarded_div(num, den), qn))
    return _concat_all(outs)


def local_attention(h_bar: Tensor, h_knn_w: Tensor, p: GlaLayerParams) -> Tensor:
    """Per-patch softmax attention over the K weighted neighbors, O(M*K*d)."""
    if h_knn_w.ndim != 3 or h_knn_w.shape[0] != h_bar.shape[0]:
        raise TensorError(
            f"local attention needs aligned [M,C] and [M,K,C], got {h_bar.shape}, {h_knn_w.shape}")
    m, kk = h_knn_w.shape[0], h_knn_w.shape[1]
    q = add(matmul(h_bar, p.w_ql), p.b_ql)           # [M, d]
    k = matmul(h_knn_w, p.w_kl)                      # [M, K, d], no bias
    v = matmul(h_knn_w, p.w_vl)

    dh = p.branch // p.heads
    outs = []
    for qh, kh, vh in zip(_heads(q, p.heads), _heads(k, p.heads), _heads(v, p.heads)):
        qr = reshape(qh, (m, 1, dh))
        scores = scale(reduce_sum(mul(kh, qr), axis=-1), 1.0 / math.sqrt(dh))
        att = softmax_lastdim(scores)                # [M, K]
        att3 = reshape(att, (m, kk, 1))
        outs.append(reduce_sum(mul(vh, att3), axis=1))
    return _concat_all(outs)


def gla(h_bar: Tensor, knn: KnnIndex, p: GlaLayerParams) -> Tensor:
    """Fuse both branches: Linear(Concat(global, local)) back to width C."""
    h_knn = gather_rows(h_bar, knn.idx)
    w = soft_mask(p.mask, knn.k)
    h_knn_w = weighted_knn_features(h_knn, w)
    g = global_attention(h_bar, p)
    l = local_attention(h_bar, h_knn_w, p)
    return add(matmul(concat_lastdim(g, l), p.w_out), p.b_out)


def la2_layer(h_prev: Tensor, knn: KnnIndex, p: GlaLayerParams) -> Tensor:
    """Pre-norm two-stage block: attention residual, then feed-forward residual."""
    h_bar = layer_norm(h_prev, p.ln1_gamma, p.ln1_beta)
    h_hat = add(gla(h_bar, knn, p), h_prev)
    h_bar2 = layer_norm(h_hat, p.ln2_gamma, p.ln2_beta)
    ff = add(matmul(gelu(add(matmul(h_bar2, p.ff_w1), p.ff_b1)), p.ff_w2), p.ff_b2)
    return add(ff, h_hat)
