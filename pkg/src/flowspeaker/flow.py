"""Invertible flow between speaker-embedding space and semantic space.

Each block is actnorm -> invertible linear -> affine coupling. The linear
layer is stored in LU form (fixed permutation, unit-lower L, strictly-upper
U, signed log diagonal), which keeps it invertible under any parameter update
and makes its log-det a plain sum. Coupling nets are 4-layer pointwise MLPs
with tanh hidden activations and a zero-initialized last layer, so a freshly
built flow starts as the identity map.

All apply functions accept a single vector (d,) or a batch (n, d) and return
the transformed array plus the log-det-Jacobian (scalar, or (n,) when it is
input-dependent). They are written against the generic ops in
:mod:`flowspeaker.autodiff`, so the same code paths serve plain-numpy
inference and taped training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .numerics import RngStream

COUPLING_CLAMP = 4.0   # |log-scale| bound before exp, guards early-training overflow
ACTNORM_MIN_STD = 1e-6


class DegenerateChannelError(Exception):
    """A channel of the actnorm init batch is (numerically) constant."""


class UninitializedFlowError(Exception):
    """A flow was applied before its actnorms saw an init batch."""


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass
class ActNormParams:
    log_scale: np.ndarray
    bias: np.ndarray
    initialized: bool = False


@dataclass
class InvLinearParams:
    perm: np.ndarray          # int64 row permutation, fixed
    lower: np.ndarray         # strict lower part used; unit diagonal implied
    upper_strict: np.ndarray  # strict upper part used
    log_s: np.ndarray         # log |diagonal|
    sign_s: np.ndarray        # int8 signs of the diagonal, fixed


@dataclass
class CouplingParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    w4: np.ndarray
    b4: np.ndarray
    swap: bool = False        # which half is transformed; alternates per block


@dataclass
class FlowBlockParams:
    actnorm: ActNormParams
    invlinear: InvLinearParams
    coupling: CouplingParams


@dataclass
class FlowParameters:
    blocks: list[FlowBlockParams] = field(default_factory=list)
    dim: int = 0


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

def identity_actnorm(dim: int) -> ActNormParams:
    return ActNormParams(np.zeros(dim), np.zeros(dim), initialized=True)


def identity_invlinear(dim: int) -> InvLinearParams:
    return InvLinearParams(
        perm=np.arange(dim, dtype=np.int64),
        lower=np.zeros((dim, dim)),
        upper_strict=np.zeros((dim, dim)),
        log_s=np.zeros(dim),
        sign_s=np.ones(dim, dtype=np.int8),
    )


def random_invlinear(dim: int, rng: RngStream) -> InvLinearParams:
    """LU parameterization of a random orthogonal matrix (logdet 0 at init)."""
    a = rng.normal(dim * dim).reshape(dim, dim)
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))          # fix the QR sign convention
    lu_perm, lower, upper = _plu(q)
    diag = np.diag(upper).copy()
    return InvLinearParams(
        perm=lu_perm,
        lower=np.tril(lower, -1),
        upper_strict=np.triu(upper, 1),
        log_s=np.log(np.abs(diag)),
        sign_s=np.sign(diag).astype(np.int8),
    )


def _plu(m: np.ndarray):
    """Partial-pivoted LU split into (perm, unit-lower L, upper U) such that
    m == (L @ U)[perm], i.e. row i of m is row perm[i] of the product."""
    a = np.asarray(m, dtype=np.float64).copy()
    n = a.shape[0]
    pivot = np.arange(n)
    for k in range(n):
        p = k + int(np.argmax(np.abs(a[k:, k])))
        if p != k:
            a[[k, p]] = a[[p, k]]
            pivot[[k, p]] = pivot[[p, k]]
        a[k + 1:, k] /= a[k, k]
        a[k + 1:, k + 1:] -= np.outer(a[k + 1:, k], a[k, k + 1:])
    lower = np.tril(a, -1) + np.eye(n)
    upper = np.triu(a)
    # pivot maps factored rows back to the source: (L U)[i] == m[pivot[i]]
    return np.argsort(pivot), lower, upper


def zero_init_coupling(dim: int, hidden: int, rng: RngStream, swap: bool = False) -> CouplingParams:
    """Random tanh hidden layers, zero-initialized output layer (identity start)."""
    half = dim // 2
    def glorot(n_in, n_out):
        scale = math.sqrt(2.0 / (n_in + n_out))
        return rng.normal(n_in * n_out).reshape(n_in, n_out) * scale
    return CouplingParams(
        w1=glorot(half, hidden), b1=np.zeros(hidden),
        w2=glorot(hidden, hidden), b2=np.zeros(hidden),
        w3=glorot(hidden, hidden), b3=np.zeros(hidden),
        w4=np.zeros((hidden, 2 * half)), b4=np.zeros(2 * half),
        swap=swap,
    )


def init_flow_params(dim: int, n_blocks: int, rng: RngStream,
                     coupling_hidden: int | None = None) -> FlowParameters:
    """Fresh flow: uninitialized actnorms, random orthogonal linears,
    identity couplings with alternating half-splits."""
    if dim % 2 != 0 or dim < 2:
        raise ValueError("flow dimension must be even and >= 2")
    hidden = coupling_hidden if coupling_hidden is not None else dim
    blocks = []
    for i in range(n_blocks):
        blocks.append(FlowBlockParams(
            actnorm=ActNormParams(np.zeros(dim), np.zeros(dim), initialized=False),
            invlinear=random_invlinear(dim, rng),
            coupling=zero_init_coupling(dim, hidden, rng, swap=bool(i % 2)),
        ))
    return FlowParameters(blocks=blocks, dim=dim)


def identity_flow_params(dim: int, n_blocks: int, hidden: int | None = None) -> FlowParameters:
    """All-identity flow (useful for layer-contract tests)."""
    hidden = hidden if hidden is not None else dim
    half = dim // 2
    blocks = []
    for i in range(n_blocks):
        coupling = CouplingParams(
            w1=np.zeros((half, hidden)), b1=np.zeros(hidden),
            w2=np.zeros((hidden, hidden)), b2=np.zeros(hidden),
            w3=np.zeros((hidden, hidden)), b3=np.zeros(hidden),
            w4=np.zeros((hidden, 2 * half)), b4=np.zeros(2 * half),
            swap=bool(i % 2),
        )
        blocks.append(FlowBlockParams(identity_actnorm(dim), identity_invlinear(dim), coupling))
    return FlowParameters(blocks=blocks, dim=dim)


# ---------------------------------------------------------------------------
# Layer application
# ---------------------------------------------------------------------------

def actnorm_init(batch: np.ndarray) -> ActNormParams:
    """Data-dependent init: the layer maps the init batch to per-channel
    mean 0, variance 1."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] < 2:
        raise ValueError("actnorm init needs a batch of at least 2 vectors")
    mean = batch.mean(axis=0)
    std = batch.std(axis=0)
    bad = np.flatnonzero(std <= ACTNORM_MIN_STD)
    if bad.size:
        raise DegenerateChannelError(f"constant channel(s) {bad.tolist()} in actnorm init batch")
    return ActNormParams(log_scale=-np.log(std), bias=-mean, initialized=True)


def actnorm_apply(x, p: ActNormParams, inverse: bool = False):
    """Forward y = (x + bias) * exp(log_scale); logdet = sum(log_scale)."""
    if not p.initialized:
        raise UninitializedFlowError("actnorm applied before initialization")
    logdet = ad.sum_(p.log_scale)
    if not inverse:
        return ad.mul(ad.add(x, p.bias), ad.exp(p.log_scale)), logdet
    y = ad.add(ad.mul(x, ad.exp(ad.mul(p.log_scale, -1.0))), ad.mul(p.bias, -1.0))
    return y, ad.mul(logdet, -1.0)


def _invlinear_matrix(p: InvLinearParams):
    """W = P L (U + diag(sign * exp(log_s))) from the stored factors."""
    d = p.log_s.shape[0] if not ad.is_var(p.log_s) else p.log_s.value.shape[0]
    lmask = np.tril(np.ones((d, d)), -1)
    umask = np.triu(np.ones((d, d)), 1)
    eye = np.eye(d)
    l_full = ad.add(ad.mul(p.lower, lmask), eye)
    s = ad.mul(np.asarray(p.sign_s, dtype=np.float64), ad.exp(p.log_s))
    u_full = ad.add(ad.mul(p.upper_strict, umask), ad.mul(eye, s))
    w = ad.matmul(l_full, u_full)
    return ad.take(w, (p.perm, slice(None)))  # row permutation = left-multiply by P


def invlinear_apply(x, p: InvLinearParams, inverse: bool = False):
    """Forward y = W x (rows as vectors: y = x W^T); inverse solves via the
    stored triangular factors. logdet = +/- sum(log_s)."""
    logdet = ad.sum_(p.log_s)
    if not inverse:
        w = _invlinear_matrix(p)
        return ad.matmul(x, ad.transpose(w)), logdet
    # inference-only direction: plain numpy triangular solves
    y = ad.value_of(x)
    single = y.ndim == 1
    rhs = (y[None, :] if single else y).T.copy()       # (d, n)
    rhs = rhs[np.argsort(p.perm)]                      # undo the row take
    d = rhs.shape[0]
    lower = np.tril(np.asarray(p.lower, dtype=np.float64), -1) + np.eye(d)
    s = np.asarray(p.sign_s, dtype=np.float64) * np.exp(np.asarray(p.log_s, dtype=np.float64))
    upper = np.triu(np.asarray(p.upper_strict, dtype=np.float64), 1) + np.diag(s)
    for k in range(1, d):                              # L t = P^T y
        rhs[k] -= lower[k, :k] @ rhs[:k]
    for k in range(d - 1, -1, -1):                     # U x = t
        rhs[k] = (rhs[k] - upper[k, k + 1:] @ rhs[k + 1:]) / upper[k, k]
    out = rhs.T[0] if single else rhs.T.copy()
    return out, -np.sum(np.asarray(p.log_s, dtype=np.float64))


def _coupling_net(a, p: CouplingParams):
    h = ad.tanh(ad.add(ad.matmul(a, p.w1), p.b1))
    h = ad.tanh(ad.add(ad.matmul(h, p.w2), p.b2))
    h = ad.tanh(ad.add(ad.matmul(h, p.w3), p.b3))
    out = ad.add(ad.matmul(h, p.w4), p.b4)
    half = ad.value_of(out).shape[-1] // 2
    ls_raw = ad.take(out, (..., slice(0, half)))
    shift = ad.take(out, (..., slice(half, 2 * half)))
    return ad.clip(ls_raw, -COUPLING_CLAMP, COUPLING_CLAMP), shift


def coupling_apply(x, p: CouplingParams, inverse: bool = False):
    """Affine coupling on alternating halves; logdet = sum of clamped
    log-scales (per sample for batched input)."""
    d = ad.value_of(x).shape[-1]
    if d % 2 != 0:
        raise ValueError("coupling needs an even dimension")
    half = d // 2
    first = ad.take(x, (..., slice(0, half)))
    second = ad.take(x, (..., slice(half, d)))
    anchor, moved = (second, first) if p.swap else (first, second)
    ls, t = _coupling_net(anchor, p)
    if not inverse:
        moved_out = ad.add(ad.mul(moved, ad.exp(ls)), t)
        logdet = ad.sum_(ls, axis=-1)
    else:
        moved_out = ad.mul(ad.add(moved, ad.mul(t, -1.0)), ad.exp(ad.mul(ls, -1.0)))
        logdet = ad.mul(ad.sum_(ls, axis=-1), -1.0)
    halves = (moved_out, anchor) if p.swap else (anchor, moved_out)
    return ad.concat(halves, axis=-1), logdet


def flow_forward(x, fp: FlowParameters):
    """Speaker representation -> semantic representation with total logdet."""
    z = x
    total = 0.0
    for blk in fp.blocks:
        z, ld = actnorm_apply(z, blk.actnorm)
        total = ad.add(total, ld)
        z, ld = invlinear_apply(z, blk.invlinear)
        total = ad.add(total, ld)
        z, ld = coupling_apply(z, blk.coupling)
        total = ad.add(total, ld)
    return z, total


def flow_inverse(z: np.ndarray, fp: FlowParameters) -> np.ndarray:
    """Semantic representation -> speaker representation (exact inverse)."""
    x = np.asarray(z, dtype=np.float64)
    for blk in reversed(fp.blocks):
        x, _ = coupling_apply(x, blk.coupling, inverse=True)
        x, _ = invlinear_apply(x, blk.invlinear, inverse=True)
        x, _ = actnorm_apply(x, blk.actnorm, inverse=True)
        x = ad.value_of(x)
    return x


def initialize_actnorms(fp: FlowParameters, batch: np.ndarray) -> None:
    """Data-dependent init of every uninitialized actnorm, sequentially:
    each layer sees the batch as transformed by everything before it."""
    y = np.asarray(batch, dtype=np.float64)
    for blk in fp.blocks:
        if not blk.actnorm.initialized:
            fitted = actnorm_init(y)
            blk.actnorm.log_scale = fitted.log_scale
            blk.actnorm.bias = fitted.bias
            blk.actnorm.initialized = True
        y, _ = actnorm_apply(y, blk.actnorm)
        y, _ = invlinear_apply(y, blk.invlinear)
        y, _ = coupling_apply(y, blk.coupling)
