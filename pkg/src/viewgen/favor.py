"""Causal self-attention: exact masked softmax and FAVOR+ prefix-sum attention.

The FAVOR+ path never builds an S x S matrix.  A single left-to-right scan
keeps the running numerator ``P_i = P_{i-1} + phi(k_i) v_i^T`` and the
running denominator ``s_i = s_{i-1} + phi(k_i)``; row ``i`` of the output is
``phi(q_i) P_i / phi(q_i) . s_i``.

Feature maps are max-stabilised per row.  The query stabiliser cancels in
the ratio.  The key stabilisers do not, so the scan folds them back in
against a running maximum (rescaling the state whenever the maximum grows),
which reproduces the unstabilised estimator exactly while depending only on
positions ``<= i``.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numba
import numpy as np

from .tensor import Tensor, _make, exp, matmul, softmax, tsum

DEFAULT_EPS = 1e-6


def _configure_threads() -> None:
    if "NUMBA_THREADING_LAYER" not in os.environ:
        numba.config.THREADING_LAYER = "workqueue"
    n = os.environ.get("VXG_THREADS")
    if n:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


_configure_threads()


@dataclass(frozen=True)
class RandomFeatureMap:
    omega: np.ndarray  # (r, d)
    seed: int
    orthogonal: bool = True

    @property
    def r(self) -> int:
        return self.omega.shape[0]

    @property
    def d(self) -> int:
        return self.omega.shape[1]


def default_feature_count(d_head: int) -> int:
    """2 * d * ceil(ln d), at least d."""
    return max(d_head, 2 * d_head * math.ceil(math.log(max(d_head, 2))))


def _gram_schmidt(block: np.ndarray, tol: float = 1e-8) -> np.ndarray | None:
    """Orthonormalise rows (two passes); None when the block is rank deficient."""
    out = np.zeros_like(block)
    for i, row in enumerate(block):
        vec = row.copy()
        for _ in range(2):
            vec -= out[:i].T @ (out[:i] @ vec)
        norm = np.linalg.norm(vec)
        if norm < tol * max(1.0, np.linalg.norm(row)):
            return None
        out[i] = vec / norm
    return out


def draw_orthogonal_features(d: int, r: int, seed: int, orthogonal: bool = True) -> RandomFeatureMap:
    """Random feature directions, orthogonal within each block of ``d`` rows.

    Each row is rescaled to an independent chi_d norm so that rows are
    marginally distributed like standard Gaussian vectors.
    """
    if d < 1 or r < 1:
        raise ValueError(f"feature map needs d, r >= 1 (got d={d}, r={r})")
    if not orthogonal:
        omega = np.random.default_rng([seed, 0]).standard_normal((r, d))
        return RandomFeatureMap(omega, seed, False)
    blocks = []
    for b in range(math.ceil(r / d)):
        sub = 0
        while True:
            q = _gram_schmidt(np.random.default_rng([seed, 1, b, sub]).standard_normal((d, d)))
            if q is not None:
                break
            sub += 1
        blocks.append(q)
    omega = np.vstack(blocks)[:r]
    norms = np.linalg.norm(np.random.default_rng([seed, 2]).standard_normal((r, d)), axis=1)
    return RandomFeatureMap(omega * norms[:, None], seed, True)


def feature_map(x: Tensor, rf: RandomFeatureMap) -> tuple[Tensor, np.ndarray]:
    """Positive softmax-kernel features exp(w.x - |x|^2/2 - c)/sqrt(r).

    Returns the features and the per-row stabiliser ``c`` (max over features
    of the exponent), which is treated as a constant by the tape.
    """
    if x.shape[-1] != rf.d:
        raise ValueError(f"feature map expects dimension {rf.d}, got {x.shape[-1]}")
    if not np.all(np.isfinite(x.data)):
        raise FloatingPointError("non-finite input to feature map")
    expo = matmul(x, Tensor(rf.omega.T)) - tsum(x * x, axis=-1, keepdims=True) * 0.5
    c = expo.data.max(axis=-1)
    return exp(expo - c[..., None]) * (1.0 / math.sqrt(rf.r)), c


def causal_mask(s: int) -> np.ndarray:
    """Additive mask: 0 where row i may attend column j (j <= i), -inf otherwise."""
    return np.triu(np.full((s, s), -np.inf), k=1)


def exact_causal_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(d_k) + M) V over the last two axes."""
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise ValueError(f"attention shapes disagree: {q.shape}, {k.shape}, {v.shape}")
    s, d = q.shape[-2:]
    scores = matmul(q, k.transpose()) * (1.0 / math.sqrt(d)) + causal_mask(s)
    return matmul(softmax(scores, axis=-1), v)


def prefix_sum_numerator(phi_q: np.ndarray, phi_k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Unnormalised scan AV_i = phi_q(q_i) P_i with P_i = P_{i-1} + phi_k(k_i) v_i^T."""
    s, r = phi_k.shape[-2:]
    state = np.zeros(phi_k.shape[:-2] + (r, v.shape[-1]))
    out = np.empty(phi_q.shape[:-1] + (v.shape[-1],))
    for i in range(s):
        state = state + phi_k[..., i, :, None] * v[..., i, None, :]
        out[..., i, :] = np.einsum("...r,...rd->...d", phi_q[..., i, :], state)
    return out


@numba.njit(parallel=True, cache=True)
def _scan_forward(phq, phk, ck, v, eps):
    n, s, r = phq.shape
    dv = v.shape[2]
    out = np.empty((n, s, dv))
    den = np.empty((n, s))
    mrun = np.empty((n, s))
    clamped = np.zeros((n, s), dtype=np.bool_)
    for b in numba.prange(n):
        state = np.zeros((r, dv))
        norm = np.zeros(r)
        m = -np.inf
        for i in range(s):
            c = ck[b, i]
            if c > m:
                scale = math.exp(m - c) if m > -np.inf else 0.0
                for f in range(r):
                    norm[f] *= scale
                    for e in range(dv):
                        state[f, e] *= scale
                m = c
            w = math.exp(c - m)
            for f in range(r):
                kf = w * phk[b, i, f]
                norm[f] += kf
                for e in range(dv):
                    state[f, e] += kf * v[b, i, e]
            dsum = 0.0
            for f in range(r):
                dsum += phq[b, i, f] * norm[f]
            if dsum < eps:
                dsum = eps
                clamped[b, i] = True
            for e in range(dv):
                acc = 0.0
                for f in range(r):
                    acc += phq[b, i, f] * state[f, e]
                out[b, i, e] = acc / dsum
            den[b, i] = dsum
            mrun[b, i] = m
    return out, den, mrun, clamped


@numba.njit(parallel=True, cache=True)
def _scan_backward(phq, phk, ck, v, out, den, mrun, clamped, g):
    n, s, r = phq.shape
    dv = v.shape[2]
    dq = np.empty((n, s, r))
    dk = np.empty((n, s, r))
    dvv = np.empty((n, s, dv))
    for b in numba.prange(n):
        # forward re-scan: gradient w.r.t. query features
        state = np.zeros((r, dv))
        norm = np.zeros(r)
        m = -np.inf
        for i in range(s):
            c = ck[b, i]
            if c > m:
                scale = math.exp(m - c) if m > -np.inf else 0.0
                for f in range(r):
                    norm[f] *= scale
                    for e in range(dv):
                        state[f, e] *= scale
                m = c
            w = math.exp(c - m)
            for f in range(r):
                kf = w * phk[b, i, f]
                norm[f] += kf
                for e in range(dv):
                    state[f, e] += kf * v[b, i, e]
            go = 0.0
            if not clamped[b, i]:
                for e in range(dv):
                    go += g[b, i, e] * out[b, i, e]
            inv = 1.0 / den[b, i]
            for f in range(r):
                acc = 0.0
                for e in range(dv):
                    acc += state[f, e] * g[b, i, e]
                dq[b, i, f] = (acc - norm[f] * go) * inv
        # reverse scan: gradients w.r.t. key features and values
        gs = np.zeros((r, dv))
        hs = np.zeros(r)
        for j in range(s - 1, -1, -1):
            if j < s - 1:
                scale = math.exp(mrun[b, j] - mrun[b, j + 1])
                for f in range(r):
                    hs[f] *= scale
                    for e in range(dv):
                        gs[f, e] *= scale
            inv = 1.0 / den[b, j]
            go = 0.0
            if not clamped[b, j]:
                for e in range(dv):
                    go += g[b, j, e] * out[b, j, e]
            for f in range(r):
                a = phq[b, j, f] * inv
                hs[f] += a * go
                for e in range(dv):
                    gs[f, e] += a * g[b, j, e]
            w = math.exp(ck[b, j] - mrun[b, j])
            for f in range(r):
                acc = 0.0
                for e in range(dv):
                    acc += gs[f, e] * v[b, j, e]
                dk[b, j, f] = w * (acc - hs[f])
            for e in range(dv):
                acc = 0.0
                for f in range(r):
                    acc += gs[f, e] * phk[b, j, f]
                dvv[b, j, e] = w * acc
    return dq, dk, dvv


def favor_scan(phi_q: Tensor, phi_k: Tensor, key_stab: np.ndarray, v: Tensor,
               eps: float = DEFAULT_EPS, stats: dict | None = None) -> Tensor:
    """Normalised causal prefix-sum attention over precomputed features.

    ``phi_k * exp(key_stab)`` are the true key features; see module notes.
    """
    lead = phi_q.shape[:-2]
    s, r = phi_q.shape[-2:]
    dv = v.shape[-1]
    flat = lambda a, last: np.ascontiguousarray(a.reshape((-1, s, last)))
    pq, pk, vv = flat(phi_q.data, r), flat(phi_k.data, r), flat(v.data, dv)
    ck = np.ascontiguousarray(key_stab.reshape(-1, s))
    out, den, mrun, clamped = _scan_forward(pq, pk, ck, vv, eps)
    if stats is not None:
        stats["clamped"] = stats.get("clamped", 0) + int(clamped.sum())

    def backward(g):
        dq, dk, dvv = _scan_backward(pq, pk, ck, vv, out, den, mrun, clamped,
                                     flat(np.asarray(g), dv))
        return dq.reshape(phi_q.shape), dk.reshape(phi_k.shape), dvv.reshape(v.shape)

    return _make(out.reshape(lead + (s, dv)), (phi_q, phi_k, v), backward)


def favor_causal_attention(q: Tensor, k: Tensor, v: Tensor, rf: RandomFeatureMap,
                           eps: float = DEFAULT_EPS, stats: dict | None = None) -> Tensor:
    """FAVOR+ approximation of causal softmax attention over the last two axes.

    Queries are scaled by 1/sqrt(d_k) before the feature map so both paths
    approximate the same operator.  Denominators below ``eps`` are clamped
    and counted in ``stats["clamped"]``.
    """
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise ValueError(f"attention shapes disagree: {q.shape}, {k.shape}, {v.shape}")
    phi_q, _ = feature_map(q * (1.0 / math.sqrt(q.shape[-1])), rf)
    phi_k, ck = feature_map(k, rf)
    return favor_scan(phi_q, phi_k, ck, v, eps, stats)
