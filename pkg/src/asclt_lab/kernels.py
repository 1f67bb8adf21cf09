"""Discrete Wiener-chaos kernel algebra for f_n = N_n^{-1} sum_k eps_k^{otimes q}.

The ambient (non-orthonormal) scalar product is <eps_k, eps_l> = rho(k-l).
With N_n = sqrt(E V_n^2), where V_n is the unnormalized Hermite sum, every
regime shares the same kernel normalization: q! ||f_n||^2 = 1.

The contraction norm reduces to a quartic lag sum

    S(q, r, n) = sum_{i,j,k,l} rho(k-l)^r rho(i-j)^r rho(k-i)^{q-r} rho(l-j)^{q-r}
               = tr((P Q)^2),  P = Toeplitz(rho^r), Q = Toeplitz(rho^{q-r}),

so ||f_n (x)_r f_n||^2 = S / (E V_n^2)^2. Three exact evaluators are kept:
an O(n^4) brute force (oracle, n <= 12), the O(n^3) multiplicity-count form
over lag triples (a, b, c), and the production path via the trace identity
(dense matmul for small n, zero-padded FFT block columns beyond). A lag-
truncated variant returns a certified remainder bound.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .covariance import CovarianceModel, model_to_json, rho_many

__all__ = [
    "ContractionResult",
    "DenseKernel",
    "KernelStats",
    "hermite_sum_variance",
    "v2_prefix",
    "contraction_norm_sq",
    "kernel_inner",
    "compute_kernel_stats",
    "kernel_stats_to_json",
    "dense_kernel",
    "diagonal_kernel",
    "dense_contract",
    "dense_inner",
    "dense_norm_sq",
    "gram_matrix",
]

_BRUTEFORCE_MAX_N = 12
_COUNTS_MAX_N = 128
_DENSE_MAX_N = 1 << 11
_FFT_BLOCK_COLS = 128
_DENSE_COEFF_BUDGET = 10**6


def hermite_sum_variance(model: CovarianceModel, q: int, n: int) -> float:
    """E[V_n^2] = q! sum_{|r|<n} (n - |r|) rho(r)^q, exact in O(n)."""
    if q < 1 or n < 1:
        raise ValueError("q and n must be >= 1")
    p = rho_many(model, np.arange(1, n)) ** q
    acc = n + 2.0 * float(np.sum((n - np.arange(1, n)) * p))
    return math.factorial(q) * acc


def v2_prefix(model: CovarianceModel, q: int, n: int) -> np.ndarray:
    """E[V_k^2] for k = 1..n in one O(n) pass."""
    if q < 1 or n < 1:
        raise ValueError("q and n must be >= 1")
    p = rho_many(model, np.arange(1, n)) ** q
    cs1 = np.concatenate([[0.0], np.cumsum(p)])          # sum_{r<=m} rho^q
    cs2 = np.concatenate([[0.0], np.cumsum(np.arange(1, n) * p)])
    k = np.arange(1, n + 1, dtype=float)
    return math.factorial(q) * (k + 2.0 * (k * cs1[: n] - cs2[: n]))


@dataclass(frozen=True)
class ContractionResult:
    value: float              # ||f_n (x)_r f_n||^2
    raw_sum: float            # the quartic lag sum S
    truncation_bound: float   # certified bound on the neglected part of value
    method: str
    L: int | None = None


def _powers(model, s: int, n: int, L: int | None = None) -> np.ndarray:
    """rho(m)^s for m = 0..n-1, optionally zeroed beyond lag L."""
    g = rho_many(model, np.arange(n)) ** s
    if L is not None and L + 1 < n:
        g[L + 1:] = 0.0
    return g


def _contract_sum_bruteforce(pr: np.ndarray, pqr: np.ndarray, n: int) -> float:
    full_r = np.concatenate([pr[::-1], pr[1:]])     # index by lag + (n-1)
    full_q = np.concatenate([pqr[::-1], pqr[1:]])
    off = n - 1
    total = 0.0
    for k in range(n):
        for l in range(n):
            a = full_r[k - l + off]
            if a == 0.0:
                continue
            for i in range(n):
                b = full_q[k - i + off]
                if b == 0.0:
                    continue
                for j in range(n):
                    total += a * full_r[i - j + off] * b * full_q[l - j + off]
    return total


def _lag_triple_count(n: int, a: int, b: int, c: int) -> int:
    # Free index i; the tuple is (k, l, i, j) = (i+c, i+c-a, i, i-b).
    hi = min(n, n - c, n - c + a, n + b)
    lo = max(1, 1 - c, 1 - c + a, 1 + b)
    return max(0, hi - lo + 1)


def _contract_sum_counts(pr: np.ndarray, pqr: np.ndarray, n: int) -> float:
    lags = np.arange(-(n - 1), n)
    full_r = np.concatenate([pr[::-1], pr[1:]])
    full_q = np.concatenate([pqr[::-1], pqr[1:]])
    off = n - 1
    b_grid, c_grid = np.meshgrid(lags, lags, indexing="ij")
    total = 0.0
    for a in lags:
        # rho(l-j)^{q-r} = rho(c + b - a)^{q-r}; out-of-window lags vanish.
        d = c_grid + b_grid - a
        inside = np.abs(d) <= n - 1
        hi = np.minimum.reduce(
            [np.full_like(c_grid, n), n - c_grid, n - c_grid + a, n + b_grid]
        )
        lo = np.maximum.reduce(
            [np.ones_like(c_grid), 1 - c_grid, 1 - c_grid + a, 1 + b_grid]
        )
        counts = np.maximum(0, hi - lo + 1)
        term = (
            full_r[a + off]
            * full_r[b_grid + off]
            * full_q[c_grid + off]
            * np.where(inside, full_q[np.clip(d, -(n - 1), n - 1) + off], 0.0)
        )
        total += float(np.sum(term * counts))
    return total


def _toeplitz(first_col: np.ndarray) -> np.ndarray:
    from scipy.linalg import toeplitz

    return toeplitz(first_col)


def _contract_sum_dense(pr: np.ndarray, pqr: np.ndarray, n: int) -> float:
    P = _toeplitz(pr)
    Q = _toeplitz(pqr)
    M = P @ Q
    return float(np.sum(M * M.T))


def _toeplitz_spectrum(g: np.ndarray, n: int) -> np.ndarray:
    # Size-2n circulant embedding of the symmetric Toeplitz with first col g.
    col = np.zeros(2 * n)
    col[:n] = g
    col[n + 1:] = g[1:][::-1]
    return np.fft.rfft(col)


def _toeplitz_apply(spec: np.ndarray, X: np.ndarray, n: int) -> np.ndarray:
    Xp = np.zeros((2 * n, X.shape[1]))
    Xp[:n] = X
    return np.fft.irfft(np.fft.rfft(Xp, axis=0) * spec[:, None], n=2 * n, axis=0)[:n]


def _toeplitz_columns(g: np.ndarray, cols: np.ndarray, n: int) -> np.ndarray:
    full = np.concatenate([g[::-1], g[1:]])
    idx = np.arange(n)[:, None] - cols[None, :] + (n - 1)
    return full[idx]


def _contract_sum_fft(pr: np.ndarray, pqr: np.ndarray, n: int) -> float:
    spec_p = _toeplitz_spectrum(pr, n)
    spec_q = _toeplitz_spectrum(pqr, n)
    same = np.array_equal(pr, pqr)
    total = 0.0
    for start in range(0, n, _FFT_BLOCK_COLS):
        cols = np.arange(start, min(start + _FFT_BLOCK_COLS, n))
        qcols = _toeplitz_columns(pqr, cols, n)
        A = _toeplitz_apply(spec_p, qcols, n)          # (PQ)[:, cols]
        if same:
            B = A
        else:
            pcols = _toeplitz_columns(pr, cols, n)
            B = _toeplitz_apply(spec_q, pcols, n)      # (QP)[:, cols]
        total += float(np.sum(A * B))
    return total


def _window_abs_sums(model, s: int, n: int, L: int) -> tuple[float, float]:
    """(sum_{|m|<n} |rho|^s, sum_{L<|m|<n} |rho|^s) on the finite window."""
    a = np.abs(rho_many(model, np.arange(1, n))) ** s
    full = 1.0 + 2.0 * float(np.sum(a))
    tail = 2.0 * float(np.sum(a[L:])) if L < n - 1 else 0.0
    return full, tail


def _truncation_bound(model, q, r, n, L) -> float:
    # Union bound over which of the four lag factors exceeds L, Hoelder on
    # the paired factor, uniform window sums on the rest.
    A, _ = _window_abs_sums(model, q, n, L)
    B_r, T_r = _window_abs_sums(model, r, n, L)
    B_qr, T_qr = _window_abs_sums(model, q - r, n, L)
    return 2.0 * n * A * (T_r * B_qr + T_qr * B_r)


def contraction_norm_sq(
    model: CovarianceModel,
    q: int,
    r: int,
    n: int,
    method: str = "auto",
    L: int | None = None,
    rel_tol: float = 1e-6,
) -> ContractionResult:
    """||f_n (x)_r f_n||^2 with the requested evaluation strategy.

    method: "auto" (exact: dense matmul up to n=2^11, FFT blocks beyond),
    "bruteforce" (n <= 12), "lagsum" (alias for the exact production path),
    "lagsum_counts" (the O(n^3) multiplicity-count form, n <= 128),
    "truncated" (lags capped at L, certified remainder; L doubles from 1
    until the bound is <= rel_tol * value when L is not given).
    """
    if not 1 <= r <= q - 1:
        raise ValueError(f"r must be in 1..q-1, got r={r}, q={q}")
    if n < 1:
        raise ValueError("n must be >= 1")
    den = hermite_sum_variance(model, q, n) ** 2

    if method == "truncated":
        return _truncated_contraction(model, q, r, n, L, rel_tol, den)

    pr = _powers(model, r, n)
    pqr = _powers(model, q - r, n)
    if method == "bruteforce":
        if n > _BRUTEFORCE_MAX_N:
            raise ValueError(f"bruteforce capped at n={_BRUTEFORCE_MAX_N}")
        S = _contract_sum_bruteforce(pr, pqr, n)
    elif method == "lagsum_counts":
        if n > _COUNTS_MAX_N:
            raise ValueError(f"lagsum_counts capped at n={_COUNTS_MAX_N}")
        S = _contract_sum_counts(pr, pqr, n)
    elif method in ("auto", "lagsum"):
        if n <= _DENSE_MAX_N:
            S = _contract_sum_dense(pr, pqr, n)
            method = "lagsum"
        else:
            S = _contract_sum_fft(pr, pqr, n)
            method = "lagsum"
    else:
        raise ValueError(f"unknown method {method!r}")
    return ContractionResult(S / den, S, 0.0, method, None)


def _truncated_contraction(model, q, r, n, L, rel_tol, den):
    def evaluate(cap: int) -> ContractionResult:
        pr = _powers(model, r, n, cap)
        pqr = _powers(model, q - r, n, cap)
        if n <= _DENSE_MAX_N:
            S = _contract_sum_dense(pr, pqr, n)
        else:
            S = _contract_sum_fft(pr, pqr, n)
        bound = _truncation_bound(model, q, r, n, cap) / den
        return ContractionResult(S / den, S, bound, "truncated", cap)

    if L is not None:
        if not 1 <= L:
            raise ValueError("truncation lag L must be >= 1")
        return evaluate(min(L, n - 1))
    cap = 1
    while True:
        res = evaluate(cap)
        if res.truncation_bound <= rel_tol * abs(res.value) or cap >= n - 1:
            return res
        cap *= 2


def pair_lag_sum(model: CovarianceModel, q: int, k: int, l: int) -> float:
    """sum_{i<=k, j<=l} rho(i-j)^q via lag multiplicities, O(k+l)."""
    if k < 1 or l < 1:
        raise ValueError("k and l must be >= 1")
    if q < 1:
        raise ValueError("q must be >= 1")
    lags = np.arange(-(l - 1), k)
    counts = np.minimum(k, l + lags) - np.maximum(1, 1 + lags) + 1
    return float(np.sum(counts * rho_many(model, lags) ** q))


def kernel_inner(model: CovarianceModel, q: int, k: int, l: int) -> float:
    """<f_k, f_l> = (E V_k^2 E V_l^2)^{-1/2} sum_{i<=k, j<=l} rho(i-j)^q."""
    den = math.sqrt(
        hermite_sum_variance(model, q, k) * hermite_sum_variance(model, q, l)
    )
    return pair_lag_sum(model, q, k, l) / den


@dataclass(frozen=True)
class KernelStats:
    model: CovarianceModel
    q: int
    n: int
    sigma_n: float
    contraction_norms: dict[int, float]
    inner: dict[tuple[int, int], float] | None
    method: str
    truncation_bound: float


def compute_kernel_stats(
    model: CovarianceModel,
    q: int,
    n: int,
    method: str = "auto",
    L: int | None = None,
    pair_grid: list[tuple[int, int]] | None = None,
) -> KernelStats:
    norms: dict[int, float] = {}
    worst_bound = 0.0
    used = method
    for r in range(1, q):
        res = contraction_norm_sq(model, q, r, n, method=method, L=L)
        norms[r] = res.value
        worst_bound = max(worst_bound, res.truncation_bound)
        used = res.method
    inner = None
    if pair_grid is not None:
        inner = {(k, l): kernel_inner(model, q, k, l) for k, l in pair_grid}
    sigma_n = math.sqrt(hermite_sum_variance(model, q, n) / n)
    return KernelStats(model, q, n, sigma_n, norms, inner, used, worst_bound)


def kernel_stats_to_json(stats: KernelStats) -> str:
    return json.dumps(
        {
            "model": json.loads(model_to_json(stats.model)),
            "q": stats.q,
            "n": stats.n,
            "sigma_n": stats.sigma_n,
            "contraction_norms": {str(r): v for r, v in stats.contraction_norms.items()},
            "inner": (
                None
                if stats.inner is None
                else [[k, l, v] for (k, l), v in sorted(stats.inner.items())]
            ),
            "method": stats.method,
            "truncation_bound": stats.truncation_bound,
        },
        sort_keys=True,
    )


# ---------------------------------------------------------------------------
# Dense test-scale kernels under the Gram metric.


def gram_matrix(model: CovarianceModel, dim: int) -> np.ndarray:
    return _toeplitz(rho_many(model, np.arange(dim)))


@dataclass(frozen=True, eq=False)
class DenseKernel:
    """Order-q tensor over indices {1..dim} with metric <e_k,e_l> = rho(k-l).

    Constructed kernels are symmetrized; contraction outputs are kept raw
    (they are only block-symmetric), which is what the norm identities use.
    """

    model: CovarianceModel
    q: int
    coeffs: np.ndarray

    @property
    def dim(self) -> int:
        return self.coeffs.shape[0] if self.q > 0 else 0


def _symmetrize(t: np.ndarray) -> np.ndarray:
    q = t.ndim
    if q <= 1:
        return t
    acc = np.zeros_like(t)
    for perm in itertools.permutations(range(q)):
        acc += np.transpose(t, perm)
    return acc / math.factorial(q)


def dense_kernel(model: CovarianceModel, coeffs) -> DenseKernel:
    t = np.asarray(coeffs, dtype=float)
    q = t.ndim
    if t.size > _DENSE_COEFF_BUDGET:
        raise ValueError("dense kernel exceeds the test-scale budget")
    if q >= 1 and len(set(t.shape)) != 1:
        raise ValueError("coefficient tensor must be cubical")
    return DenseKernel(model, q, _symmetrize(t))


def diagonal_kernel(model: CovarianceModel, q: int, n: int) -> DenseKernel:
    """f_n as a dense tensor: (E V_n^2)^{-1/2} sum_k e_k^{otimes q}."""
    t = np.zeros((n,) * q)
    idx = (np.arange(n),) * q
    t[idx] = 1.0 / math.sqrt(hermite_sum_variance(model, q, n))
    return DenseKernel(model, q, t)


def _apply_gram(t: np.ndarray, G: np.ndarray, axes: list[int]) -> np.ndarray:
    for ax in axes:
        t = np.moveaxis(np.tensordot(t, G, axes=([ax], [0])), -1, ax)
    return t


def dense_contract(f: DenseKernel, g: DenseKernel, r: int) -> DenseKernel | float:
    """f (x)_r g: contract the last r slots of f with the first r of g."""
    if f.model != g.model:
        raise ValueError("kernels live over different covariance models")
    if not 0 <= r <= min(f.q, g.q):
        raise ValueError(f"r must be in 0..min(p,q), got {r}")
    if f.q and g.q and f.dim != g.dim:
        raise ValueError("kernels have different index sets")
    out_order = f.q + g.q - 2 * r
    if f.dim ** max(out_order, 1) > _DENSE_COEFF_BUDGET:
        raise ValueError("contraction output exceeds the test-scale budget")
    if r == 0:
        t = np.tensordot(f.coeffs, g.coeffs, axes=0)
        return DenseKernel(f.model, out_order, t)
    G = gram_matrix(f.model, f.dim)
    gg = _apply_gram(g.coeffs, G, list(range(r)))
    t = np.tensordot(f.coeffs, gg, axes=(list(range(f.q - r, f.q)), list(range(r))))
    if out_order == 0:
        return float(t)
    return DenseKernel(f.model, out_order, t)


def dense_inner(f: DenseKernel, g: DenseKernel) -> float:
    """<f, g> under the full Gram metric (orders must match)."""
    if f.q != g.q:
        raise ValueError("inner product needs kernels of equal order")
    if f.q == 0:
        return float(f.coeffs * g.coeffs)
    G = gram_matrix(f.model, f.dim)
    gg = _apply_gram(g.coeffs, G, list(range(g.q)))
    return float(np.tensordot(f.coeffs, gg, axes=f.q))


def dense_norm_sq(f: DenseKernel) -> float:
    return dense_inner(f, f)
