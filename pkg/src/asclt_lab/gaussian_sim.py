"""Exact sampling of stationary Gaussian sequences and fBm on dyadic grids.

Sampling is exact in distribution: stationary paths come from circulant
embedding of the covariance (eigenvalues by FFT, size 2(n-1)), with a dense
Cholesky fallback for short paths or failed embeddings. All randomness is
derived from a counter-based generator keyed by (master_seed, replicate_id),
and uniform-to-normal conversion is pinned to an explicit polar or inverse
transform built on the raw 64-bit stream, so identical seed tuples give
bit-identical paths on any platform and under any call order.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import ndtri

from .covariance import CovarianceModel, model_from_json, model_to_json, rho_many

__all__ = [
    "EmbeddingError",
    "NormalStream",
    "GaussianPath",
    "FbmGrid",
    "sample_stationary",
    "sample_ensemble",
    "sample_fbm_grid",
    "empirical_autocovariance",
    "dump_path_binary",
    "load_path_binary",
    "dump_path_csv",
]

# Minimum pairs of uniforms consumed per polar rejection block. The block
# schedule is a deterministic function of the request sizes, so it is part
# of the reproducibility contract; do not change without versioning.
_POLAR_MIN_PAIRS = 256
_HEADER_PREFIX_BYTES = 32
_CHOLESKY_MAX_N = 2048
_EIGEN_CLAMP = -1e-10


class EmbeddingError(RuntimeError):
    """The covariance admits no valid sampler (embedding and fallback failed)."""


class NormalStream:
    """Deterministic standard-normal stream for one (master_seed, replicate_id).

    Uniforms are built from the raw Philox 64-bit output as
    ((word >> 11) + 0.5) * 2^-53, strictly inside (0, 1). The normal
    transform is pinned by `method`:

    * "polar": Marsaglia polar rejection in blocks sized by the remaining
      request; leftovers are buffered, never discarded.
    * "inverse": one uniform per normal through the inverse normal CDF.
    """

    def __init__(self, master_seed: int, replicate_id: int, method: str = "polar"):
        if method not in ("polar", "inverse"):
            raise ValueError(f"unknown normal method {method!r}")
        self.method = method
        self._bg = np.random.Philox(
            np.random.SeedSequence([int(master_seed), int(replicate_id)])
        )
        self._buf: list[np.ndarray] = []
        self._buffered = 0

    def _uniforms(self, count: int) -> np.ndarray:
        raw = self._bg.random_raw(count)
        return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53

    def _polar_block(self, pairs: int) -> np.ndarray:
        v = 2.0 * self._uniforms(2 * pairs) - 1.0
        v1, v2 = v[0::2], v[1::2]
        s = v1 * v1 + v2 * v2
        keep = (s > 0.0) & (s < 1.0)
        s = s[keep]
        f = np.sqrt(-2.0 * np.log(s) / s)
        out = np.empty(2 * s.size)
        out[0::2] = v1[keep] * f
        out[1::2] = v2[keep] * f
        return out

    def normals(self, n: int) -> np.ndarray:
        if n < 0:
            raise ValueError("n must be >= 0")
        if n == 0:
            return np.empty(0)
        if self.method == "inverse":
            return ndtri(self._uniforms(n))
        while self._buffered < n:
            # Acceptance rate is pi/4, i.e. ~1.57 normals per pair.
            shortfall = n - self._buffered
            pairs = max(_POLAR_MIN_PAIRS, (7 * shortfall) // 10 + 16)
            block = self._polar_block(pairs)
            self._buf.append(block)
            self._buffered += block.size
        flat = np.concatenate(self._buf) if len(self._buf) > 1 else self._buf[0]
        out, rest = flat[:n], flat[n:]
        self._buf = [rest]
        self._buffered = rest.size
        return out.copy()


@dataclass(frozen=True, eq=False)
class GaussianPath:
    model: CovarianceModel
    n: int
    values: np.ndarray
    master_seed: int
    replicate_id: int


@dataclass(frozen=True, eq=False)
class FbmGrid:
    """B^H on {k/N, k=0..N}, scaled so B^H_1 has unit variance."""

    H: float
    N: int
    values: np.ndarray
    master_seed: int
    replicate_id: int

    def increments(self, n: int) -> np.ndarray:
        """B^H_{(k+1)/n} - B^H_{k/n} for k = 0..n-1; n must divide N."""
        if n < 1 or self.N % n != 0:
            raise ValueError(f"level {n} does not divide grid size {self.N}")
        return np.diff(self.values[:: self.N // n])


@lru_cache(maxsize=128)
def _embedding_eigenvalues(model: CovarianceModel, n: int) -> np.ndarray:
    # First row of the size-2(n-1) circulant:
    # rho(0), ..., rho(n-1), rho(n-2), ..., rho(1).
    head = rho_many(model, np.arange(n))
    c = np.concatenate([head, head[-2:0:-1]])
    lam = np.fft.fft(c).real
    bad = lam.min()
    if bad < _EIGEN_CLAMP:
        raise EmbeddingError(
            f"circulant embedding not nonnegative: min eigenvalue {bad:.3e}"
        )
    lam[lam < 0.0] = 0.0
    lam.setflags(write=False)
    return lam


def _synthesize_circulant(lam: np.ndarray, draws: np.ndarray, n: int) -> np.ndarray:
    # Hermitian spectral noise: d[0] -> xi_0, d[1] -> xi_{M/2}, then pairs
    # (d[2j], d[2j+1]) -> (Re, Im)/sqrt(2) of xi_j for j = 1..M/2-1.
    M = lam.size
    half = M // 2
    xi = np.empty(M, dtype=complex)
    xi[0] = draws[0]
    xi[half] = draws[1]
    re = draws[2::2]
    im = draws[3::2]
    xi[1:half] = (re + 1j * im) / math.sqrt(2.0)
    xi[half + 1:] = np.conj(xi[half - 1:0:-1])
    x = np.fft.ifft(np.sqrt(lam) * xi) * math.sqrt(M)
    return x.real[:n].copy()


@lru_cache(maxsize=32)
def _cholesky_factor(model: CovarianceModel, n: int) -> np.ndarray:
    from scipy.linalg import toeplitz

    sigma = toeplitz(rho_many(model, np.arange(n)))
    for jitter in (0.0, 1e-12):
        try:
            L = np.linalg.cholesky(sigma + jitter * np.eye(n))
            L.setflags(write=False)
            return L
        except np.linalg.LinAlgError:
            continue
    raise EmbeddingError(
        f"covariance is not positive definite for n={n} (jitter 1e-12 failed)"
    )


def sample_stationary(
    model: CovarianceModel,
    n: int,
    master_seed: int,
    replicate_id: int,
    method: str | None = None,
    normal_method: str = "polar",
) -> GaussianPath:
    """Exact N(0, Toeplitz(rho)) path of length n, deterministic per seed tuple.

    method: None picks circulant embedding with Cholesky fallback (n <= 2048);
    "circulant" or "cholesky" force the route.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    stream = NormalStream(master_seed, replicate_id, normal_method)
    values = _sample_values(model, n, stream, method)
    return GaussianPath(model, n, values, int(master_seed), int(replicate_id))


def _sample_values(model, n, stream, method):
    if n == 1:
        return stream.normals(1)
    if method == "cholesky":
        return _cholesky_factor(model, n) @ stream.normals(n)
    try:
        lam = _embedding_eigenvalues(model, n)
    except EmbeddingError:
        if method == "circulant" or n > _CHOLESKY_MAX_N:
            raise
        return _cholesky_factor(model, n) @ stream.normals(n)
    return _synthesize_circulant(lam, stream.normals(lam.size), n)


def sample_ensemble(
    model: CovarianceModel,
    n: int,
    master_seed: int,
    replicates: int,
    first_replicate: int = 0,
    method: str | None = None,
    normal_method: str = "polar",
) -> list[GaussianPath]:
    """Paths for replicate_id = first..first+replicates-1, in order."""
    return [
        sample_stationary(model, n, master_seed, r, method, normal_method)
        for r in range(first_replicate, first_replicate + replicates)
    ]


def sample_fbm_grid(
    H: float,
    N: int,
    master_seed: int,
    replicate_id: int,
    normal_method: str = "polar",
) -> FbmGrid:
    """fBm on the dyadic grid {k/N}: exact fGn increments scaled by N^{-H}."""
    if N < 1 or (N & (N - 1)) != 0:
        raise ValueError(f"N must be a power of two, got {N}")
    if N > 1 << 24:
        raise ValueError("grid size capped at 2^24")
    from .covariance import fgn

    path = sample_stationary(fgn(H), N, master_seed, replicate_id,
                             normal_method=normal_method)
    values = np.empty(N + 1)
    values[0] = 0.0
    np.cumsum(path.values, out=values[1:])
    values *= float(N) ** (-H)
    return FbmGrid(float(H), N, values, int(master_seed), int(replicate_id))


def empirical_autocovariance(paths: list[GaussianPath], r: int) -> tuple[float, float]:
    """Cross-replicate unbiased estimate of E[X_1 X_{1+r}] and its s.e."""
    if not paths:
        raise ValueError("empty ensemble")
    n = paths[0].n
    model = paths[0].model
    r = abs(int(r))
    if r >= n:
        raise ValueError(f"lag {r} out of range for n={n}")
    for p in paths:
        if p.n != n or p.model != model:
            raise ValueError("ensemble mixes models or lengths")
    per = np.array(
        [float(np.dot(p.values[: n - r], p.values[r:])) / (n - r) for p in paths]
    )
    est = float(per.mean())
    se = float(per.std(ddof=1) / math.sqrt(per.size)) if per.size > 1 else math.inf
    return est, se


def _header_bytes(path: GaussianPath) -> bytes:
    header = {
        "model": json.loads(model_to_json(path.model)),
        "n": path.n,
        "master_seed": path.master_seed,
        "replicate_id": path.replicate_id,
    }
    return json.dumps(header, sort_keys=True).encode("ascii")


def dump_path_binary(path: GaussianPath, fh: io.BufferedIOBase) -> int:
    """32-byte ASCII length prefix, JSON header, little-endian float64 data."""
    hb = _header_bytes(path)
    prefix = str(len(hb)).encode("ascii").ljust(_HEADER_PREFIX_BYTES)
    payload = path.values.astype("<f8").tobytes()
    return fh.write(prefix + hb + payload)


def load_path_binary(fh: io.BufferedIOBase) -> GaussianPath:
    prefix = fh.read(_HEADER_PREFIX_BYTES)
    if len(prefix) != _HEADER_PREFIX_BYTES:
        raise ValueError("truncated header prefix")
    hlen = int(prefix.decode("ascii").strip())
    header = json.loads(fh.read(hlen).decode("ascii"))
    n = int(header["n"])
    data = np.frombuffer(fh.read(8 * n), dtype="<f8").astype(np.float64)
    if data.size != n:
        raise ValueError("truncated payload")
    return GaussianPath(
        model=model_from_json(header["model"]),
        n=n,
        values=data,
        master_seed=int(header["master_seed"]),
        replicate_id=int(header["replicate_id"]),
    )


def dump_path_csv(path: GaussianPath, fh) -> None:
    """One value per line; intended for small n."""
    for v in path.values:
        fh.write(repr(float(v)) + "\n")
