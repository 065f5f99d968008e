"""Deterministic random sampling and numerically stable vector primitives.

The random number generator is a counter-based SplitMix64: output ``i`` of a
stream is ``mix64(key + (i + 1) * GOLDEN)`` where ``key`` is derived from the
``(seed, stream_id)`` pair. Because each output depends only on the key and
the counter, draws vectorize cleanly and the sequence is identical on every
platform. Distinct stream ids give statistically independent streams, which
is what lets federated clients sample concurrently without sharing state.

Gamma variates use the Marsaglia-Tsang rejection method (with the standard
``alpha < 1`` boost transform); normals use Box-Muller. Both consume the
underlying u64 stream in a deterministic order, so replaying a stream
reproduces byte-identical samples.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

from .errors import DegenerateInputError, InvalidInputError

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

# numpy constants, kept as uint64 to avoid silent upcasts
_NP_GOLDEN = np.uint64(_GOLDEN)
_NP_MIX1 = np.uint64(_MIX1)
_NP_MIX2 = np.uint64(_MIX2)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)

_INV_2_53 = 1.0 / (1 << 53)


def _mix64(z: int) -> int:
    """Scalar SplitMix64 finalizer over Python ints."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _S30)) * _NP_MIX1
    z = (z ^ (z >> _S27)) * _NP_MIX2
    return z ^ (z >> _S31)


def _encode_part(part) -> int:
    """Map a derivation-path component to a u64."""
    if isinstance(part, (int, np.integer)):
        return int(part) & _MASK64
    if isinstance(part, str):
        digest = hashlib.blake2b(part.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise InvalidInputError(f"stream path components must be int or str, got {type(part).__name__}")


def derive_id(*parts) -> int:
    """Fold derivation-path components into a 64-bit stream id.

    Order-sensitive, so (round, client) and (client, round) derive
    different streams.
    """
    h = _mix64(_GOLDEN)
    for part in parts:
        h = _mix64(h ^ _encode_part(part))
    return h


class RngStream:
    """Deterministic random stream identified by ``(seed, stream_id)``.

    The stream is stateful (a counter advances as samples are drawn), but
    constructing a new stream with the same ``(seed, stream_id)`` replays
    the exact same sequence. All distribution methods consume the
    underlying u64 outputs in a documented, deterministic order.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self._key = _mix64(_mix64(self.seed ^ _GOLDEN) ^ self.stream_id)
        self._counter = 0

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def child(self, *parts) -> "RngStream":
        """Derive an independent stream for a sub-task (e.g. round, client)."""
        return RngStream(self.seed, derive_id(self.stream_id, *parts))

    def u64(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit outputs."""
        if n < 0:
            raise InvalidInputError("sample count must be non-negative")
        start = self._counter + 1
        self._counter += n
        idx = np.arange(start, start + n, dtype=np.uint64)
        return _mix64_array(np.uint64(self._key) + idx * _NP_GOLDEN)

    def random(self, n: int) -> np.ndarray:
        """Uniform doubles in [0, 1) with 53-bit resolution."""
        return (self.u64(n) >> _S11).astype(np.float64) * _INV_2_53

    def random_open(self, n: int) -> np.ndarray:
        """Uniform doubles in (0, 1]; safe as a log() argument."""
        return ((self.u64(n) >> _S11).astype(np.float64) + 1.0) * _INV_2_53

    def normal(self, n: int, scale: float = 1.0) -> np.ndarray:
        """Standard normals via Box-Muller (two uniforms per pair)."""
        if n == 0:
            return np.zeros(0)
        pairs = (n + 1) // 2
        u1 = self.random_open(pairs)
        u2 = self.random(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        out = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return out * scale if scale != 1.0 else out

    def _gamma_core_log(self, alpha: float, n: int) -> np.ndarray:
        """log of Gamma(alpha, 1) draws for alpha >= 1 (Marsaglia-Tsang)."""
        d = alpha - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        out = np.empty(n)
        pending = np.arange(n)
        while pending.size:
            x = self.normal(pending.size)
            u = self.random_open(pending.size)
            v = (1.0 + c * x) ** 3
            ok = v > 0
            # log-space acceptance test; rejected lanes get logv = -inf
            logv = np.where(ok, np.log(np.where(ok, v, 1.0)), -np.inf)
            accept = ok & (np.log(u) < 0.5 * x**2 + d - d * v + d * logv)
            out[pending[accept]] = math.log(d) + logv[accept]
            pending = pending[~accept]
        return out

    def log_gamma(self, alpha: float, n: int) -> np.ndarray:
        """log of Gamma(alpha, 1) draws; exact for arbitrarily small alpha.

        For alpha < 1 uses the boost transform
        ``Gamma(alpha) = Gamma(alpha + 1) * U^(1/alpha)`` in log space, which
        avoids the underflow that makes direct draws collapse to zero.
        """
        if alpha <= 0:
            raise InvalidInputError(f"gamma shape must be positive, got {alpha}")
        if alpha >= 1.0:
            return self._gamma_core_log(alpha, n)
        base = self._gamma_core_log(alpha + 1.0, n)
        u = self.random_open(n)
        return base + np.log(u) / alpha

    def gamma(self, alpha: float, n: int) -> np.ndarray:
        """Gamma(alpha, 1) draws (may underflow to 0 for tiny alpha)."""
        return np.exp(self.log_gamma(alpha, n))

    def permutation(self, n: int) -> np.ndarray:
        """Uniform permutation of range(n) via stable key sort."""
        return np.argsort(self.u64(n), kind="stable")

    def choice(self, n: int, k: int) -> np.ndarray:
        """Sample ``k`` of range(n) uniformly without replacement, sorted."""
        if not 0 <= k <= n:
            raise InvalidInputError(f"cannot choose {k} of {n}")
        return np.sort(self.permutation(n)[:k])


def stable_softmax(logits) -> np.ndarray:
    """Softmax with max-subtraction; shift-invariant and overflow-proof."""
    v = np.asarray(logits, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise InvalidInputError("softmax expects a non-empty 1-D vector")
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("softmax input contains non-finite entries")
    shifted = v - v.max()
    e = np.exp(shifted)
    return e / e.sum()


def softmax_rows(logits) -> np.ndarray:
    """Row-wise stable softmax for a 2-D logits matrix."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] == 0 or z.shape[1] == 0:
        raise InvalidInputError("softmax_rows expects a non-empty 2-D matrix")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("softmax_rows input contains non-finite entries")
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def l2_normalize(v) -> np.ndarray:
    """Scale a vector to unit Euclidean norm."""
    x = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(x)
    if norm == 0.0:
        raise DegenerateInputError("cannot normalize a zero vector")
    return x / norm


def l2_normalize_rows(m) -> np.ndarray:
    """Row-wise unit normalization of a 2-D matrix."""
    x = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateInputError("matrix contains a zero row")
    return x / norms


def dirichlet_sample(alpha: float, dim: int, rng: RngStream) -> np.ndarray:
    """One draw from the symmetric Dirichlet(alpha) over ``dim`` components.

    Implemented as normalized per-component Gamma(alpha, 1) draws. The
    normalization runs in log space so that concentrations far below 1
    (where raw gamma draws underflow) still land exactly on the simplex.
    """
    if alpha <= 0:
        raise InvalidInputError(f"dirichlet concentration must be positive, got {alpha}")
    if dim < 1:
        raise InvalidInputError(f"dirichlet dimension must be at least 1, got {dim}")
    if dim == 1:
        rng.log_gamma(alpha, 1)  # consume one draw so replay order is stable
        return np.ones(1)
    lg = rng.log_gamma(alpha, dim)
    w = np.exp(lg - lg.max())
    return w / w.sum()


def multinomial_split(n: int, probs, rng: RngStream) -> np.ndarray:
    """Split ``n`` items into categories by ``n`` categorical draws.

    Returns integer counts summing exactly to ``n``.
    """
    p = np.asarray(probs, dtype=np.float64)
    if n < 0:
        raise InvalidInputError("item count must be non-negative")
    if p.ndim != 1 or p.size == 0:
        raise InvalidInputError("probs must be a non-empty vector")
    if np.any(p < 0):
        raise InvalidInputError("probs contains a negative probability")
    total = p.sum()
    if not math.isfinite(total) or abs(total - 1.0) > 1e-9:
        raise InvalidInputError(f"probs must sum to 1 within 1e-9, got {total}")
    if n == 0:
        return np.zeros(p.size, dtype=np.int64)
    cum = np.cumsum(p / total)
    cum[-1] = 1.0  # absorb rounding so every u < 1 lands in range
    u = rng.random(n)
    idx = np.searchsorted(cum, u, side="right")
    return np.bincount(idx, minlength=p.size).astype(np.int64)
