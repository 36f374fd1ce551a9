"""Seedable, platform-stable random streams.

Every stochastic step in the package draws from an :class:`RngStream`.  A
stream is a Philox-4x64 counter-based bit generator keyed by
``(seed, stream_id)``, so the same pair reproduces the identical sequence on
any platform, and distinct stream ids are independent by construction.
Stream ids are derived by hashing context labels (BLAKE2b, 8-byte digest),
which lets callers hand each client/round/purpose its own stream and train
clients in any order without perturbing one another.

All distributions are fixed transforms of the uniform stream:

* normals: Box-Muller pairs
* Gamma: Marsaglia-Tsang squeeze for shape >= 1, boosted for shape < 1 via
  ``Gamma(a) = Gamma(a+1) * U**(1/a)``
* Dirichlet: normalized independent Gamma draws
* categorical: inverse CDF (searchsorted on the cumulative vector)
* permutation: Fisher-Yates
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

from .errors import InvalidParameterError

_SIMPLEX_TOL = 1e-9


def _encode_label(label) -> bytes:
    if isinstance(label, str):
        raw = label.encode("utf-8")
        return b"s" + len(raw).to_bytes(4, "big") + raw
    if isinstance(label, (int, np.integer)):
        return b"i" + int(label).to_bytes(8, "big", signed=True)
    raise TypeError(f"stream labels must be str or int, got {type(label)!r}")


def derive_stream_id(parent_id: int, *labels) -> int:
    """Stable 64-bit id for a child stream: hash of (parent id, labels)."""
    h = hashlib.blake2b(digest_size=8)
    h.update(parent_id.to_bytes(8, "big"))
    for label in labels:
        h.update(_encode_label(label))
    return int.from_bytes(h.digest(), "big")


class RngStream:
    """One deterministic sample stream.

    Not shareable between concurrent workers; derive a child stream per
    worker instead.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        if not 0 <= seed < 2**64:
            raise InvalidParameterError("seed must fit in 64 unsigned bits")
        if not 0 <= stream_id < 2**64:
            raise InvalidParameterError("stream id must fit in 64 unsigned bits")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        key = (self.seed << 64) | self.stream_id
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def derive(self, *labels) -> "RngStream":
        """Child stream keyed by context labels (strings and ints)."""
        return RngStream(self.seed, derive_stream_id(self.stream_id, *labels))

    # -- uniform base ------------------------------------------------------

    def uniform(self) -> float:
        return float(self._gen.random())

    def uniforms(self, n: int) -> np.ndarray:
        return self._gen.random(int(n))

    # -- derived distributions ---------------------------------------------

    def normal(self) -> float:
        u1, u2 = self._gen.random(2)
        return math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(2.0 * math.pi * u2)

    def normals(self, shape) -> np.ndarray:
        """Standard normals, Box-Muller on consecutive uniform pairs."""
        n = int(np.prod(shape))
        m = (n + 1) // 2
        u = self._gen.random(2 * m)
        r = np.sqrt(-2.0 * np.log(1.0 - u[:m]))
        theta = 2.0 * np.pi * u[m:]
        out = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return out.reshape(shape)

    def gamma(self, shape: float) -> float:
        """One Gamma(shape, scale=1) draw."""
        if not math.isfinite(shape) or shape <= 0:
            raise InvalidParameterError(f"gamma shape must be positive, got {shape}")
        if shape < 1.0:
            # Boost: Gamma(a) = Gamma(a+1) * U**(1/a)
            u = 1.0 - self.uniform()  # (0, 1]
            return self._gamma_at_least_one(shape + 1.0) * u ** (1.0 / shape)
        return self._gamma_at_least_one(shape)

    def _gamma_at_least_one(self, shape: float) -> float:
        # Marsaglia-Tsang (2000) squeeze method.
        d = shape - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        while True:
            x = self.normal()
            v = 1.0 + c * x
            if v <= 0.0:
                continue
            v = v * v * v
            u = 1.0 - self.uniform()  # (0, 1], safe for log
            if math.log(u) < 0.5 * x * x + d - d * v + d * math.log(v):
                return d * v

    def dirichlet(self, alpha_vec) -> np.ndarray:
        """One Dirichlet draw as normalized independent Gamma draws."""
        alpha = np.asarray(alpha_vec, dtype=float)
        if alpha.ndim != 1 or alpha.size == 0:
            raise InvalidParameterError("alpha vector must be non-empty and 1-D")
        if not np.all(np.isfinite(alpha)) or np.any(alpha <= 0):
            raise InvalidParameterError("alpha entries must be positive and finite")
        while True:
            draws = np.array([self.gamma(a) for a in alpha])
            total = draws.sum()
            if total > 0.0:
                return draws / total
            # All draws underflowed (possible only at extreme small shapes).

    def categorical(self, probs) -> int:
        """Index i with probability probs[i] (inverse CDF on one uniform)."""
        p = np.asarray(probs, dtype=float)
        check_simplex(p)
        cum = np.cumsum(p)
        idx = int(np.searchsorted(cum, self.uniform(), side="right"))
        return min(idx, p.size - 1)

    def categorical_many(self, probs, n: int) -> np.ndarray:
        """n independent categorical draws from one distribution."""
        p = np.asarray(probs, dtype=float)
        check_simplex(p)
        cum = np.cumsum(p)
        idx = np.searchsorted(cum, self.uniforms(n), side="right")
        return np.minimum(idx, p.size - 1).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Uniform permutation of 0..n-1 via Fisher-Yates."""
        if n < 0:
            raise InvalidParameterError("permutation length must be >= 0")
        out = np.arange(n, dtype=np.int64)
        if n < 2:
            return out
        u = self._gen.random(n - 1)
        for i in range(n - 1):
            j = i + int(u[i] * (n - i))
            out[i], out[j] = out[j], out[i]
        return out

    def index_sample(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from 0..n-1 (first k steps of Fisher-Yates)."""
        if not 1 <= k <= n:
            raise InvalidParameterError(f"need 1 <= k <= n, got k={k}, n={n}")
        pool = np.arange(n, dtype=np.int64)
        u = self._gen.random(k)
        for i in range(k):
            j = i + int(u[i] * (n - i))
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]


def check_simplex(entries: np.ndarray) -> None:
    """Validate a probability vector: entries >= 0, sum 1 within 1e-9."""
    if entries.ndim != 1 or entries.size == 0:
        raise InvalidParameterError("probability vector must be non-empty and 1-D")
    if not np.all(np.isfinite(entries)) or np.any(entries < 0):
        raise InvalidParameterError("probability entries must be finite and >= 0")
    total = float(entries.sum())
    if abs(total - 1.0) > _SIMPLEX_TOL:
        raise InvalidParameterError(f"probability vector sums to {total}, not 1")
