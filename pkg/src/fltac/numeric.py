"""Dense float64 matrices and deterministic random streams.

Matrices are plain 2-D C-contiguous float64 numpy arrays (row-major), the
single numeric container used everywhere in the simulator.  Randomness flows
exclusively through :class:`Rng`, a thin wrapper over the Philox 4x64 counter
generator: the same seed produces the same draw sequence on every platform,
and independent sub-streams are derived from tags rather than from shared
mutable state, so execution order can never change results.

Gaussian variates are produced by Box-Muller on top of the raw uniform
stream (no rejection), which makes the number of consumed uniforms a fixed
function of the request size.
"""

from __future__ import annotations

import hashlib
import math
from typing import Iterable

import numpy as np

from .errors import ParameterError, ShapeError

# The one numeric container: 2-D C-contiguous float64 ndarray.
Matrix = np.ndarray


def as_matrix(values, rows: int | None = None, cols: int | None = None) -> Matrix:
    """Coerce nested sequences / arrays into the canonical matrix layout."""
    m = np.ascontiguousarray(np.asarray(values, dtype=np.float64))
    if m.ndim == 1:
        m = m.reshape(1, -1) if rows is None or rows == 1 else m.reshape(-1, 1)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if rows is not None and m.shape != (rows, cols):
        raise ShapeError(f"expected shape ({rows}, {cols}), got {m.shape}")
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product a @ b with an explicit conformance check."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"cannot multiply {tuple(a.shape)} by {tuple(b.shape)}: "
            "inner dimensions differ"
        )
    return a @ b


def axpy_scale(alpha: float, x: Matrix, y: Matrix) -> Matrix:
    """Return alpha * x + y elementwise; inputs are never mutated."""
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    return alpha * x + y


def frobenius_sq(x: Matrix) -> float:
    """Sum of squared entries (squared Frobenius norm)."""
    return float(np.sum(x * x))


def gaussian_fill(rng: "Rng", rows: int, cols: int, mean: float = 0.0, std: float = 1.0) -> Matrix:
    """Matrix of i.i.d. Normal(mean, std^2) entries, deterministic in rng state."""
    if std < 0:
        raise ParameterError(f"std must be >= 0, got {std}")
    return mean + std * rng.normal((rows, cols))


def _tag_to_key(tag) -> int:
    """Map a stream tag (int or str) to a non-negative 64-bit key."""
    if isinstance(tag, (int, np.integer)):
        if tag < 0:
            raise ParameterError(f"stream tags must be non-negative, got {tag}")
        return int(tag)
    if isinstance(tag, str):
        digest = hashlib.sha256(tag.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    raise ParameterError(f"unsupported stream tag type: {type(tag).__name__}")


class Rng:
    """Seedable deterministic random stream (Philox 4x64 counter generator).

    Identical (seed, spawn key) pairs yield bit-identical draw sequences
    across runs and platforms.  `for_stream` derives statistically
    independent sub-streams from a master seed plus arbitrary tags (round
    index, client id, ...), the mechanism behind order-independent parallel
    client simulation.
    """

    def __init__(self, seed: int, spawn_key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.spawn_key = tuple(spawn_key)
        self._gen = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(self.seed, spawn_key=self.spawn_key))
        )

    @classmethod
    def for_stream(cls, seed: int, *tags) -> "Rng":
        """Independent sub-stream keyed by (seed, tags)."""
        return cls(seed, spawn_key=tuple(_tag_to_key(t) for t in tags))

    def uniform(self, size=None) -> np.ndarray | float:
        """Uniform draws in [0, 1)."""
        return self._gen.random(size)

    def normal(self, size=None) -> np.ndarray | float:
        """Standard normal draws via Box-Muller (consumes 2*ceil(n/2) uniforms)."""
        shape = () if size is None else (size if isinstance(size, tuple) else (size,))
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        # 1 - U keeps the argument of log strictly positive.
        u1 = 1.0 - self._gen.random(pairs)
        u2 = self._gen.random(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([radius * np.cos(2.0 * np.pi * u2),
                            radius * np.sin(2.0 * np.pi * u2)])[:n]
        if size is None:
            return float(z[0])
        return z.reshape(shape)

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def subset(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), uniformly without replacement."""
        if not 0 <= k <= n:
            raise ParameterError(f"cannot draw {k} distinct indices from {n}")
        return self._gen.permutation(n)[:k]

    def nonce_hex(self) -> str:
        """16-byte random nonce as hex (opaque handles)."""
        return self._gen.bytes(16).hex()

    def gamma(self, shape_param: float, size: int) -> np.ndarray:
        """Gamma(shape_param, scale=1) draws via Marsaglia-Tsang.

        Rejection-based but fully deterministic given the stream state.
        """
        if shape_param <= 0:
            raise ParameterError(f"gamma shape must be > 0, got {shape_param}")
        out = np.empty(size, dtype=np.float64)
        for i in range(size):
            out[i] = self._gamma1(shape_param)
        return out

    def _gamma1(self, a: float) -> float:
        if a < 1.0:
            # Boost trick: Gamma(a) = Gamma(a + 1) * U^(1/a).
            g = self._gamma1(a + 1.0)
            u = float(self._gen.random())
            # U == 0 has probability 0 but would produce 0**(1/a) = 0, fine.
            return g * u ** (1.0 / a)
        d = a - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        while True:
            x = self.normal()
            v = (1.0 + c * x) ** 3
            if v <= 0.0:
                continue
            u = float(self._gen.random())
            if u == 0.0:
                continue
            if math.log(u) < 0.5 * x * x + d - d * v + d * math.log(v):
                return d * v


def derive_seed(seed: int, *tags) -> int:
    """Stable 63-bit integer derived from (seed, tags); for labelling only."""
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for t in tags:
        h.update(b"\x00")
        h.update(str(_tag_to_key(t)).encode())
    return int.from_bytes(h.digest()[:8], "little") >> 1


def check_finite(x: Iterable | np.ndarray | float, what: str = "value") -> None:
    """Raise NumericError when x contains NaN or Inf."""
    from .errors import NumericError

    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} is not finite (NaN/Inf encountered)")
