"""Time grids, seeded Brownian increments and Euler-Maruyama stepping.

Arrays follow the layout ``(sample, step, coordinate)``. Step primitives are
vectorised over any leading batch axes, so ``x`` may be a single state of
shape ``(n,)`` or a whole ensemble slice of shape ``(N, n)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NumericalError",
    "TimeGrid",
    "WienerEnsemble",
    "Ensemble",
    "make_grid",
    "philox4x32",
    "standard_normals",
    "sample_wiener",
    "backward_integral",
    "forward_euler_step",
    "backward_euler_step",
    "reversal_transform",
]

# Stream identifiers for the counter-based generator; distinct purposes never
# share counter space.
STREAM_W = 0
STREAM_W_REVERSED = 1
STREAM_INITIAL = 2
STREAM_TERMINAL = 3
STREAM_SELECTION = 4


class NumericalError(RuntimeError):
    """Raised when a simulation produces non-finite or runaway values."""

    def __init__(self, message: str, **context):
        self.context = context
        if context:
            detail = ", ".join(f"{k}={v}" for k, v in context.items())
            message = f"{message} ({detail})"
        super().__init__(message)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_k = k * dt`` for ``k = 0..n_steps``."""

    horizon: float
    dt: float
    n_steps: int

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt


def make_grid(horizon: float, dt: float) -> TimeGrid:
    """Build a :class:`TimeGrid`, refusing horizons that ``dt`` does not divide.

    The ratio ``horizon / dt`` may miss an integer by a few ulps through
    decimal representation (``0.3 / 0.1``); anything beyond that is rejected
    instead of silently truncating the horizon.
    """
    horizon = float(horizon)
    dt = float(dt)
    if not horizon > 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    ratio = horizon / dt
    n_steps = round(ratio)
    if n_steps < 1 or abs(ratio - n_steps) > 4 * math.ulp(max(ratio, 1.0)):
        raise ValueError(
            f"horizon {horizon} is not an integer multiple of dt {dt} "
            f"(horizon/dt = {ratio!r})"
        )
    return TimeGrid(horizon=horizon, dt=dt, n_steps=n_steps)


_PHILOX_M = (np.uint64(0xD2511F53), np.uint64(0xCD9E8D57))
_PHILOX_W = (np.uint64(0x9E3779B9), np.uint64(0xBB67AE85))
_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)


def philox4x32(counter, key, rounds: int = 10):
    """Philox4x32 block function applied elementwise to counter arrays.

    ``counter`` is a sequence of four broadcastable arrays of 32-bit words,
    ``key`` a pair of 32-bit words. Returns four ``uint64`` arrays holding
    32-bit outputs.
    """
    c0, c1, c2, c3 = (np.asarray(c, dtype=np.uint64) for c in counter)
    k0, k1 = np.uint64(key[0]), np.uint64(key[1])
    m0, m1 = _PHILOX_M
    for _ in range(rounds):
        p0 = m0 * c0
        p1 = m1 * c2
        c0, c1, c2, c3 = (
            (p1 >> _SHIFT32) ^ c1 ^ k0,
            p1 & _MASK32,
            (p0 >> _SHIFT32) ^ c3 ^ k1,
            p0 & _MASK32,
        )
        k0 = (k0 + _PHILOX_W[0]) & _MASK32
        k1 = (k1 + _PHILOX_W[1]) & _MASK32
    return c0, c1, c2, c3


def _uniform53(hi, lo):
    # 27 + 26 bits -> float in [0, 1)
    bits = (hi >> np.uint64(5)) * np.uint64(1 << 26) + (lo >> np.uint64(6))
    return bits.astype(np.float64) * (1.0 / (1 << 53))


def standard_normals(
    seed: int,
    stream: int,
    n_samples: int,
    shape: tuple[int, ...],
    substream: int = 0,
) -> np.ndarray:
    """Draw ``N(0, 1)`` arrays of shape ``(n_samples, *shape)``.

    Values come from the Philox4x32-10 counter-based generator keyed by
    ``seed``. The counter ``(block, sample, substream, stream)`` addresses
    every pair of outputs directly (Box-Muller on two 53-bit uniforms), so a
    value depends only on its own position, never on how many samples are
    drawn or in which order they are computed.
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    size = int(np.prod(shape, dtype=np.int64))
    n_blocks = (size + 1) // 2
    key = np.random.SeedSequence(seed).generate_state(2, np.uint32)
    blocks = np.arange(n_blocks, dtype=np.uint64)[None, :]
    samples = np.arange(n_samples, dtype=np.uint64)[:, None]
    w0, w1, w2, w3 = philox4x32((blocks, samples, substream, stream), key)
    u1 = 1.0 - _uniform53(w0, w1)  # (0, 1]
    u2 = _uniform53(w2, w3)
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    z = np.empty((n_samples, 2 * n_blocks))
    z[:, 0::2] = radius * np.cos(angle)
    z[:, 1::2] = radius * np.sin(angle)
    return z[:, :size].reshape((n_samples, *shape))


@dataclass(frozen=True)
class WienerEnsemble:
    """Stored Brownian increments, shape ``(n_samples, n_steps, dim)``."""

    increments: np.ndarray
    seed: int
    dt: float
    stream: int = STREAM_W

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        if inc.ndim != 3:
            raise ValueError(f"increments must be 3-D, got shape {inc.shape}")
        inc.setflags(write=False)
        object.__setattr__(self, "increments", inc)

    @property
    def n_samples(self) -> int:
        return self.increments.shape[0]

    @property
    def n_steps(self) -> int:
        return self.increments.shape[1]

    @property
    def dim(self) -> int:
        return self.increments.shape[2]

    def path(self) -> np.ndarray:
        """Cumulative paths ``W_{t_k}`` with ``W_0 = 0``, shape ``(N, n_steps+1, dim)``."""
        paths = np.zeros((self.n_samples, self.n_steps + 1, self.dim))
        np.cumsum(self.increments, axis=1, out=paths[:, 1:])
        return paths


def sample_wiener(
    grid: TimeGrid, dim: int, n_samples: int, seed: int, stream: int = STREAM_W
) -> WienerEnsemble:
    """Draw i.i.d. ``N(0, dt)`` increments for ``n_samples`` independent paths."""
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    z = standard_normals(seed, stream, n_samples, (grid.n_steps, dim))
    return WienerEnsemble(z * math.sqrt(grid.dt), seed=seed, dt=grid.dt, stream=stream)


@dataclass(frozen=True)
class Ensemble:
    """Sample trajectories of a vector process, shape ``(N, n_steps+1, dim)``."""

    values: np.ndarray
    grid: TimeGrid = field(repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 3:
            raise ValueError(f"ensemble values must be 3-D, got shape {values.shape}")
        if values.shape[1] != self.grid.n_steps + 1:
            raise ValueError(
                f"ensemble has {values.shape[1]} time points, grid needs {self.grid.n_steps + 1}"
            )
        if not np.all(np.isfinite(values)):
            i, k = np.argwhere(~np.isfinite(values))[0][:2]
            raise NumericalError("non-finite ensemble entry", sample=int(i), step=int(k))
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[2]


def backward_integral(integrand, paths: WienerEnsemble, from_step: int = 0) -> np.ndarray:
    """Backward stochastic integral over ``[t_from, T]`` by right-endpoint sums.

    Computes ``sum_{k=from_step}^{n_steps-1} V_{t_{k+1}} dW_k`` per sample.
    The integrand is evaluated at the later end of each increment, which keeps
    the sum adapted to the backward filtration.

    ``integrand`` may be an :class:`Ensemble` or an array with ``n_steps+1``
    time points of shape ``(N, K)`` (scalar), ``(N, K, dim)`` (acts
    coordinate-wise) or ``(N, K, p, dim)`` (matrix valued). Returns an array
    of shape ``(N, dim)``, or ``(N, p)`` in the matrix case.
    """
    v = integrand.values if isinstance(integrand, Ensemble) else np.asarray(integrand, float)
    dw = paths.increments
    n_samples, n_steps, dim = dw.shape
    if not 0 <= from_step <= n_steps:
        raise ValueError(f"from_step must lie in [0, {n_steps}], got {from_step}")
    if v.shape[:2] != (n_samples, n_steps + 1):
        raise ValueError(
            f"integrand shape {v.shape} does not match paths "
            f"({n_samples} samples, {n_steps + 1} time points)"
        )
    v = v[:, from_step + 1 :]
    dw = dw[:, from_step:]
    if v.ndim == 2:
        return np.sum(v[:, :, None] * dw, axis=1)
    if v.ndim == 3 and v.shape[2] == dim:
        return np.sum(v * dw, axis=1)
    if v.ndim == 4 and v.shape[3] == dim:
        return np.sum(np.sum(v * dw[:, :, None, :], axis=3), axis=1)
    raise ValueError(f"integrand shape {v.shape} incompatible with {dim}-dimensional noise")


def _check_finite(x: np.ndarray, step):
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(np.atleast_2d(x)))[0]
        raise NumericalError("non-finite state after Euler step", sample=int(bad[0]), step=step)


def forward_euler_step(x, drift, sigma, dw, dt: float, step=None) -> np.ndarray:
    """One Euler-Maruyama step ``x + drift*dt + sigma @ dW`` (batched)."""
    out = x + drift * dt + dw @ np.asarray(sigma).T
    _check_finite(out, step)
    return out


def backward_euler_step(x, drift, sigma, dw, dt: float, step=None) -> np.ndarray:
    """One step of a backward SDE, ``x_{t-dt} = x_t - drift*dt - sigma @ dW``."""
    out = x - drift * dt - dw @ np.asarray(sigma).T
    _check_finite(out, step)
    return out


def reversal_transform(paths: WienerEnsemble) -> WienerEnsemble:
    """Increments of ``W~_t = W_{T-t} - W_T``: reverse the step axis and negate.

    Applying the transform twice returns the original increments.
    """
    return WienerEnsemble(
        -paths.increments[:, ::-1, :], seed=paths.seed, dt=paths.dt, stream=paths.stream
    )
