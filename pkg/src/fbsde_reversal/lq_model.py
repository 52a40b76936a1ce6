"""Linear-quadratic problem data, Hamiltonian, cost and matrix-ODE oracles.

The problem is

    dX = (A X + B U) dt + sigma dW,      X_0 ~ N(m0, Sigma0)
    J  = E[ int_0^T 1/2 (X'QX + U'RU) dt + 1/2 X_T' Q_f X_T ]

with constant matrices. For an affine control
``U = K1 X + K2 Y + K3 vec(Z) + K4`` the adjoint is ``Y = G1 X + G2`` and
``Z = G1 sigma``, where ``(G1, G2)`` solve a pair of terminal-value matrix
ODEs. The optimal law ``K2 = -R^{-1} B'`` turns the ``G1`` equation into the
Riccati equation and gives ``G2 = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .sde_core import Ensemble, NumericalError, TimeGrid

__all__ = [
    "LqProblem",
    "GainSchedule",
    "AffineControlLaw",
    "hamiltonian",
    "hamiltonian_du",
    "optimal_feedback",
    "riccati_solve",
    "affine_gain_odes",
    "cost_estimate",
    "optimal_cost_oracle",
]

_SYM_TOL = 1e-10
_PSD_TOL = 1e-10


def _matrix(name, value, shape):
    arr = np.array(value, dtype=float)
    if arr.ndim == 0 and shape == (1, 1):
        arr = arr.reshape(1, 1)
    if arr.shape != shape:
        raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: entries must be finite")
    arr.setflags(write=False)
    return arr


def _check_psd(name, mat, strict=False):
    if not np.allclose(mat, mat.T, atol=_SYM_TOL * max(1.0, np.abs(mat).max())):
        raise ValueError(f"{name}: must be symmetric")
    lam = np.linalg.eigvalsh(mat).min()
    if strict and not lam > 0:
        raise ValueError(f"{name}: must be positive definite (smallest eigenvalue {lam:.3g})")
    if lam < -_PSD_TOL:
        raise ValueError(f"{name}: must be positive semi-definite (smallest eigenvalue {lam:.3g})")


@dataclass(frozen=True)
class LqProblem:
    """Problem datum. Arrays are validated and frozen on construction."""

    A: np.ndarray
    B: np.ndarray
    sigma: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    Q_f: np.ndarray
    m0: np.ndarray
    Sigma0: np.ndarray
    horizon: float = 1.0

    def __post_init__(self):
        A = np.atleast_2d(np.array(self.A, dtype=float))
        n = A.shape[0]
        B = np.array(self.B, dtype=float)
        if B.ndim == 1:
            B = B.reshape(n, -1)
        m = B.shape[1] if B.ndim == 2 else 0
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("A", _matrix("A", A, (n, n)))
        set_("B", _matrix("B", B, (n, m)))
        set_("sigma", _matrix("sigma", self.sigma, (n, n)))
        set_("Q", _matrix("Q", self.Q, (n, n)))
        set_("R", _matrix("R", self.R, (m, m)))
        set_("Q_f", _matrix("Q_f", self.Q_f, (n, n)))
        m0 = np.array(self.m0, dtype=float).reshape(-1)
        if m0.shape != (n,):
            raise ValueError(f"m0: expected length {n}, got {m0.size}")
        m0.setflags(write=False)
        set_("m0", m0)
        set_("Sigma0", _matrix("Sigma0", self.Sigma0, (n, n)))
        if not float(self.horizon) > 0:
            raise ValueError(f"horizon: must be positive, got {self.horizon}")
        set_("horizon", float(self.horizon))

        _check_psd("Q", self.Q)
        _check_psd("Q_f", self.Q_f)
        _check_psd("R", self.R, strict=True)
        _check_psd("Sigma0", self.Sigma0)
        _check_psd("sigma sigma^T", self.D, strict=True)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def D(self) -> np.ndarray:
        return self.sigma @ self.sigma.T

    @property
    def feedback_matrix(self) -> np.ndarray:
        """``R^{-1} B'`` so that the optimal control is ``-feedback_matrix @ y``."""
        return np.linalg.solve(self.R, self.B.T)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.tolist() if isinstance(v, np.ndarray) else v
        return out


@dataclass(frozen=True)
class GainSchedule:
    """``G1(t_k)`` of shape ``(n_steps+1, n, n)`` and optionally ``G2(t_k)``."""

    g1: np.ndarray
    g2: np.ndarray | None = None

    def __post_init__(self):
        g1 = np.asarray(self.g1, dtype=float)
        if g1.ndim != 3 or g1.shape[1] != g1.shape[2]:
            raise ValueError(f"g1 must have shape (K, n, n), got {g1.shape}")
        if not np.all(np.isfinite(g1)):
            raise NumericalError("non-finite gain", step=int(np.argwhere(~np.isfinite(g1))[0][0]))
        object.__setattr__(self, "g1", g1)
        if self.g2 is not None:
            g2 = np.asarray(self.g2, dtype=float)
            if g2.shape != g1.shape[:2]:
                raise ValueError(f"g2 must have shape {g1.shape[:2]}, got {g2.shape}")
            object.__setattr__(self, "g2", g2)

    def __len__(self):
        return self.g1.shape[0]


@dataclass(frozen=True)
class AffineControlLaw:
    """Per-grid-point gains of ``U = K1 X + K2 Y + K3 vec(Z) + K4``.

    Shapes: ``k1, k2`` are ``(K, m, n)``, ``k3`` is ``(K, m, n*n)`` acting on
    the row-major flattening of ``Z``, ``k4`` is ``(K, m)``.
    """

    k1: np.ndarray
    k2: np.ndarray
    k3: np.ndarray
    k4: np.ndarray

    @classmethod
    def constant(cls, n_points, m, n, k1=None, k2=None, k3=None, k4=None):
        def tile(v, shape):
            base = np.zeros(shape) if v is None else np.asarray(v, dtype=float).reshape(shape)
            return np.broadcast_to(base, (n_points, *shape)).copy()

        return cls(tile(k1, (m, n)), tile(k2, (m, n)), tile(k3, (m, n * n)), tile(k4, (m,)))

    @classmethod
    def optimal(cls, prob: LqProblem, grid: TimeGrid):
        return cls.constant(grid.n_steps + 1, prob.m, prob.n, k2=-prob.feedback_matrix)

    def check(self, prob: LqProblem, n_points: int):
        m, n = prob.m, prob.n
        expected = {
            "k1": (n_points, m, n),
            "k2": (n_points, m, n),
            "k3": (n_points, m, n * n),
            "k4": (n_points, m),
        }
        for name, shape in expected.items():
            got = np.shape(getattr(self, name))
            if got != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {got}")


def hamiltonian(prob: LqProblem, x, u, y, z) -> float:
    x, u, y, z = (np.asarray(v, dtype=float) for v in (x, u, y, z))
    running = 0.5 * (x @ prob.Q @ x + u @ prob.R @ u)
    return float(running + y @ (prob.A @ x + prob.B @ u) + np.trace(prob.sigma.T @ z))


def hamiltonian_du(prob: LqProblem, u, y) -> np.ndarray:
    """``dH/du = R u + B' y``, batched over leading axes."""
    return np.asarray(u) @ prob.R.T + np.asarray(y) @ prob.B


def optimal_feedback(prob: LqProblem, y) -> np.ndarray:
    """Minimiser of the Hamiltonian in ``u``: ``-R^{-1} B' y`` (batched)."""
    return -np.asarray(y) @ prob.feedback_matrix.T


def _interp(arr, k, frac):
    if frac == 0.0:
        return arr[k]
    return (1.0 - frac) * arr[k] + frac * arr[k + 1]


def affine_gain_odes(
    prob: LqProblem, law: AffineControlLaw, grid: TimeGrid, symmetrize: bool | None = None
) -> GainSchedule:
    """Integrate the ``(G1, G2)`` terminal-value ODEs backward with RK4.

    Values are stored on the grid; the half-step stages use gains linearly
    interpolated between neighbouring grid points (exact for constant laws).
    ``G1`` is symmetrised after every step when the flow preserves symmetry,
    i.e. ``K1 = 0`` and ``B K2`` symmetric throughout; pass ``symmetrize`` to
    force the choice.
    """
    n_points = grid.n_steps + 1
    law.check(prob, n_points)
    A, B, Q, sigma = prob.A, prob.B, prob.Q, prob.sigma
    if symmetrize is None:
        bk2 = B @ law.k2
        symmetrize = not np.any(law.k1) and np.array_equal(bk2, np.swapaxes(bk2, 1, 2))

    def rhs(g1, g2, k, frac):
        k1 = _interp(law.k1, k, frac)
        k2 = _interp(law.k2, k, frac)
        k3 = _interp(law.k3, k, frac)
        k4 = _interp(law.k4, k, frac)
        gb = g1 @ B
        dg1 = -(g1 @ A + A.T @ g1 + gb @ k1 + gb @ k2 @ g1 + Q)
        z = (g1 @ sigma).reshape(-1)
        dg2 = -(gb @ (k2 @ g2 + k3 @ z + k4) + A.T @ g2)
        return dg1, dg2

    g1 = np.empty((n_points, prob.n, prob.n))
    g2 = np.empty((n_points, prob.n))
    g1[-1] = prob.Q_f
    g2[-1] = 0.0
    h = -grid.dt
    for k in range(grid.n_steps - 1, -1, -1):
        # stepping from t_{k+1} to t_k; frac measures distance from t_k
        a1, b1 = g1[k + 1], g2[k + 1]
        with np.errstate(over="ignore", invalid="ignore"):
            s1 = rhs(a1, b1, k, 1.0)
            s2 = rhs(a1 + 0.5 * h * s1[0], b1 + 0.5 * h * s1[1], k, 0.5)
            s3 = rhs(a1 + 0.5 * h * s2[0], b1 + 0.5 * h * s2[1], k, 0.5)
            s4 = rhs(a1 + h * s3[0], b1 + h * s3[1], k, 0.0)
            new1 = a1 + (h / 6.0) * (s1[0] + 2.0 * s2[0] + 2.0 * s3[0] + s4[0])
            new2 = b1 + (h / 6.0) * (s1[1] + 2.0 * s2[1] + 2.0 * s3[1] + s4[1])
        if symmetrize:
            new1 = 0.5 * (new1 + new1.T)
        if not (np.all(np.isfinite(new1)) and np.all(np.isfinite(new2))):
            raise NumericalError("gain ODE blew up", step=k)
        g1[k], g2[k] = new1, new2
    return GainSchedule(g1, g2)


def riccati_solve(prob: LqProblem, grid: TimeGrid) -> GainSchedule:
    """Exact optimal gain ``G1(t)`` from the Riccati equation, RK4 at grid resolution.

    ``dG/dt = -(G A + A' G + Q - G B R^{-1} B' G)``, ``G(T) = Q_f``. Shares
    the integrator with :func:`affine_gain_odes` under the optimal law so both
    routes agree bit for bit.
    """
    return affine_gain_odes(prob, AffineControlLaw.optimal(prob, grid), grid, symmetrize=True)


def _values(arr):
    return arr.values if isinstance(arr, Ensemble) else np.asarray(arr, dtype=float)


def cost_estimate(prob: LqProblem, states, controls, grid: TimeGrid) -> float:
    """Monte-Carlo estimate of J with a left-Riemann sum for the running cost.

    ``states`` has shape ``(N, n_steps+1, n)``; ``controls`` ``(N, K, m)``
    with ``K`` either ``n_steps`` or ``n_steps+1`` (the last point is unused).
    """
    x = _values(states)
    u = _values(controls)
    n_steps = grid.n_steps
    if x.shape[:2] != (x.shape[0], n_steps + 1) or x.shape[2] != prob.n:
        raise ValueError(f"states shape {x.shape} does not fit grid/problem")
    if u.shape[0] != x.shape[0] or u.shape[1] not in (n_steps, n_steps + 1) or u.shape[2] != prob.m:
        raise ValueError(f"controls shape {u.shape} does not match states {x.shape}")
    xs, us = x[:, :n_steps], u[:, :n_steps]
    running = 0.5 * (np.sum((xs @ prob.Q.T) * xs, axis=-1) + np.sum((us @ prob.R.T) * us, axis=-1))
    xt = x[:, -1]
    terminal = 0.5 * np.sum((xt @ prob.Q_f.T) * xt, axis=-1)
    per_sample = running.sum(axis=1) * grid.dt + terminal
    return float(np.mean(per_sample))


def optimal_cost_oracle(prob: LqProblem, grid: TimeGrid, gains: GainSchedule | None = None) -> float:
    """Optimal LQG cost from the Riccati solution.

    ``J* = 1/2 m0' G(0) m0 + 1/2 tr(G(0) Sigma0) + 1/2 int tr(D G(t)) dt``,
    the trace integral by the trapezoidal rule on the grid.
    """
    g = (gains or riccati_solve(prob, grid)).g1
    g0 = g[0]
    traces = np.einsum("ij,kji->k", prob.D, g)
    integral = grid.dt * (traces.sum() - 0.5 * (traces[0] + traces[-1]))
    return float(0.5 * prob.m0 @ g0 @ prob.m0 + 0.5 * np.trace(g0 @ prob.Sigma0) + 0.5 * integral)
