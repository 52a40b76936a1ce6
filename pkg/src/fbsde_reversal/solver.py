"""Iterative Monte-Carlo solver for the LQ FBSDE and its time reversal.

Each iteration

1. simulates the state forward under the current per-sample controls,
2. estimates the mean and covariance of the forward ensemble at every step
   (the Gaussian Föllmer drift needs nothing else),
3. runs the reversed state/adjoint pair backward from ``T`` while fitting the
   adjoint gain ``G1(t)`` by regression at every grid point, and
4. takes a gradient step on both control ensembles along ``dH/du``.

Controls are stored per sample and per grid point (open-loop arrays); the
feedback law ``-R^{-1} B' G1(t) x`` is only read off the final gains.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .ensemble_stats import (
    MomentSchedule,
    fit_gain,
    follmer_drift_gaussian,
    moment_schedule,
)
from .lq_model import GainSchedule, LqProblem, cost_estimate
from .sde_core import (
    STREAM_INITIAL,
    STREAM_TERMINAL,
    STREAM_W,
    STREAM_W_REVERSED,
    Ensemble,
    NumericalError,
    TimeGrid,
    WienerEnsemble,
    backward_euler_step,
    forward_euler_step,
    sample_wiener,
    standard_normals,
)

log = logging.getLogger(__name__)

__all__ = [
    "SolverConfig",
    "SolverState",
    "SolverOutput",
    "gaussian_factor",
    "init",
    "forward_pass",
    "reversed_step",
    "backward_pass",
    "control_update",
    "solve",
]

DIVERGENCE_BOUND = 1e6
TERMINAL_MODES = ("fresh", "fixed", "reuse")


@dataclass(frozen=True)
class SolverConfig:
    """Algorithm parameters.

    ``terminal_sampling`` chooses how the reversed sweep is started at ``T``:

    * ``"fresh"``: new draws from ``N(m_T, Sigma_T)`` every iteration;
    * ``"fixed"``: the same standard-normal draws every iteration, mapped
      through the current ``(m_T, Sigma_T)``;
    * ``"reuse"``: the forward ensemble's terminal states.
    """

    n_samples: int = 1000
    n_iters: int = 75
    step_size: float = 0.02
    seed: int = 0
    record_history: bool = True
    terminal_sampling: str = "fixed"

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError(f"n_samples must be >= 2, got {self.n_samples}")
        if self.n_iters < 1:
            raise ValueError(f"n_iters must be >= 1, got {self.n_iters}")
        if not self.step_size > 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        if self.terminal_sampling not in TERMINAL_MODES:
            raise ValueError(
                f"terminal_sampling must be one of {TERMINAL_MODES}, got {self.terminal_sampling!r}"
            )


@dataclass
class SolverState:
    """All iterates of the algorithm; arrays are ``(N, n_steps+1, dim)``."""

    iter: int
    x0: np.ndarray
    w: WienerEnsemble
    w_rev: WienerEnsemble
    forward_controls: np.ndarray
    reversed_controls: np.ndarray
    forward_states: np.ndarray | None = None
    reversed_states: np.ndarray | None = None
    adjoints: np.ndarray | None = None
    moments: MomentSchedule | None = None
    gains: GainSchedule | None = None
    cost_history: list = field(default_factory=list)


@dataclass
class SolverOutput:
    gains: GainSchedule
    cost_history: np.ndarray
    forward_states: Ensemble
    reversed_states: Ensemble
    adjoints: Ensemble
    forward_controls: Ensemble
    reversed_controls: Ensemble
    config: SolverConfig
    wall_time: float
    gain_history: np.ndarray | None = None


def gaussian_factor(cov: np.ndarray, name: str = "covariance") -> np.ndarray:
    """Return ``L`` with ``L L' = cov``; Cholesky, eigen fallback for singular PSD input."""
    cov = np.asarray(cov, dtype=float)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    lam, vec = np.linalg.eigh(0.5 * (cov + cov.T))
    if lam.min() < -1e-10:
        raise ValueError(f"{name} has a negative eigenvalue {lam.min():.3g}")
    return vec * np.sqrt(np.clip(lam, 0.0, None))


def init(prob: LqProblem, grid: TimeGrid, cfg: SolverConfig) -> SolverState:
    """Draw initial samples and both Wiener ensembles; zero controls."""
    n, m, N = prob.n, prob.m, cfg.n_samples
    factor = gaussian_factor(prob.Sigma0, "Sigma0")
    z0 = standard_normals(cfg.seed, STREAM_INITIAL, N, (n,))
    x0 = prob.m0 + z0 @ factor.T
    w = sample_wiener(grid, n, N, cfg.seed, stream=STREAM_W)
    w_rev = sample_wiener(grid, n, N, cfg.seed, stream=STREAM_W_REVERSED)
    zeros = np.zeros((N, grid.n_steps + 1, m))
    return SolverState(
        iter=0,
        x0=x0,
        w=w,
        w_rev=w_rev,
        forward_controls=zeros,
        reversed_controls=zeros.copy(),
    )


def _guard(x, what, k, iteration):
    if np.max(np.abs(x)) > DIVERGENCE_BOUND:
        i = int(np.argmax(np.max(np.abs(x), axis=1)))
        raise NumericalError(f"{what} diverged", sample=i, step=k, iteration=iteration)


def forward_pass(
    state: SolverState, prob: LqProblem, grid: TimeGrid, feedback_gains: np.ndarray | None = None
) -> np.ndarray:
    """Euler-Maruyama run of the controlled state from the stored ``X_0``.

    Uses ``state.forward_controls`` unless ``feedback_gains`` (``(K, n, n)``)
    is given, in which case the control is ``-R^{-1} B' G(t_k) X`` evaluated
    along the path and written back into ``state.forward_controls``.
    """
    N, n_steps = state.x0.shape[0], grid.n_steps
    x = np.empty((N, n_steps + 1, prob.n))
    x[:, 0] = state.x0
    dw = state.w.increments
    controls = state.forward_controls
    if feedback_gains is not None:
        controls = np.zeros_like(controls)
        kmat = prob.feedback_matrix
    for k in range(n_steps):
        xk = x[:, k]
        if feedback_gains is not None:
            controls[:, k] = -xk @ (kmat @ feedback_gains[k]).T
        drift = xk @ prob.A.T + controls[:, k] @ prob.B.T
        x[:, k + 1] = forward_euler_step(xk, drift, prob.sigma, dw[:, k], grid.dt, step=k + 1)
        _guard(x[:, k + 1], "forward state", k + 1, state.iter)
    if feedback_gains is not None:
        controls[:, -1] = -x[:, -1] @ (kmat @ feedback_gains[-1]).T
        state.forward_controls = controls
    return x


def reversed_step(prob: LqProblem, x, y, u, gain, mean, cov_inv, dw, dt, step=None):
    """One backward Euler step of the reversed state/adjoint pair from ``t`` to ``t - dt``.

    With ``b = D Sigma^{-1} (x - m)``::

        x_new = x - (A x + B u + b) dt - sigma dW
        y_new = y + (A' y + Q x - G b) dt - G sigma dW
    """
    b = follmer_drift_gaussian(x, mean, cov_inv, prob.D)
    drift = x @ prob.A.T + u @ prob.B.T + b
    x_new = backward_euler_step(x, drift, prob.sigma, dw, dt, step=step)
    y_drift = y @ prob.A + x @ prob.Q.T - b @ gain.T
    y_new = y + y_drift * dt - dw @ (gain @ prob.sigma).T
    if not np.all(np.isfinite(y_new)):
        raise NumericalError("non-finite adjoint", step=step)
    return x_new, y_new


def _terminal_samples(state, prob, grid, cfg, moments, forward_states):
    N = state.x0.shape[0]
    if cfg.terminal_sampling == "reuse":
        return forward_states[:, -1].copy()
    substream = 0 if cfg.terminal_sampling == "fixed" else state.iter
    z = standard_normals(cfg.seed, STREAM_TERMINAL, N, (prob.n,), substream=substream)
    factor = gaussian_factor(moments.cov[-1], "terminal covariance")
    return moments.mean[-1] + z @ factor.T


def backward_pass(
    state: SolverState,
    prob: LqProblem,
    grid: TimeGrid,
    cfg: SolverConfig,
    feedback_gains: np.ndarray | None = None,
    terminal_states: np.ndarray | None = None,
):
    """Reversed sweep from ``T`` to ``0`` with per-step regression of ``Y`` on ``X``.

    The adjoint step from ``t_{k+1}`` uses the gain fitted at ``t_{k+1}``;
    the gain at ``t_k`` is fitted once the new pairs exist. Controls come from
    ``state.reversed_controls`` or, if ``feedback_gains`` is given, from the
    feedback ``-R^{-1} B' G(t) X`` evaluated on the reversed path.

    Returns ``(reversed_states, adjoints, gains)``.
    """
    moments = state.moments
    if moments is None:
        raise ValueError("moments must be estimated before the backward pass")
    N, n_steps, n = state.x0.shape[0], grid.n_steps, prob.n
    xr = np.empty((N, n_steps + 1, n))
    yr = np.empty((N, n_steps + 1, n))
    g1 = np.empty((n_steps + 1, n, n))
    if terminal_states is None:
        terminal_states = _terminal_samples(state, prob, grid, cfg, moments, state.forward_states)
    xr[:, -1] = terminal_states
    yr[:, -1] = terminal_states @ prob.Q_f.T
    g1[-1] = fit_gain(xr[:, -1], yr[:, -1], step=n_steps)
    controls = state.reversed_controls
    if feedback_gains is not None:
        controls = np.zeros_like(controls)
        kmat = prob.feedback_matrix
    dw = state.w_rev.increments
    for k in range(n_steps - 1, -1, -1):
        if feedback_gains is not None:
            controls[:, k + 1] = -xr[:, k + 1] @ (kmat @ feedback_gains[k + 1]).T
        xr[:, k], yr[:, k] = reversed_step(
            prob,
            xr[:, k + 1],
            yr[:, k + 1],
            controls[:, k + 1],
            g1[k + 1],
            moments.mean[k + 1],
            moments.cov_inv[k + 1],
            dw[:, k],
            grid.dt,
            step=k,
        )
        _guard(xr[:, k], "reversed state", k, state.iter)
        _guard(yr[:, k], "adjoint", k, state.iter)
        g1[k] = fit_gain(xr[:, k], yr[:, k], step=k)
    if feedback_gains is not None:
        controls[:, 0] = -xr[:, 0] @ (kmat @ feedback_gains[0]).T
        state.reversed_controls = controls
    return xr, yr, GainSchedule(g1)


def control_update(state: SolverState, prob: LqProblem, grid: TimeGrid, step_size: float):
    """Gradient step ``U <- U - eta (R U + B' Y)`` on both control ensembles.

    Forward paths use ``Y = G1(t) X``; reversed paths use the simulated
    adjoint directly.
    """
    g1 = state.gains.g1
    y_fwd = np.matmul(state.forward_states[:, :, None, :], np.swapaxes(g1, 1, 2))[:, :, 0]
    u = state.forward_controls
    ur = state.reversed_controls
    new_u = u - step_size * (u @ prob.R.T + y_fwd @ prob.B)
    new_ur = ur - step_size * (ur @ prob.R.T + state.adjoints @ prob.B)
    return new_u, new_ur


def solve(prob: LqProblem, grid: TimeGrid, cfg: SolverConfig) -> SolverOutput:
    """Run ``cfg.n_iters`` iterations from zero controls."""
    start = time.perf_counter()
    state = init(prob, grid, cfg)
    gain_history = []
    for it in range(1, cfg.n_iters + 1):
        state.iter = it
        try:
            state.forward_states = forward_pass(state, prob, grid)
            state.cost_history.append(
                cost_estimate(prob, state.forward_states, state.forward_controls, grid)
            )
            state.moments = moment_schedule(state.forward_states)
            state.reversed_states, state.adjoints, state.gains = backward_pass(
                state, prob, grid, cfg
            )
            state.forward_controls, state.reversed_controls = control_update(
                state, prob, grid, cfg.step_size
            )
        except (NumericalError, np.linalg.LinAlgError) as exc:
            raise NumericalError(f"iteration {it} failed: {exc}", iteration=it) from exc
        if cfg.record_history:
            gain_history.append(state.gains.g1)
        log.debug("iteration %d cost %.6g", it, state.cost_history[-1])
    wall = time.perf_counter() - start
    return SolverOutput(
        gains=state.gains,
        cost_history=np.array(state.cost_history),
        forward_states=Ensemble(state.forward_states, grid),
        reversed_states=Ensemble(state.reversed_states, grid),
        adjoints=Ensemble(state.adjoints, grid),
        forward_controls=Ensemble(state.forward_controls, grid),
        reversed_controls=Ensemble(state.reversed_controls, grid),
        config=replace(cfg),
        wall_time=wall,
        gain_history=np.stack(gain_history) if gain_history else None,
    )
