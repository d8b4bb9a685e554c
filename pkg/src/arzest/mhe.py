"""Moving-horizon estimation as a box-constrained quadratic program.

Each step relinearizes the model about the mean of the previous window's
solution, freezes those matrices in a horizon buffer, and solves

    min  mu ||x[t-N] - x_bar||^2
       + w1 sum ||y[i] - (C_i x[i] + c2_i)||^2
       + w2 sum ||x[i+1] - (A_i x[i] + B_i u[i] + c1_i)||^2

over the stacked window states, subject to the physical box.  The window
shrinks at startup: until step N the window start stays pinned at time 0
and the arrival state is the initial guess.  All blocks are assembled in
the scaled space (relative-flow rows divided by v_f); the quadratic
program is solved by accelerated projected gradient descent.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .linearize import linearize_measurement, linearize_model
from .model import (
    ModelParams,
    Topology,
    state_bounds,
    state_scale,
    step,
)

__all__ = [
    "MheConfig",
    "HorizonEntry",
    "HorizonBuffer",
    "QPProblem",
    "SolveInfo",
    "solve_box_qp",
    "operating_point",
    "predict_arrival",
    "assemble_qp",
    "MheSession",
]


@dataclass(frozen=True)
class MheConfig:
    """Horizon length and objective weights (mu: arrival, w1: measurement,
    w2: model residual), plus solver termination settings."""

    horizon: int = 4
    mu: float = 1.0
    w1: float = 1.0
    w2: float = 1.0
    tol_kkt: float = 1e-8
    max_iter: int = 5000

    def __post_init__(self):
        if self.horizon < 0:
            raise ValueError("horizon must be nonnegative")
        if self.mu < 0 or self.w1 < 0 or self.w2 < 0:
            raise ValueError("objective weights must be nonnegative")
        if self.mu + self.w2 <= 0:
            raise ValueError("mu + w2 must be positive")


@dataclass
class HorizonEntry:
    """Frozen per-step data: the measurement at ``time`` and the affine
    model of the transition into ``time`` (all in scaled space, except
    ``u`` which keeps its natural units for the arrival prediction)."""

    time: int
    y: np.ndarray
    C_s: np.ndarray
    c2: np.ndarray
    A_s: np.ndarray
    B_s: np.ndarray
    c1_s: np.ndarray
    u: np.ndarray


class HorizonBuffer:
    """Sliding window of the most recent horizon + 1 entries."""

    def __init__(self, horizon: int):
        self.horizon = horizon
        self.entries: deque[HorizonEntry] = deque(maxlen=horizon + 1)

    def push(self, entry: HorizonEntry) -> None:
        if self.entries and entry.time != self.entries[-1].time + 1:
            raise ValueError("buffer times must be consecutive")
        self.entries.append(entry)

    @property
    def latest_time(self) -> int:
        return self.entries[-1].time

    def window_start(self) -> int:
        return max(0, self.latest_time - self.horizon)

    def entry_at(self, time: int) -> HorizonEntry:
        for e in self.entries:
            if e.time == time:
                return e
        raise KeyError(f"no buffer entry for time {time}")


@dataclass
class QPProblem:
    """min z^T H z + q^T z + const subject to z_min <= z <= z_max."""

    H: np.ndarray
    q: np.ndarray
    z_min: np.ndarray
    z_max: np.ndarray
    const: float
    n_blocks: int
    n_x: int


@dataclass
class SolveInfo:
    converged: bool
    iterations: int
    kkt_residual: float
    objective: float
    objective_history: list = field(default_factory=list)
    # Roundoff scale of one objective evaluation; objective comparisons
    # below this are meaningless, so monotonicity holds modulo this slack.
    noise_floor: float = 0.0
    restarts: int = 0


def operating_point(prev_window: list[np.ndarray]) -> np.ndarray:
    """Mean of the previous window's solution blocks."""
    if not prev_window:
        raise ValueError("previous window is empty")
    return np.mean(np.asarray(prev_window), axis=0)


def predict_arrival(x_prev, u_prev, topo: Topology, params: ModelParams) -> np.ndarray:
    """Arrival state: one nonlinear step from the estimate before the window."""
    return step(x_prev, u_prev, topo, params)


def assemble_qp(buf: HorizonBuffer, x_bar_s, cfg: MheConfig,
                lo_s, hi_s) -> QPProblem:
    """Stack the window objective into (H, q, const) over scaled blocks.

    Block b holds the state at window time ``start + b``.  The oldest
    entry contributes only its measurement; every newer entry contributes
    its measurement and the transition linking it to the previous block.
    """
    if not buf.entries:
        raise ValueError("cannot assemble an empty buffer")
    t = buf.latest_time
    start = buf.window_start()
    n_x = buf.entries[-1].A_s.shape[0]
    n_b = t - start + 1
    n_z = n_b * n_x
    H = np.zeros((n_z, n_z))
    q = np.zeros(n_z)
    const = 0.0

    x_bar_s = np.asarray(x_bar_s, dtype=float)
    sl = lambda b: slice(b * n_x, (b + 1) * n_x)

    H[sl(0), sl(0)] += cfg.mu * np.eye(n_x)
    q[sl(0)] += -2.0 * cfg.mu * x_bar_s
    const += cfg.mu * float(x_bar_s @ x_bar_s)

    for e in buf.entries:
        b = e.time - start
        if b < 0:
            continue
        if e.C_s.shape[0] > 0 and cfg.w1 > 0:
            resid = e.y - e.c2
            H[sl(b), sl(b)] += cfg.w1 * (e.C_s.T @ e.C_s)
            q[sl(b)] += -2.0 * cfg.w1 * (e.C_s.T @ resid)
            const += cfg.w1 * float(resid @ resid)
        if e.time > start and cfg.w2 > 0:
            r = e.B_s @ e.u + e.c1_s
            A = e.A_s
            H[sl(b), sl(b)] += cfg.w2 * np.eye(n_x)
            H[sl(b - 1), sl(b - 1)] += cfg.w2 * (A.T @ A)
            H[sl(b), sl(b - 1)] += -cfg.w2 * A
            H[sl(b - 1), sl(b)] += -cfg.w2 * A.T
            q[sl(b)] += -2.0 * cfg.w2 * r
            q[sl(b - 1)] += 2.0 * cfg.w2 * (A.T @ r)
            const += cfg.w2 * float(r @ r)

    z_min = np.tile(np.asarray(lo_s, dtype=float), n_b)
    z_max = np.tile(np.asarray(hi_s, dtype=float), n_b)
    return QPProblem(H, q, z_min, z_max, const, n_b, n_x)


def _power_iteration_l(H: np.ndarray, iters: int = 200) -> float:
    """Upper estimate of the gradient Lipschitz constant 2*lambda_max(H).

    Deterministic start vector; stops early once the eigenvalue estimate
    stabilizes.  The 5% margin covers the remaining power-iteration error;
    the solver additionally guards against an underestimate at run time.
    """
    n = H.shape[0]
    v = np.ones(n) + 1e-3 * np.arange(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = H @ v
        nw = np.linalg.norm(w)
        if nw <= 1e-300:
            break
        if abs(nw - lam) <= 1e-12 * nw:
            lam = nw
            break
        lam = nw
        v = w / nw
    return max(2.0 * lam * 1.05, 1e-12)


def _kkt_residual(z, g, lo, hi) -> float:
    """Projected-gradient optimality violation for the box constraints."""
    at_lo = z <= lo
    at_hi = z >= hi
    interior = ~(at_lo | at_hi)
    r = 0.0
    if interior.any():
        r = float(np.max(np.abs(g[interior])))
    if at_lo.any():
        r = max(r, float(np.max(-g[at_lo], initial=0.0)))
    if at_hi.any():
        r = max(r, float(np.max(g[at_hi], initial=0.0)))
    return r


def solve_box_qp(qp: QPProblem, tol_kkt: float = 1e-8, max_iter: int = 5000,
                 z0=None) -> tuple[np.ndarray, SolveInfo]:
    """Accelerated projected gradient descent on a box-constrained QP.

    Fixed step 1/L with L from power iteration and Nesterov momentum.  The
    momentum restarts whenever it points uphill or a step increases the
    objective beyond the roundoff allowance, so the recorded objective
    values are nonincreasing to within that allowance.  Terminates on the
    projected KKT conditions; if the budget runs out the best iterate seen
    is returned with the converged flag false.
    """
    # Jacobi preconditioning: substitute z = s * w elementwise with
    # s = 1/sqrt(diag(H)).  The constraint set stays a box and the
    # minimizer is unchanged; the iteration count drops because the
    # conditioning improves.  Gradients are mapped back so the KKT
    # residual and tolerance keep their meaning in the caller's space.
    diag = np.clip(np.diag(qp.H), 1e-12, None)
    s = 1.0 / np.sqrt(diag)
    H = qp.H * (s[:, None] * s[None, :])
    q = qp.q * s
    lo, hi = qp.z_min / s, qp.z_max / s
    if z0 is None:
        z = np.clip(0.5 * (lo + hi), lo, hi)
    else:
        z = np.clip(np.asarray(z0, dtype=float) / s, lo, hi)
    L = _power_iteration_l(H)

    # Roundoff scale of one objective evaluation over the box: products of
    # this size cancel when f is summed, so differences below the floor
    # carry no information and must not drive control flow.
    z_amp = np.maximum(np.abs(lo), np.abs(hi))
    noise = 16.0 * np.finfo(float).eps * float(
        z_amp @ (np.abs(H) @ z_amp) + np.abs(q) @ z_amp + abs(qp.const))

    Hz = H @ z
    f = float(z @ Hz + q @ z)
    g = 2.0 * Hz + q
    hist = [f + qp.const]
    # Bound activity is classified in the preconditioned coordinates, but
    # the gradient is mapped back (g_orig = g/s since z_orig = s*z) so the
    # tolerance applies to the caller's problem.
    kkt = _kkt_residual(z, g / s, lo, hi)

    def out(w):
        # Mapping back can move a bound-active coordinate by one ulp;
        # the output must stay feasible exactly.
        return np.clip(w * s, qp.z_min, qp.z_max)

    if kkt <= tol_kkt:
        return out(z), SolveInfo(True, 0, kkt, f + qp.const, hist, noise)
    best_z, best_f, best_kkt = z.copy(), f, kkt

    y = z
    at_base = True  # y coincides with z, so g is also the gradient at y
    t_m = 1.0
    restarts = 0
    it = 0
    while it < max_iter:
        it += 1
        gy = g if at_base else 2.0 * (H @ y) + q
        z_new = np.clip(y - gy / L, lo, hi)
        Hz_new = H @ z_new
        f_new = float(z_new @ Hz_new + q @ z_new)
        if at_base and f_new > f + noise:
            # A plain projected-gradient step increased the objective by
            # more than roundoff allows: L must underestimate the true
            # Lipschitz constant.  Certified failure, so doubling cannot
            # loop forever.
            L *= 2.0
            continue
        if not at_base and (gy @ (z_new - z) > 0.0 or f_new > f + noise):
            # Momentum points uphill, or the step certifiably increased the
            # objective: restart from the last accepted iterate.  The
            # follow-up step is plain projected gradient, which descends
            # (modulo roundoff), so accepted objective values are
            # nonincreasing across restart boundaries.
            restarts += 1
            y = z
            at_base = True
            t_m = 1.0
            continue
        g_new = 2.0 * Hz_new + q
        kkt = _kkt_residual(z_new, g_new / s, lo, hi)
        hist.append(f_new + qp.const)
        if kkt < best_kkt:
            best_z, best_f, best_kkt = z_new.copy(), f_new, kkt
        if kkt <= tol_kkt:
            return out(z_new), SolveInfo(True, it, kkt, f_new + qp.const,
                                         hist, noise, restarts)
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t_m * t_m))
        y = z_new + ((t_m - 1.0) / t_next) * (z_new - z)
        at_base = False
        z, f, g = z_new, f_new, g_new
        t_m = t_next

    return out(best_z), SolveInfo(False, max_iter, best_kkt,
                                  best_f + qp.const, hist, noise, restarts)


class MheSession:
    """Stateful moving-horizon estimator.

    ``step(u, y, C_sel)`` consumes the input that drove the latest
    transition together with the new measurement and returns the estimate.
    The linearization and arrival-prediction routines can be replaced,
    which turns the session into an exact estimator for affine models.
    """

    def __init__(self, x0, cfg: MheConfig, topo: Topology, params: ModelParams,
                 model_linearizer=None, meas_linearizer=None, predictor=None):
        self.cfg = cfg
        self.topo = topo
        self.params = params
        self.x0 = np.asarray(x0, dtype=float).copy()
        self._d = state_scale(topo, params)
        lo, hi = state_bounds(topo, params)
        self._lo_nat, self._hi_nat = lo, hi
        self._lo_s = lo / self._d
        self._hi_s = hi / self._d
        self.buffer = HorizonBuffer(cfg.horizon)
        self.t = 0
        self._estimates: dict[int, np.ndarray] = {0: self.x0.copy()}
        self._prev_window: list[np.ndarray] = [self.x0.copy()]
        self._prev_z: np.ndarray | None = None
        self._prev_start = 0
        self.failed_solves = 0
        self.last_info: SolveInfo | None = None

        self._linearize = model_linearizer or (
            lambda x, u: linearize_model(x, u, topo, params))
        self._meas = meas_linearizer or (
            lambda x, C: linearize_measurement(x, C, params))
        self._predict = predictor or (
            lambda x, u: predict_arrival(x, u, topo, params))

    def _make_entry(self, time: int, u, y, C_sel) -> HorizonEntry:
        x_o = operating_point(self._prev_window)
        lin = self._linearize(x_o, u)
        lm = self._meas(x_o, np.asarray(C_sel, dtype=float))
        d = self._d
        A_s = lin.A_tilde * (d[None, :] / d[:, None])
        B_s = lin.B / d[:, None]
        c1_s = lin.c1 / d
        C_s = lm.C_tilde * d[None, :]
        return HorizonEntry(
            time=time,
            y=np.asarray(y, dtype=float).copy(),
            C_s=C_s, c2=lm.c2,
            A_s=A_s, B_s=B_s, c1_s=c1_s,
            u=np.asarray(u, dtype=float).copy(),
        )

    def _warm_start(self, start: int, n_b: int) -> np.ndarray | None:
        if self._prev_z is None:
            return None
        n_x = self.topo.n_x
        prev = self._prev_z.reshape(-1, n_x)
        z0 = np.empty((n_b, n_x))
        for b in range(n_b):
            time = start + b
            pb = time - self._prev_start
            if 0 <= pb < prev.shape[0]:
                z0[b] = prev[pb]
            else:
                z0[b] = prev[-1]
        return z0.ravel()

    def step(self, u, y, C_sel) -> np.ndarray:
        self.t += 1
        t = self.t
        self.buffer.push(self._make_entry(t, u, y, C_sel))
        start = self.buffer.window_start()
        if start == 0:
            x_bar = self.x0
        else:
            x_bar = self._predict(self._estimates[start - 1],
                                  self.buffer.entry_at(start).u)
        qp = assemble_qp(self.buffer, x_bar / self._d, self.cfg,
                         self._lo_s, self._hi_s)
        z0 = self._warm_start(start, qp.n_blocks)
        z, info = solve_box_qp(qp, self.cfg.tol_kkt, self.cfg.max_iter, z0)
        self.last_info = info
        if not info.converged:
            self.failed_solves += 1
        blocks = z.reshape(qp.n_blocks, qp.n_x) * self._d[None, :]
        # Rescaling to natural units can brush a bound by one ulp.
        blocks = np.clip(blocks, self._lo_nat[None, :], self._hi_nat[None, :])
        self._prev_window = [blocks[b].copy() for b in range(qp.n_blocks)]
        self._prev_z = z
        self._prev_start = start
        x_hat = blocks[-1].copy()
        self._estimates[t] = x_hat
        for old in [k for k in self._estimates if 0 < k < t - self.cfg.horizon]:
            del self._estimates[old]
        return x_hat
