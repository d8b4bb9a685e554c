"""Kalman-type baseline estimators: extended, unscented and ensemble.

All three share the same interface: given the previous estimate, the input
that drove the last transition and the new (possibly empty) measurement,
produce the next bounded state estimate.  Covariances are kept in a scaled
space where relative-flow rows are divided by v_f, so both state
quantities live on the veh/km scale; Q = q I and R = r I apply there.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linearize import linearize_measurement, linearize_model
from .model import (
    ModelParams,
    Topology,
    measure_h,
    measure_h_batch,
    state_bounds,
    state_scale,
    step,
    step_batch,
)

__all__ = [
    "EstimatorError",
    "EstimatorConfig",
    "EstimatorState",
    "project_to_bounds",
    "init_state",
    "ekf_step",
    "ukf_step",
    "enkf_step",
    "KalmanRunner",
]


class EstimatorError(Exception):
    """Estimator could not complete a step."""


@dataclass(frozen=True)
class EstimatorConfig:
    """Shared filter tuning.

    q, r and p0 are variances in the scaled state/measurement space;
    alpha/kappa/beta parameterize the unscented transform and
    ensemble_size the stochastic ensemble filter.
    """

    q: float = 1.0
    r: float = 1.0
    p0: float = 1e-3
    alpha: float = 0.1
    kappa: float = -4.0
    beta: float = 2.0
    ensemble_size: int = 100

    def __post_init__(self):
        if self.q < 0 or self.r <= 0 or self.p0 < 0:
            raise EstimatorError("q, p0 must be nonnegative and r positive")
        if self.ensemble_size < 2:
            raise EstimatorError("ensemble_size must be at least 2")


@dataclass
class EstimatorState:
    """Estimate plus uncertainty bookkeeping for one filter instance."""

    x: np.ndarray
    P: np.ndarray | None = None
    ensemble: np.ndarray | None = None
    k: int = 0
    jitter_events: int = 0


def project_to_bounds(x, lo, hi) -> np.ndarray:
    """Clip a state (or a batch of states in rows) into the physical box."""
    return np.clip(x, lo, hi)


def init_state(x0, cfg: EstimatorConfig, topo: Topology, params: ModelParams,
               kind: str = "ekf", rng: np.random.Generator | None = None) -> EstimatorState:
    """Initial filter state: P0 = p0 I, or an ensemble sampled around x0."""
    x0 = np.asarray(x0, dtype=float)
    if kind == "enkf":
        if rng is None:
            rng = np.random.default_rng(0)
        d = state_scale(topo, params)
        lo, hi = state_bounds(topo, params)
        n = x0.size
        pert = rng.standard_normal((cfg.ensemble_size, n)) * np.sqrt(cfg.p0)
        ens = project_to_bounds(x0 + pert * d, lo, hi)
        return EstimatorState(x=x0.copy(), ensemble=ens)
    P = cfg.p0 * np.eye(x0.size)
    return EstimatorState(x=x0.copy(), P=P)


def _sym(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def ekf_step(state: EstimatorState, u, y, C_sel, cfg: EstimatorConfig,
             topo: Topology, params: ModelParams) -> EstimatorState:
    """Extended Kalman step: nonlinear predict, affine-model covariance.

    ``u`` drove the transition into the newly measured state; an empty
    selector (zero rows) performs a pure prediction.
    """
    d = state_scale(topo, params)
    lo, hi = state_bounds(topo, params)
    n = state.x.size

    lin = linearize_model(state.x, u, topo, params)
    # Similarity-transform the affine model into the scaled space.
    As = lin.A_tilde * (d[None, :] / d[:, None])
    x_pred = step(state.x, u, topo, params)
    P_pred = _sym(As @ state.P @ As.T + cfg.q * np.eye(n))

    C_sel = np.asarray(C_sel, dtype=float)
    if C_sel.shape[0] == 0:
        x_new = project_to_bounds(x_pred, lo, hi)
        return EstimatorState(x_new, P=P_pred, k=state.k + 1,
                              jitter_events=state.jitter_events)

    lm = linearize_measurement(x_pred, C_sel, params)
    Cs = lm.C_tilde * d[None, :]
    innov = np.asarray(y, dtype=float) - C_sel @ measure_h(x_pred, params)
    S = Cs @ P_pred @ Cs.T + cfg.r * np.eye(C_sel.shape[0])
    # K = P C^T S^-1 via a solve on the symmetric innovation covariance.
    K = np.linalg.solve(_jittered(S, state), Cs @ P_pred).T
    x_new = x_pred + d * (K @ innov)
    x_new = project_to_bounds(x_new, lo, hi)
    IKC = np.eye(n) - K @ Cs
    P_new = _sym(IKC @ P_pred @ IKC.T + cfg.r * (K @ K.T))
    return EstimatorState(x_new, P=P_new, k=state.k + 1,
                          jitter_events=state.jitter_events)


def _jittered(S: np.ndarray, state: EstimatorState) -> np.ndarray:
    """Return S, or S plus an escalating ridge while it stays singular.

    The ridge is scaled to the diagonal: a floored-density measurement
    Jacobian can inflate S to the 1e30 range, where any fixed ridge
    underflows and rows of equal garbage magnitude leave the matrix
    exactly singular in float64.
    """
    if not np.all(np.isfinite(S)):
        raise EstimatorError("innovation covariance is not finite")
    ridge = 1e-9 * max(1.0, float(np.mean(np.diag(S))))
    M = S
    for _ in range(8):
        if np.linalg.cond(M) < 1e14:
            return M
        state.jitter_events += 1
        M = S + ridge * np.eye(S.shape[0])
        ridge *= 1e3
    return M


def _chol_with_jitter(P: np.ndarray, state: EstimatorState) -> np.ndarray:
    try:
        return np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        state.jitter_events += 1
        P = _sym(P) + 1e-9 * np.eye(P.shape[0])
        try:
            return np.linalg.cholesky(P)
        except np.linalg.LinAlgError as exc:
            raise EstimatorError("covariance is not positive definite") from exc


def ukf_step(state: EstimatorState, u, y, C_sel, cfg: EstimatorConfig,
             topo: Topology, params: ModelParams) -> EstimatorState:
    """Unscented Kalman step with bound-projected sigma points.

    Sigma points are drawn in the scaled space, projected into the physical
    box, then pushed through the nonlinear update and measurement maps.
    """
    d = state_scale(topo, params)
    lo, hi = state_bounds(topo, params)
    n = state.x.size
    lam = cfg.alpha ** 2 * (n + cfg.kappa) - n
    if n + lam <= 0:
        raise EstimatorError("unscented spread n + lambda must be positive")
    wm = np.full(2 * n + 1, 1.0 / (2.0 * (n + lam)))
    wc = wm.copy()
    wm[0] = lam / (n + lam)
    wc[0] = lam / (n + lam) + (1.0 - cfg.alpha ** 2 + cfg.beta)

    L = _chol_with_jitter((n + lam) * _sym(state.P), state)
    xs = state.x / d
    sig = np.empty((2 * n + 1, n))
    sig[0] = xs
    sig[1:n + 1] = xs + L.T
    sig[n + 1:] = xs - L.T

    # Physical projection first, then nonlinear propagation.
    pts = project_to_bounds(sig * d[None, :], lo, hi)
    prop = step_batch(pts, u, topo, params) / d[None, :]

    x_pred_s = wm @ prop
    dev = prop - x_pred_s
    P_pred = _sym((dev.T * wc) @ dev + cfg.q * np.eye(n))
    x_pred = x_pred_s * d

    C_sel = np.asarray(C_sel, dtype=float)
    if C_sel.shape[0] == 0:
        x_new = project_to_bounds(x_pred, lo, hi)
        return EstimatorState(x_new, P=P_pred, k=state.k + 1,
                              jitter_events=state.jitter_events)

    n_p = C_sel.shape[0]
    Y = measure_h_batch(prop * d[None, :], params) @ C_sel.T
    y_pred = wm @ Y
    dy = Y - y_pred
    S = (dy.T * wc) @ dy + cfg.r * np.eye(n_p)
    P_xy = (dev.T * wc) @ dy
    K = np.linalg.solve(_jittered(S, state), P_xy.T).T
    x_new_s = x_pred_s + K @ (np.asarray(y, dtype=float) - y_pred)
    x_new = project_to_bounds(x_new_s * d, lo, hi)
    P_new = _sym(P_pred - K @ S @ K.T)
    return EstimatorState(x_new, P=P_new, k=state.k + 1,
                          jitter_events=state.jitter_events)


def enkf_step(state: EstimatorState, u, y, C_sel, cfg: EstimatorConfig,
              topo: Topology, params: ModelParams,
              rng: np.random.Generator) -> EstimatorState:
    """Stochastic ensemble Kalman step with perturbed observations."""
    d = state_scale(topo, params)
    lo, hi = state_bounds(topo, params)
    n = state.x.size
    M = state.ensemble.shape[0]

    ens = step_batch(project_to_bounds(state.ensemble, lo, hi),
                     u, topo, params)
    if cfg.q > 0:
        ens = ens + rng.standard_normal((M, n)) * np.sqrt(cfg.q) * d
        ens = project_to_bounds(ens, lo, hi)

    C_sel = np.asarray(C_sel, dtype=float)
    if C_sel.shape[0] > 0:
        n_p = C_sel.shape[0]
        Y = measure_h_batch(ens, params) @ C_sel.T
        ens_s = ens / d
        xm_s = ens_s.mean(axis=0)
        ym = Y.mean(axis=0)
        Xdev = ens_s - xm_s
        Ydev = Y - ym
        P_xy = Xdev.T @ Ydev / (M - 1)
        P_yy = Ydev.T @ Ydev / (M - 1) + cfg.r * np.eye(n_p)
        K = np.linalg.solve(_jittered(P_yy, state), P_xy.T).T
        y = np.asarray(y, dtype=float)
        half = np.sqrt(3.0 * cfg.r)
        # Observation perturbations mirror the uniform measurement noise.
        pert = rng.uniform(-half, half, (M, n_p))
        ens_s = ens_s + (y + pert - Y) @ K.T
        ens = project_to_bounds(ens_s * d, lo, hi)

    x_new = project_to_bounds(ens.mean(axis=0), lo, hi)
    return EstimatorState(x_new, ensemble=ens, k=state.k + 1,
                          jitter_events=state.jitter_events)


class KalmanRunner:
    """Stateful wrapper giving the three filters one step(u, y, C) interface."""

    def __init__(self, kind: str, x0, cfg: EstimatorConfig, topo: Topology,
                 params: ModelParams, rng: np.random.Generator | None = None):
        if kind not in ("ekf", "ukf", "enkf"):
            raise EstimatorError(f"unknown filter kind {kind!r}")
        self.kind = kind
        self.cfg = cfg
        self.topo = topo
        self.params = params
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.state = init_state(x0, cfg, topo, params, kind, self.rng)

    def step(self, u, y, C_sel) -> np.ndarray:
        if self.kind == "ekf":
            self.state = ekf_step(self.state, u, y, C_sel, self.cfg,
                                  self.topo, self.params)
        elif self.kind == "ukf":
            self.state = ukf_step(self.state, u, y, C_sel, self.cfg,
                                  self.topo, self.params)
        else:
            self.state = enkf_step(self.state, u, y, C_sel, self.cfg,
                                   self.topo, self.params, self.rng)
        return self.state.x
