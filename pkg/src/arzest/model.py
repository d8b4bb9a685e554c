"""Discrete second-order traffic network model with ramp junctions.

A highway is a chain of mainline cells plus single-cell on-ramps and
off-ramps.  Each cell i carries two states: density ``rho_i`` (veh/km) and
relative flow ``psi_i`` (veh/h).  The driver characteristic of a cell is
``w_i = psi_i / rho_i`` (km/h) and its speed is ``v_i = w_i - p(rho_i)``
where ``p`` is the traffic pressure.  Cell updates follow a Godunov scheme:
densities change by net flux, relative flows additionally relax toward
``v_f * rho`` with a per-step relaxation factor ``1 - 1/tau``.

Internal units are km, hours, veh/km and veh/h throughout; the step length
``T`` is in hours and the cell length ``l`` in km.

State layout: ``[rho_1, psi_1, ..., rho_N, psi_N]`` for the mainline,
followed by one ``(rho, psi)`` pair per on-ramp, then one per off-ramp.
Input layout: ``[D_in, w_in, rho_out]`` followed by ``(D_in_j, w_in_j)``
per on-ramp and ``rho_out_l`` per off-ramp.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

__all__ = [
    "EPS_RHO",
    "ModelError",
    "BlowupError",
    "ModelParams",
    "OnRamp",
    "OffRamp",
    "Topology",
    "rho_index",
    "psi_index",
    "state_bounds",
    "state_scale",
    "pressure",
    "pressure_gradient",
    "equilibrium_speed",
    "sigma_crit",
    "demand",
    "supply",
    "flux_one_to_one",
    "flux_merge",
    "flux_diverge",
    "FluxSet",
    "compute_fluxes",
    "nonlinear_f",
    "build_update_matrices",
    "StepDiagnostics",
    "step",
    "measure_h",
    "speeds_from_state",
    "equilibrium_state",
    "pack_inputs",
    "nonlinear_f_batch",
    "step_batch",
    "measure_h_batch",
]

# Density floor used wherever a division by rho would blow up.
EPS_RHO = 1e-6


class ModelError(Exception):
    """Invalid model input or parameterization."""


class BlowupError(ModelError):
    """A state update produced a non-finite value."""

    def __init__(self, index: int, value: float):
        self.index = index
        self.value = value
        super().__init__(f"non-finite state at index {index}: {value!r}")


@dataclass(frozen=True)
class ModelParams:
    """Physical and numerical parameters shared by every cell.

    Parameters
    ----------
    v_f : free-flow speed (km/h).
    rho_m : jam density (veh/km).
    tau : relaxation constant (per-step, dimensionless); the relative flow
        decays by ``1 - 1/tau`` each step.
    gamma : pressure exponent (> 1).
    T : step length (h).
    l : cell length (km).
    """

    v_f: float
    rho_m: float
    tau: float
    gamma: float
    T: float
    l: float

    def __post_init__(self):
        for name in ("v_f", "rho_m", "tau", "gamma", "T", "l"):
            if not getattr(self, name) > 0:
                raise ModelError(f"{name} must be positive")
        if self.tau <= 1:
            raise ModelError("tau must exceed 1 (relaxation factor in (0, 1))")
        # CFL: information must not cross a whole cell in one step.
        if self.v_f * self.T / self.l > 1 + 1e-12:
            raise ModelError(
                f"CFL violated: v_f*T/l = {self.v_f * self.T / self.l:.4f} > 1"
            )


@dataclass(frozen=True)
class OnRamp:
    """On-ramp merging into mainline cell ``merge_into`` (boundary i-1 -> i)."""

    merge_into: int


@dataclass(frozen=True)
class OffRamp:
    """Off-ramp diverging from cell ``diverge_from`` (boundary i -> i+1).

    ``alpha`` is the constant fraction of the upstream flux leaving through
    the ramp.
    """

    diverge_from: int
    alpha: float


@dataclass(frozen=True)
class Topology:
    """Mainline chain plus ramp attachments.

    Global segment ids are 1..n_mainline for the mainline, then one id per
    on-ramp, then one per off-ramp, in declaration order.
    """

    n_mainline: int
    on_ramps: tuple[OnRamp, ...] = ()
    off_ramps: tuple[OffRamp, ...] = ()

    def __post_init__(self):
        if self.n_mainline < 1:
            raise ModelError("need at least one mainline cell")
        object.__setattr__(self, "on_ramps", tuple(self.on_ramps))
        object.__setattr__(self, "off_ramps", tuple(self.off_ramps))
        used = set()
        for r in self.on_ramps:
            if not 1 <= r.merge_into <= self.n_mainline:
                raise ModelError(f"on-ramp merge_into {r.merge_into} out of range")
            b = r.merge_into - 1
            if b in used:
                raise ModelError(f"two ramps share mainline boundary {b}")
            used.add(b)
        for r in self.off_ramps:
            if not 1 <= r.diverge_from <= self.n_mainline:
                raise ModelError(f"off-ramp diverge_from {r.diverge_from} out of range")
            if not 0.0 < r.alpha < 1.0:
                raise ModelError(f"off-ramp split alpha {r.alpha} must lie in (0, 1)")
            b = r.diverge_from
            if b in used:
                raise ModelError(f"two ramps share mainline boundary {b}")
            used.add(b)

    @property
    def n_onramps(self) -> int:
        return len(self.on_ramps)

    @property
    def n_offramps(self) -> int:
        return len(self.off_ramps)

    @property
    def n_segments(self) -> int:
        return self.n_mainline + self.n_onramps + self.n_offramps

    @property
    def n_x(self) -> int:
        return 2 * self.n_segments

    @property
    def n_u(self) -> int:
        return 3 + 2 * self.n_onramps + self.n_offramps

    def onramp_segment(self, j: int) -> int:
        """Global segment id of on-ramp j (1-based)."""
        return self.n_mainline + j

    def offramp_segment(self, l: int) -> int:
        """Global segment id of off-ramp l (1-based)."""
        return self.n_mainline + self.n_onramps + l

    @cached_property
    def _merge_at(self) -> dict[int, int]:
        # mainline boundary index -> on-ramp ordinal (1-based)
        return {r.merge_into - 1: j + 1 for j, r in enumerate(self.on_ramps)}

    @cached_property
    def _diverge_at(self) -> dict[int, int]:
        return {r.diverge_from: l + 1 for l, r in enumerate(self.off_ramps)}


def rho_index(segment: int) -> int:
    """State index of a segment's density (segment ids are 1-based)."""
    return 2 * (segment - 1)


def psi_index(segment: int) -> int:
    """State index of a segment's relative flow."""
    return 2 * (segment - 1) + 1


def state_bounds(topo: Topology, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Physical box for the state: rho in [0, rho_m], psi in [0, rho_m*v_f]."""
    lo = np.zeros(topo.n_x)
    hi = np.empty(topo.n_x)
    hi[0::2] = params.rho_m
    hi[1::2] = params.rho_m * params.v_f
    return lo, hi


def state_scale(topo: Topology, params: ModelParams) -> np.ndarray:
    """Per-state scale used to express rho and psi in comparable units.

    Dividing psi rows by v_f puts both quantities on the veh/km scale.
    """
    d = np.ones(topo.n_x)
    d[1::2] = params.v_f
    return d


# ---------------------------------------------------------------------------
# Fundamental diagram
# ---------------------------------------------------------------------------


def pressure(rho: float, params: ModelParams) -> float:
    """Traffic pressure p(rho) = v_f * (rho/rho_m)**gamma (km/h)."""
    if rho < 0:
        raise ModelError(f"density must be nonnegative, got {rho}")
    return params.v_f * (rho / params.rho_m) ** params.gamma


def pressure_gradient(rho: float, params: ModelParams) -> float:
    """dp/drho; zero-limit at rho = 0 for gamma > 1."""
    if rho < 0:
        raise ModelError(f"density must be nonnegative, got {rho}")
    if rho == 0.0:
        return 0.0
    return params.v_f * params.gamma * rho ** (params.gamma - 1) / params.rho_m ** params.gamma


def equilibrium_speed(rho: float, params: ModelParams) -> float:
    """Steady speed v_f - p(rho); v_f when empty, 0 at jam density."""
    return params.v_f - pressure(rho, params)


def sigma_crit(w: float, params: ModelParams) -> float:
    """Critical density maximizing flux for driver characteristic w."""
    if w <= 0:
        raise ModelError(f"driver characteristic must be positive, got {w}")
    return params.rho_m * (w / (params.v_f * (1 + params.gamma))) ** (1.0 / params.gamma)


# Lenient kernels: finite-difference stencils and filter sigma points may
# probe slightly outside the physical box, so these clamp instead of raising.


def _p_k(rho: float, v_f: float, rho_m: float, gamma: float) -> float:
    if rho <= 0.0:
        return 0.0
    return v_f * (rho / rho_m) ** gamma


def _sigma_k(w: float, v_f: float, rho_m: float, gamma: float) -> float:
    return rho_m * (w / (v_f * (1 + gamma))) ** (1.0 / gamma)


def _demand_k(rho: float, w: float, v_f: float, rho_m: float, gamma: float) -> float:
    if rho <= 0.0 or w <= 0.0:
        return 0.0
    s = _sigma_k(w, v_f, rho_m, gamma)
    if rho <= s:
        val = rho * (w - _p_k(rho, v_f, rho_m, gamma))
    else:
        val = s * (w - _p_k(s, v_f, rho_m, gamma))
    return val if val > 0.0 else 0.0


def _supply_k(rho: float, w_up: float, v_f: float, rho_m: float, gamma: float) -> float:
    if w_up <= 0.0:
        return 0.0
    s = _sigma_k(w_up, v_f, rho_m, gamma)
    if rho <= s:
        val = s * (w_up - _p_k(s, v_f, rho_m, gamma))
    else:
        val = rho * (w_up - _p_k(rho, v_f, rho_m, gamma))
    return val if val > 0.0 else 0.0


def demand(rho: float, w: float, params: ModelParams) -> float:
    """Sending capacity of a cell with density rho and characteristic w.

    Equals ``rho * (w - p(rho))`` below the critical density and the
    w-dependent capacity above it; continuous at the breakpoint.
    """
    if rho < 0:
        raise ModelError(f"density must be nonnegative, got {rho}")
    if w < 0:
        raise ModelError(f"driver characteristic must be nonnegative, got {w}")
    return _demand_k(rho, w, params.v_f, params.rho_m, params.gamma)


def supply(rho: float, w_up: float, params: ModelParams) -> float:
    """Receiving capacity of a cell at density rho for incoming traffic w_up.

    The incoming traffic's characteristic decides the capacity branch; a
    nearly full cell accepts ``rho * (w_up - p(rho))``, floored at zero.
    """
    if rho < 0:
        raise ModelError(f"density must be nonnegative, got {rho}")
    if w_up < 0:
        raise ModelError(f"driver characteristic must be nonnegative, got {w_up}")
    return _supply_k(rho, w_up, params.v_f, params.rho_m, params.gamma)


def _w_of(rho: float, psi: float) -> float:
    return psi / (rho if rho > EPS_RHO else EPS_RHO)


def _gap2(cands: list[float]) -> float:
    """Gap between the two smallest candidates of a min()."""
    if len(cands) < 2:
        return math.inf
    a = sorted(cands)
    return a[1] - a[0]


# ---------------------------------------------------------------------------
# Junction fluxes
# ---------------------------------------------------------------------------


def _one_core(D_up, w_up, rho_down, scale_down, v_f, rho_m, gamma):
    S = scale_down * _supply_k(rho_down, w_up, v_f, rho_m, gamma)
    q = D_up if D_up < S else S
    return q, _gap2([D_up, S])


def _merge_core(D_main, w_main, D_ramp, w_ramp, rho_down, scale_down, v_f, rho_m, gamma):
    tot = D_main + D_ramp
    if tot <= 0.0:
        # Degenerate split: equal priority, no flow.
        w_bar = 0.5 * w_main + 0.5 * w_ramp
        return 0.0, 0.0, 0.0, w_bar, math.inf
    beta = D_main / tot
    w_bar = beta * w_main + (1.0 - beta) * w_ramp
    S = scale_down * _supply_k(rho_down, w_bar, v_f, rho_m, gamma)
    cands = [S]
    if beta > 0.0:
        cands.append(D_main / beta)
    if beta < 1.0:
        cands.append(D_ramp / (1.0 - beta))
    q_bar = min(cands)
    q_main = beta * q_bar
    q_ramp = q_bar - q_main  # exact conservation in floating point
    # Both rescaled demands equal tot up to roundoff, so the branch
    # decision is demand- vs supply-limited: the margin is |S - demand|.
    return q_main, q_ramp, q_bar, w_bar, _gap2([S, min(cands[1:])])


def _diverge_core(D_up, w_up, rho_off, scale_off, rho_down, scale_down, alpha,
                  v_f, rho_m, gamma):
    S_off = scale_off * _supply_k(rho_off, w_up, v_f, rho_m, gamma)
    S_down = scale_down * _supply_k(rho_down, w_up, v_f, rho_m, gamma)
    cands = [D_up, S_off / alpha, S_down / (1.0 - alpha)]
    q_up = min(cands)
    q_off = alpha * q_up
    q_down = q_up - q_off  # exact conservation in floating point
    return q_up, q_off, q_down, _gap2(cands)


def flux_one_to_one(up: tuple[float, float], down: tuple[float, float],
                    params: ModelParams) -> tuple[float, float]:
    """Flux across a plain cell boundary: q = min(demand, supply).

    ``up`` and ``down`` are (rho, psi) pairs.  Returns (q, phi) where phi is
    the relative flux q * w_up.
    """
    rho_u, psi_u = up
    w_u = _w_of(rho_u, psi_u)
    D = _demand_k(rho_u, w_u, params.v_f, params.rho_m, params.gamma)
    q, _ = _one_core(D, w_u, down[0], 1.0, params.v_f, params.rho_m, params.gamma)
    if rho_u <= 0.0:
        return 0.0, 0.0
    return q, q * w_u


def flux_merge(main_up: tuple[float, float], ramp: tuple[float, float],
               down: tuple[float, float], params: ModelParams):
    """Merge junction fluxes with demand-proportional priority.

    Returns ``(q_main, phi_main, q_ramp, phi_ramp, q_down, phi_down)``: the
    two leg outflows and the combined inflow of the downstream cell.  The
    receiving supply is evaluated with the demand-weighted mixture of the
    two incoming characteristics.
    """
    w_m = _w_of(*main_up)
    w_r = _w_of(*ramp)
    p = params
    D_m = _demand_k(main_up[0], w_m, p.v_f, p.rho_m, p.gamma)
    D_r = _demand_k(ramp[0], w_r, p.v_f, p.rho_m, p.gamma)
    q_m, q_r, q_bar, w_bar, _ = _merge_core(
        D_m, w_m, D_r, w_r, down[0], 1.0, p.v_f, p.rho_m, p.gamma)
    return q_m, q_m * w_m, q_r, q_r * w_r, q_bar, q_bar * w_bar


def flux_diverge(up: tuple[float, float], down: tuple[float, float],
                 off: tuple[float, float], alpha: float, params: ModelParams):
    """Diverge junction fluxes with a constant split fraction alpha.

    Returns ``(q_up, phi_up, q_off, phi_off, q_down, phi_down)``.  Both
    receiving supplies are evaluated with the upstream characteristic, and
    the relative flux splits in the same proportion as the flux.
    """
    w_u = _w_of(*up)
    p = params
    D = _demand_k(up[0], w_u, p.v_f, p.rho_m, p.gamma)
    q_up, q_off, q_down, _ = _diverge_core(
        D, w_u, off[0], 1.0, down[0], 1.0, alpha, p.v_f, p.rho_m, p.gamma)
    phi_up = q_up * w_u
    phi_off = alpha * phi_up
    phi_down = phi_up - phi_off
    return q_up, phi_up, q_off, phi_off, q_down, phi_down


# ---------------------------------------------------------------------------
# Network flux assembly
# ---------------------------------------------------------------------------


@dataclass
class FluxSet:
    """Per-segment boundary fluxes for one evaluation of the network.

    ``q_in``/``q_out`` (and the ``phi`` counterparts) are indexed by global
    segment id - 1.  ``entry_q``/``exit_q`` are the mainline end fluxes,
    ``onramp_entry_q[j]``/``offramp_exit_q[l]`` the external ramp fluxes,
    and ``min_margin`` is the smallest gap between the two best candidates
    of any flux min() encountered (branch-tie diagnostic).
    """

    q_in: np.ndarray
    q_out: np.ndarray
    phi_in: np.ndarray
    phi_out: np.ndarray
    entry_q: float
    exit_q: float
    onramp_entry_q: np.ndarray
    offramp_exit_q: np.ndarray
    min_margin: float


def _unpack_inputs(u, topo: Topology):
    d_in, w_in, rho_out = float(u[0]), float(u[1]), float(u[2])
    base = 3
    ramp_d = [float(u[base + 2 * j]) for j in range(topo.n_onramps)]
    ramp_w = [float(u[base + 2 * j + 1]) for j in range(topo.n_onramps)]
    base += 2 * topo.n_onramps
    off_rho = [float(u[base + l]) for l in range(topo.n_offramps)]
    return d_in, w_in, rho_out, ramp_d, ramp_w, off_rho


def compute_fluxes(x, u, topo: Topology, params: ModelParams,
                   ds_scale=None) -> FluxSet:
    """Evaluate every boundary flux of the network at state x, input u.

    ``ds_scale`` optionally scales the demand and supply of individual
    segments (per global segment id - 1), which is how a local speed
    reduction is imposed on the truth model.
    """
    p = params
    v_f, rho_m, gamma = p.v_f, p.rho_m, p.gamma
    n = topo.n_mainline
    nseg = topo.n_segments
    xs = [float(v) for v in x]
    if ds_scale is None:
        sc = [1.0] * nseg
    else:
        sc = [float(v) for v in ds_scale]
    d_in, w_in, rho_out, ramp_d, ramp_w, off_rho = _unpack_inputs(u, topo)

    q_in = [0.0] * nseg
    q_out = [0.0] * nseg
    f_in = [0.0] * nseg
    f_out = [0.0] * nseg
    margin = math.inf

    rho = lambda s: xs[2 * (s - 1)]
    psi = lambda s: xs[2 * (s - 1) + 1]

    # Demand and characteristic of every segment, with local scaling.
    D = [0.0] * (nseg + 1)
    W = [0.0] * (nseg + 1)
    for s in range(1, nseg + 1):
        W[s] = _w_of(rho(s), psi(s))
        D[s] = sc[s - 1] * _demand_k(rho(s), W[s], v_f, rho_m, gamma)

    merge_at = topo._merge_at
    diverge_at = topo._diverge_at

    # Mainline boundaries b = 0..n (b sits between cell b and cell b+1).
    for b in range(0, n + 1):
        if b == 0:
            D_up, w_up = d_in, w_in
            up_seg = None
        else:
            up_seg = b
            D_up, w_up = D[b], W[b]
        if b == n:
            down_seg = None
            rho_down, sc_down = rho_out, 1.0
        else:
            down_seg = b + 1
            rho_down, sc_down = rho(b + 1), sc[b]

        j = merge_at.get(b)
        l = diverge_at.get(b)
        if j is not None:
            rseg = topo.onramp_segment(j)
            q_m, q_r, q_bar, w_bar, m = _merge_core(
                D_up, w_up, D[rseg], W[rseg], rho_down, sc_down,
                v_f, rho_m, gamma)
            if up_seg is not None:
                q_out[up_seg - 1] = q_m
                f_out[up_seg - 1] = q_m * w_up
            q_out[rseg - 1] = q_r
            f_out[rseg - 1] = q_r * W[rseg]
            if down_seg is not None:
                q_in[down_seg - 1] = q_bar
                f_in[down_seg - 1] = q_bar * w_bar
            if b == 0:
                entry_q = q_m
            if b == n:
                exit_q = q_bar
        elif l is not None:
            oseg = topo.offramp_segment(l)
            alpha = topo.off_ramps[l - 1].alpha
            q_up, q_off, q_down, m = _diverge_core(
                D_up, w_up, rho(oseg), sc[oseg - 1], rho_down, sc_down,
                alpha, v_f, rho_m, gamma)
            phi_up = q_up * w_up
            phi_off = alpha * phi_up
            if up_seg is not None:
                q_out[up_seg - 1] = q_up
                f_out[up_seg - 1] = phi_up
            q_in[oseg - 1] = q_off
            f_in[oseg - 1] = phi_off
            if down_seg is not None:
                q_in[down_seg - 1] = q_down
                f_in[down_seg - 1] = phi_up - phi_off
            if b == 0:
                entry_q = q_up
            if b == n:
                exit_q = q_up - q_off
        else:
            q, m = _one_core(D_up, w_up, rho_down, sc_down, v_f, rho_m, gamma)
            phi = q * w_up
            if up_seg is not None:
                q_out[up_seg - 1] = q
                f_out[up_seg - 1] = phi
            if down_seg is not None:
                q_in[down_seg - 1] = q
                f_in[down_seg - 1] = phi
            if b == 0:
                entry_q = q
            if b == n:
                exit_q = q
        if m < margin:
            margin = m

    # External ramp boundaries.
    on_q = [0.0] * topo.n_onramps
    for j in range(1, topo.n_onramps + 1):
        rseg = topo.onramp_segment(j)
        q, m = _one_core(ramp_d[j - 1], ramp_w[j - 1], rho(rseg),
                         sc[rseg - 1], v_f, rho_m, gamma)
        q_in[rseg - 1] = q
        f_in[rseg - 1] = q * ramp_w[j - 1]
        on_q[j - 1] = q
        if m < margin:
            margin = m
    off_q = [0.0] * topo.n_offramps
    for l in range(1, topo.n_offramps + 1):
        oseg = topo.offramp_segment(l)
        q, m = _one_core(D[oseg], W[oseg], off_rho[l - 1], 1.0,
                         v_f, rho_m, gamma)
        q_out[oseg - 1] = q
        f_out[oseg - 1] = q * W[oseg]
        off_q[l - 1] = q
        if m < margin:
            margin = m

    return FluxSet(
        q_in=np.asarray(q_in), q_out=np.asarray(q_out),
        phi_in=np.asarray(f_in), phi_out=np.asarray(f_out),
        entry_q=entry_q, exit_q=exit_q,
        onramp_entry_q=np.asarray(on_q), offramp_exit_q=np.asarray(off_q),
        min_margin=margin,
    )


def nonlinear_f(x, u, topo: Topology, params: ModelParams, ds_scale=None) -> np.ndarray:
    """Stacked net fluxes [q_in - q_out, phi_in - phi_out] per segment."""
    fl = compute_fluxes(x, u, topo, params, ds_scale)
    f = np.empty(topo.n_x)
    f[0::2] = fl.q_in - fl.q_out
    f[1::2] = fl.phi_in - fl.phi_out
    return f


def _f_and_margin(x, u, topo, params, ds_scale=None):
    fl = compute_fluxes(x, u, topo, params, ds_scale)
    f = np.empty(topo.n_x)
    f[0::2] = fl.q_in - fl.q_out
    f[1::2] = fl.phi_in - fl.phi_out
    return f, fl.min_margin


def build_update_matrices(topo: Topology, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Linear part A (relaxation) and input gain G = (T/l) I of the update."""
    n_x = topo.n_x
    A = np.zeros((n_x, n_x))
    for s in range(topo.n_segments):
        r, ps = 2 * s, 2 * s + 1
        A[r, r] = 1.0
        A[ps, r] = params.v_f / params.tau
        A[ps, ps] = 1.0 - 1.0 / params.tau
    G = (params.T / params.l) * np.eye(n_x)
    return A, G


@dataclass
class StepDiagnostics:
    """Mutable counters filled in by step()."""

    clamped: int = 0
    min_margin: float = math.inf


def step(x, u, topo: Topology, params: ModelParams, ds_scale=None,
         diag: StepDiagnostics | None = None) -> np.ndarray:
    """One Godunov update of the whole network, clamped to physical bounds.

    Raises BlowupError if the unclamped update is non-finite.  Clamp events
    are counted in ``diag`` when provided.
    """
    x = np.asarray(x, dtype=float)
    f, margin = _f_and_margin(x, u, topo, params, ds_scale)
    r = params.T / params.l
    x_new = np.empty_like(x)
    x_new[0::2] = x[0::2] + r * f[0::2]
    x_new[1::2] = ((1.0 - 1.0 / params.tau) * x[1::2] + r * f[1::2]
                   + (params.v_f / params.tau) * x[0::2])
    if not np.all(np.isfinite(x_new)):
        bad = int(np.flatnonzero(~np.isfinite(x_new))[0])
        raise BlowupError(bad, float(x_new[bad]))
    lo, hi = state_bounds(topo, params)
    clipped = np.clip(x_new, lo, hi)
    if diag is not None:
        diag.clamped += int(np.count_nonzero(clipped != x_new))
        if margin < diag.min_margin:
            diag.min_margin = margin
    return clipped


def measure_h(x, params: ModelParams, eps_rho: float = EPS_RHO) -> np.ndarray:
    """Full measurement vector: (density, speed) per segment.

    Speed rows use ``psi/rho - p(rho)`` with rho floored at ``eps_rho``.
    """
    x = np.asarray(x, dtype=float)
    rho = x[0::2]
    psi = x[1::2]
    rho_s = np.maximum(rho, eps_rho)
    v = psi / rho_s - params.v_f * (rho_s / params.rho_m) ** params.gamma
    h = np.empty_like(x)
    h[0::2] = rho
    h[1::2] = v
    return h


def speeds_from_state(x, params: ModelParams, eps_rho: float = EPS_RHO) -> np.ndarray:
    """Per-segment speeds (the odd rows of measure_h)."""
    return measure_h(x, params, eps_rho)[1::2]


def equilibrium_state(topo: Topology, params: ModelParams, rho: float) -> np.ndarray:
    """Uniform state at density rho with drivers at equilibrium (w = v_f)."""
    x = np.empty(topo.n_x)
    x[0::2] = rho
    x[1::2] = rho * params.v_f
    return x


def pack_inputs(topo: Topology, d_in: float, w_in: float, rho_out: float,
                ramp_demand=(), ramp_w=(), offramp_rho_out=()) -> np.ndarray:
    """Assemble an input vector in the canonical layout."""
    if len(ramp_demand) != topo.n_onramps or len(ramp_w) != topo.n_onramps:
        raise ModelError("need one (demand, w) pair per on-ramp")
    if len(offramp_rho_out) != topo.n_offramps:
        raise ModelError("need one exit density per off-ramp")
    u = [d_in, w_in, rho_out]
    for d, w in zip(ramp_demand, ramp_w):
        u.extend([d, w])
    u.extend(offramp_rho_out)
    return np.asarray(u, dtype=float)


# ---------------------------------------------------------------------------
# Batched evaluation
#
# Sigma-point and ensemble filters propagate dozens of states per time step,
# and finite-difference stencils evaluate 2*n perturbed copies of one state;
# these mirror the scalar flux path branch for branch but vectorize over a
# population axis.
# ---------------------------------------------------------------------------


def _p_b(rho, v_f, rho_m, gamma):
    return np.where(rho > 0.0,
                    v_f * (np.maximum(rho, 0.0) / rho_m) ** gamma, 0.0)


def _sigma_b(w, v_f, rho_m, gamma):
    return rho_m * (np.maximum(w, 0.0) / (v_f * (1.0 + gamma))) ** (1.0 / gamma)


def _demand_b(rho, w, v_f, rho_m, gamma):
    s = _sigma_b(w, v_f, rho_m, gamma)
    val = np.where(rho <= s,
                   rho * (w - _p_b(rho, v_f, rho_m, gamma)),
                   s * (w - _p_b(s, v_f, rho_m, gamma)))
    val = np.where((rho <= 0.0) | (w <= 0.0), 0.0, val)
    return np.maximum(val, 0.0)


def _supply_b(rho, w_up, v_f, rho_m, gamma):
    s = _sigma_b(w_up, v_f, rho_m, gamma)
    val = np.where(rho <= s,
                   s * (w_up - _p_b(s, v_f, rho_m, gamma)),
                   rho * (w_up - _p_b(rho, v_f, rho_m, gamma)))
    val = np.where(w_up <= 0.0, 0.0, val)
    return np.maximum(val, 0.0)


def _w_b(rho, psi):
    return psi / np.maximum(rho, EPS_RHO)


def _gap2_b(*cands):
    """Rowwise gap between the two smallest candidates (inf allowed)."""
    A = np.sort(np.stack(cands, axis=-1), axis=-1)
    with np.errstate(invalid="ignore"):
        g = A[..., 1] - A[..., 0]
    # Two infinite candidates mean fewer than two real ones: no tie risk.
    return np.where(np.isnan(g), np.inf, g)


def _merge_core_b(D_main, w_main, D_ramp, w_ramp, rho_down, scale_down,
                  v_f, rho_m, gamma, with_margin=False):
    tot = D_main + D_ramp
    pos = tot > 0.0
    beta = np.where(pos, D_main / np.where(pos, tot, 1.0), 0.5)
    w_bar = beta * w_main + (1.0 - beta) * w_ramp
    S = scale_down * _supply_b(rho_down, w_bar, v_f, rho_m, gamma)
    main_open = beta > 0.0
    ramp_open = beta < 1.0
    c_main = np.where(main_open, D_main / np.where(main_open, beta, 1.0),
                      np.inf)
    c_ramp = np.where(ramp_open,
                      D_ramp / np.where(ramp_open, 1.0 - beta, 1.0), np.inf)
    q_bar = np.where(pos, np.minimum(S, np.minimum(c_main, c_ramp)), 0.0)
    q_main = beta * q_bar
    q_ramp = q_bar - q_main
    gap = None
    if with_margin:
        # Mirror the scalar margin: supply vs the binding rescaled demand.
        gap = np.where(pos, np.abs(S - np.minimum(c_main, c_ramp)), np.inf)
    return q_main, q_ramp, q_bar, w_bar, gap


def _diverge_core_b(D_up, w_up, rho_off, scale_off, rho_down, scale_down,
                    alpha, v_f, rho_m, gamma, with_margin=False):
    S_off = scale_off * _supply_b(rho_off, w_up, v_f, rho_m, gamma)
    S_down = scale_down * _supply_b(rho_down, w_up, v_f, rho_m, gamma)
    c_off = S_off / alpha
    c_down = S_down / (1.0 - alpha)
    q_up = np.minimum(D_up, np.minimum(c_off, c_down))
    q_off = alpha * q_up
    q_down = q_up - q_off
    gap = _gap2_b(D_up, c_off, c_down) if with_margin else None
    return q_up, q_off, q_down, gap


def _f_batch(X, u, topo: Topology, params: ModelParams, ds_scale=None,
             with_margin: bool = False):
    """Net fluxes for a population of states.

    X is (M, n_x); ``u`` is one input vector shared by all rows or an
    (M, n_u) array of per-row inputs.  Returns the (M, n_x) flux stack,
    plus per-row branch-tie margins when requested.
    """
    p = params
    v_f, rho_m, gamma = p.v_f, p.rho_m, p.gamma
    X = np.asarray(X, dtype=float)
    m = X.shape[0]
    n = topo.n_mainline
    nseg = topo.n_segments
    if ds_scale is None:
        sc = np.ones(nseg)
    else:
        sc = np.asarray(ds_scale, dtype=float)
    U = np.broadcast_to(np.asarray(u, dtype=float), (m, topo.n_u))
    d_in, w_in, rho_out = U[:, 0], U[:, 1], U[:, 2]
    base = 3
    ramp_d = [U[:, base + 2 * j] for j in range(topo.n_onramps)]
    ramp_w = [U[:, base + 2 * j + 1] for j in range(topo.n_onramps)]
    base += 2 * topo.n_onramps
    off_rho = [U[:, base + l] for l in range(topo.n_offramps)]

    rho = lambda s: X[:, 2 * (s - 1)]
    psi = lambda s: X[:, 2 * (s - 1) + 1]

    W = [None] * (nseg + 1)
    D = [None] * (nseg + 1)
    for s in range(1, nseg + 1):
        W[s] = _w_b(rho(s), psi(s))
        D[s] = sc[s - 1] * _demand_b(rho(s), W[s], v_f, rho_m, gamma)

    q_in = np.zeros((m, nseg))
    q_out = np.zeros((m, nseg))
    f_in = np.zeros((m, nseg))
    f_out = np.zeros((m, nseg))
    margin = np.full(m, math.inf) if with_margin else None

    def see(gap):
        nonlocal margin
        margin = np.minimum(margin, gap)

    merge_at = topo._merge_at
    diverge_at = topo._diverge_at
    for b in range(0, n + 1):
        if b == 0:
            up_seg = None
            D_up, w_up = d_in, w_in
        else:
            up_seg = b
            D_up, w_up = D[b], W[b]
        if b == n:
            down_seg = None
            rho_down, sc_down = rho_out, 1.0
        else:
            down_seg = b + 1
            rho_down, sc_down = rho(b + 1), sc[b]

        j = merge_at.get(b)
        l = diverge_at.get(b)
        if j is not None:
            rseg = topo.onramp_segment(j)
            q_m, q_r, q_bar, w_bar, gap = _merge_core_b(
                D_up, w_up, D[rseg], W[rseg], rho_down, sc_down,
                v_f, rho_m, gamma, with_margin)
            if up_seg is not None:
                q_out[:, up_seg - 1] = q_m
                f_out[:, up_seg - 1] = q_m * w_up
            q_out[:, rseg - 1] = q_r
            f_out[:, rseg - 1] = q_r * W[rseg]
            if down_seg is not None:
                q_in[:, down_seg - 1] = q_bar
                f_in[:, down_seg - 1] = q_bar * w_bar
        elif l is not None:
            oseg = topo.offramp_segment(l)
            alpha = topo.off_ramps[l - 1].alpha
            q_up, q_off, q_down, gap = _diverge_core_b(
                D_up, w_up, rho(oseg), sc[oseg - 1], rho_down, sc_down,
                alpha, v_f, rho_m, gamma, with_margin)
            phi_up = q_up * w_up
            phi_off = alpha * phi_up
            if up_seg is not None:
                q_out[:, up_seg - 1] = q_up
                f_out[:, up_seg - 1] = phi_up
            q_in[:, oseg - 1] = q_off
            f_in[:, oseg - 1] = phi_off
            if down_seg is not None:
                q_in[:, down_seg - 1] = q_down
                f_in[:, down_seg - 1] = phi_up - phi_off
        else:
            S = sc_down * _supply_b(rho_down, w_up, v_f, rho_m, gamma)
            q = np.minimum(D_up, S)
            gap = np.abs(D_up - S) if with_margin else None
            phi = q * w_up
            if up_seg is not None:
                q_out[:, up_seg - 1] = q
                f_out[:, up_seg - 1] = phi
            if down_seg is not None:
                q_in[:, down_seg - 1] = q
                f_in[:, down_seg - 1] = phi
        if with_margin:
            see(gap)

    for j in range(1, topo.n_onramps + 1):
        rseg = topo.onramp_segment(j)
        S = sc[rseg - 1] * _supply_b(rho(rseg), ramp_w[j - 1],
                                     v_f, rho_m, gamma)
        q = np.minimum(ramp_d[j - 1], S)
        q_in[:, rseg - 1] = q
        f_in[:, rseg - 1] = q * ramp_w[j - 1]
        if with_margin:
            see(np.abs(ramp_d[j - 1] - S))
    for l in range(1, topo.n_offramps + 1):
        oseg = topo.offramp_segment(l)
        S = _supply_b(off_rho[l - 1], W[oseg], v_f, rho_m, gamma)
        q = np.minimum(D[oseg], S)
        q_out[:, oseg - 1] = q
        f_out[:, oseg - 1] = q * W[oseg]
        if with_margin:
            see(np.abs(D[oseg] - S))

    f = np.empty((m, topo.n_x))
    f[:, 0::2] = q_in - q_out
    f[:, 1::2] = f_in - f_out
    return f, margin


def nonlinear_f_batch(X, u, topo: Topology, params: ModelParams,
                      ds_scale=None) -> np.ndarray:
    """Net fluxes for a population of states: X is (M, n_x), result too."""
    f, _ = _f_batch(X, u, topo, params, ds_scale)
    return f


def step_batch(X, u, topo: Topology, params: ModelParams,
               ds_scale=None) -> np.ndarray:
    """Godunov update of a population of states; rows clamped like step()."""
    X = np.asarray(X, dtype=float)
    f = nonlinear_f_batch(X, u, topo, params, ds_scale)
    r = params.T / params.l
    X_new = np.empty_like(X)
    X_new[:, 0::2] = X[:, 0::2] + r * f[:, 0::2]
    X_new[:, 1::2] = ((1.0 - 1.0 / params.tau) * X[:, 1::2]
                      + r * f[:, 1::2]
                      + (params.v_f / params.tau) * X[:, 0::2])
    if not np.all(np.isfinite(X_new)):
        bad = int(np.flatnonzero(~np.isfinite(X_new).all(axis=0))[0])
        raise BlowupError(bad, float("nan"))
    lo, hi = state_bounds(topo, params)
    return np.clip(X_new, lo[None, :], hi[None, :])


def measure_h_batch(X, params: ModelParams,
                    eps_rho: float = EPS_RHO) -> np.ndarray:
    """measure_h applied to every row of X."""
    X = np.asarray(X, dtype=float)
    rho = X[:, 0::2]
    psi = X[:, 1::2]
    rho_s = np.maximum(rho, eps_rho)
    v = psi / rho_s - params.v_f * (rho_s / params.rho_m) ** params.gamma
    h = np.empty_like(X)
    h[:, 0::2] = rho
    h[:, 1::2] = v
    return h
