"""Sensor schedules, measurement synthesis and observability analysis.

Fixed sensors sit on a constant set of segments; mobile sensors hop to the
next non-instrumented mainline segment every ``rotation_period`` steps,
wrapping around and skipping fixed positions.  Each measured segment
contributes a (density, speed) row pair to the observation selector.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .model import ModelParams, Topology, measure_h

__all__ = [
    "SensorSchedule",
    "mobile_positions_at",
    "positions_at",
    "build_observation",
    "NoiseModel",
    "synthesize_measurements",
    "GramianResult",
    "observability_gramian",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SensorSchedule:
    """Fixed sensor segments plus rotating mobile sensors.

    ``rotation_period`` is in steps; ``None`` (or inf) keeps the mobile
    sensors parked at their initial positions.
    """

    fixed_segments: tuple[int, ...]
    mobile_count: int = 0
    rotation_period: float | None = None
    initial_positions: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "fixed_segments", tuple(self.fixed_segments))
        object.__setattr__(self, "initial_positions", tuple(self.initial_positions))
        if len(set(self.fixed_segments)) != len(self.fixed_segments):
            raise ValueError("duplicate fixed sensor segment")
        if self.mobile_count != len(self.initial_positions):
            raise ValueError("mobile_count must match initial_positions")
        if len(set(self.initial_positions)) != len(self.initial_positions):
            raise ValueError("duplicate mobile start position")
        if self.rotation_period is not None and not math.isinf(self.rotation_period):
            if int(self.rotation_period) != self.rotation_period or self.rotation_period < 1:
                raise ValueError("rotation_period must be a positive whole number of steps")
        for s in self.initial_positions:
            if s in self.fixed_segments:
                raise ValueError(f"mobile start {s} collides with a fixed sensor")


def _free_slots(sched: SensorSchedule, topo: Topology) -> list[int]:
    slots = [s for s in range(1, topo.n_mainline + 1)
             if s not in sched.fixed_segments]
    for s in sched.initial_positions:
        if s not in slots:
            raise ValueError(f"mobile start {s} is not a free mainline segment")
    if sched.mobile_count > len(slots):
        raise ValueError("more mobile sensors than free mainline segments")
    return slots


def mobile_positions_at(sched: SensorSchedule, topo: Topology, k: int) -> list[int]:
    """Mobile sensor segments at step k (k = 0 is the first measurement).

    Every ``rotation_period`` steps each sensor advances to the next free
    mainline segment, wrapping past the end and skipping fixed positions.
    """
    if sched.mobile_count == 0:
        return []
    slots = _free_slots(sched, topo)
    period = sched.rotation_period
    if period is None or math.isinf(period):
        shift = 0
    else:
        shift = k // int(period)
    m = len(slots)
    return [slots[(slots.index(s) + shift) % m] for s in sched.initial_positions]


def positions_at(sched: SensorSchedule, topo: Topology, k: int) -> list[int]:
    """All measured segments at step k: mobile positions then fixed ones."""
    return mobile_positions_at(sched, topo, k) + sorted(sched.fixed_segments)


def build_observation(measured, topo: Topology) -> np.ndarray:
    """Row selector picking the (density, speed) pair of each measured segment.

    Duplicates are dropped (first occurrence wins) with a logged warning.
    """
    seen = []
    for s in measured:
        s = int(s)
        if not 1 <= s <= topo.n_segments:
            raise ValueError(f"segment id {s} out of range 1..{topo.n_segments}")
        if s in seen:
            log.warning("duplicate measured segment %d dropped", s)
            continue
        seen.append(s)
    C = np.zeros((2 * len(seen), topo.n_x))
    for r, s in enumerate(seen):
        C[2 * r, 2 * (s - 1)] = 1.0
        C[2 * r + 1, 2 * (s - 1) + 1] = 1.0
    return C


@dataclass(frozen=True)
class NoiseModel:
    """Zero-mean i.i.d. uniform measurement noise of standard deviation std.

    Samples are drawn from ``[-std*sqrt(3), std*sqrt(3)]`` so the variance
    equals ``std**2``; density and speed rows share the same std.
    """

    std: float
    seed: int = 0

    def __post_init__(self):
        if self.std < 0:
            raise ValueError("noise std must be nonnegative")

    def stream(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def _noise_draw(rng: np.random.Generator, std: float, size: int) -> np.ndarray:
    if std == 0.0:
        return np.zeros(size)
    half = std * math.sqrt(3.0)
    return rng.uniform(-half, half, size)


def synthesize_measurements(x_true, C, noise: NoiseModel, params: ModelParams,
                            rng: np.random.Generator | None = None) -> np.ndarray:
    """Noisy observation ``C h(x) + nu`` of a true state.

    Passing a persistent generator gives one continuous noise stream across
    steps; otherwise a fresh stream is seeded from the noise model.
    """
    C = np.asarray(C, dtype=float)
    if rng is None:
        rng = noise.stream()
    y = C @ measure_h(x_true, params)
    return y + _noise_draw(rng, noise.std, C.shape[0])


@dataclass
class GramianResult:
    """Truncated observability Gramian and its diagnostics."""

    W: np.ndarray
    min_eigenvalue: float
    spectral_radius: float
    stable: bool
    diverged: bool


def observability_gramian(A_tilde, C_tilde, terms: int = 200) -> GramianResult:
    """Truncated sum of (A^T)^m C^T C A^m for m = 0..terms-1.

    The spectral radius of A_tilde is reported; an unstable A_tilde or a
    growing tail marks the result as diverged.
    """
    A = np.asarray(A_tilde, dtype=float)
    C = np.asarray(C_tilde, dtype=float)
    if terms < 1:
        raise ValueError("terms must be >= 1")
    rad = float(np.max(np.abs(np.linalg.eigvals(A))))
    M = C.T @ C
    W = M.copy()
    tail = []
    for _ in range(terms - 1):
        M = A.T @ M @ A
        W += M
        tail.append(float(np.linalg.norm(M)))
    W = 0.5 * (W + W.T)
    diverged = False
    if len(tail) >= 10:
        last, prev = tail[-1], tail[-10]
        diverged = last > prev and last > 1e-14
    stable = rad < 1.0 + 1e-9
    if not stable:
        diverged = True
    min_eig = float(np.linalg.eigvalsh(W)[0])
    return GramianResult(W, min_eig, rad, stable, diverged)
