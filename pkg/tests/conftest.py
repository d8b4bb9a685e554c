import numpy as np
import pytest

from arzest.model import ModelParams, OffRamp, OnRamp, Topology


@pytest.fixture
def params() -> ModelParams:
    return ModelParams(v_f=102.0, rho_m=345.0, tau=20.0, gamma=1.75,
                       T=1.0 / 3600.0, l=0.1)


@pytest.fixture
def topo() -> Topology:
    return Topology(
        n_mainline=9,
        on_ramps=(OnRamp(merge_into=6),),
        off_ramps=(OffRamp(diverge_from=3, alpha=0.2),
                   OffRamp(diverge_from=8, alpha=0.2)),
    )


def random_states(rng: np.random.Generator, topo: Topology, n: int,
                  rho_lo: float = 1.0, rho_hi: float = 340.0,
                  w_lo: float = 5.0, w_hi: float = 102.0) -> np.ndarray:
    """Physically plausible random states: rho in range, psi = rho * w."""
    rho = rng.uniform(rho_lo, rho_hi, (n, topo.n_segments))
    w = rng.uniform(w_lo, w_hi, (n, topo.n_segments))
    X = np.empty((n, topo.n_x))
    X[:, 0::2] = rho
    X[:, 1::2] = rho * w
    return X
