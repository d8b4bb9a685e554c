"""Twin-experiment machinery: truth generation, scoring, estimation runs
and the four sweep drivers."""
import numpy as np
import pytest

from arzest.model import ModelParams, Topology, measure_h, pack_inputs
from arzest.scenarios import (
    EstimatorSpec,
    JamSpec,
    Scenario,
    constant_inputs,
    default_scenario,
    generate_truth,
    moving_average,
    paper_params,
    paper_topology,
    rmse,
    run_estimation,
    sweep_noise,
    sweep_rotation,
    sweep_sensor_count,
    sweep_spacing,
    write_sweep_csv,
)


def _small(t_f=30, noise_std=1.0, estimators=(EstimatorSpec("ekf"),),
           seeds=(0,)):
    sc = default_scenario(t_f=t_f, noise_std=noise_std, estimators=estimators)
    return Scenario(**{**sc.__dict__, "seeds": seeds})


def test_default_truth_jam_forms_and_clears():
    sc = default_scenario(t_f=500)
    truth = generate_truth(sc)
    assert truth.traj.shape == (501, sc.topo.n_x)
    assert truth.clamp_events == 0
    rho6 = truth.traj[:, 2 * (6 - 1)]
    pre = rho6[99]
    assert rho6[150] > 1.5 * pre          # queue grows upstream of the jam
    assert abs(rho6[-1] - pre) < 0.1 * pre  # and clears well before the end
    assert np.all(np.isfinite(truth.traj))


def test_default_scenario_drops_short_jam():
    assert default_scenario(t_f=500).jam is not None
    assert default_scenario(t_f=200).jam is None


def test_truth_starts_from_x_init():
    sc = default_scenario(t_f=500)
    x_init = generate_truth(sc).traj[40]
    sc2 = Scenario(**{**sc.__dict__, "x_init": x_init, "t_f": 10,
                      "inputs": sc.inputs[:10], "jam": None})
    truth = generate_truth(sc2)
    np.testing.assert_array_equal(truth.traj[0], x_init)


def test_scenario_validation():
    sc = default_scenario(t_f=50)
    with pytest.raises(ValueError):
        Scenario(**{**sc.__dict__, "inputs": sc.inputs[:20]})
    with pytest.raises(ValueError):
        Scenario(**{**sc.__dict__, "jam": JamSpec(segment=7, start=0, end=80)})
    with pytest.raises(ValueError):
        Scenario(**{**sc.__dict__, "jam": JamSpec(segment=44, start=0, end=10)})
    with pytest.raises(ValueError):
        JamSpec(segment=7, start=0, end=10, scale=0.0)
    with pytest.raises(ValueError):
        JamSpec(segment=7, start=5, end=2)
    with pytest.raises(ValueError):
        EstimatorSpec("pf")


def test_constant_inputs_shape():
    topo = paper_topology()
    U = constant_inputs(topo, 12, 8800.0, 102.0, 30.0, (600.0,), (102.0,),
                        (20.0, 20.0))
    assert U.shape == (12, topo.n_u)
    np.testing.assert_array_equal(
        U[0], pack_inputs(topo, 8800.0, 102.0, 30.0, (600.0,), (102.0,),
                          (20.0, 20.0)))
    assert np.all(U == U[0])


def test_rmse_hand_computed():
    """Recompute both scores with explicit loops on a one-cell network."""
    params = ModelParams(v_f=102.0, rho_m=345.0, tau=20.0, gamma=1.75,
                         T=1.0 / 3600.0, l=0.1)
    topo = Topology(n_mainline=1)
    truth = np.array([[50.0, 50.0 * 80.0],
                      [60.0, 60.0 * 70.0],
                      [40.0, 40.0 * 90.0]])
    est = truth + np.array([[0.0, 0.0], [3.0, 100.0], [-2.0, -140.0]])
    got_rho, got_v = rmse(truth, est, params)

    d_rho, d_v = [], []
    for k in (1, 2):
        d_rho.append(est[k, 0] - truth[k, 0])
        d_v.append(measure_h(est[k], params)[1] - measure_h(truth[k], params)[1])
    want_rho = np.sqrt(np.mean(np.square(d_rho)))
    want_v = np.sqrt(np.mean(np.square(d_v)))
    assert abs(got_rho - want_rho) < 1e-12
    assert abs(got_v - want_v) < 1e-12
    del topo


def test_rmse_shape_mismatch():
    params = paper_params()
    with pytest.raises(ValueError):
        rmse(np.zeros((3, 2)), np.zeros((4, 2)), params)


def test_moving_average_oracle():
    np.testing.assert_allclose(moving_average([1.0, 2.0, 3.0, 4.0], 2),
                               [1.0, 1.5, 2.5, 3.5])
    np.testing.assert_allclose(moving_average([5.0, 7.0, 9.0], 1),
                               [5.0, 7.0, 9.0])
    X = np.array([[1.0, 10.0], [3.0, 20.0], [5.0, 60.0]])
    np.testing.assert_allclose(moving_average(X, 3),
                               [[1.0, 10.0], [2.0, 15.0], [3.0, 30.0]])
    with pytest.raises(ValueError):
        moving_average([1.0], 0)


def test_run_estimation_deterministic_per_seed():
    sc = _small(t_f=25)
    truth = generate_truth(sc)
    a = run_estimation(sc, truth, sc.estimators[0], seed=3)
    b = run_estimation(sc, truth, sc.estimators[0], seed=3)
    c = run_estimation(sc, truth, sc.estimators[0], seed=4)
    np.testing.assert_array_equal(a.est, b.est)
    assert a.rmse_rho == b.rmse_rho and a.rmse_v == b.rmse_v
    assert not np.array_equal(a.est, c.est)


def test_run_estimation_clean_flags_and_bounds():
    sc = _small(t_f=25)
    truth = generate_truth(sc)
    res = run_estimation(sc, truth, sc.estimators[0], seed=0)
    assert res.within_bounds
    assert res.flags == ""
    assert res.est.shape == truth.traj.shape
    assert res.mean_step_time_s > 0
    assert res.max_step_time_s >= res.mean_step_time_s


def test_sweep_sensor_count_rows():
    sc = _small(t_f=20, estimators=(EstimatorSpec("ekf"),
                                    EstimatorSpec("ukf")))
    rows = sweep_sensor_count(sc, counts=(0, 2))
    assert len(rows) == 4
    assert [r["knob"] for r in rows] == [0, 0, 2, 2]
    assert {r["estimator"] for r in rows} == {"ekf", "ukf"}
    assert all(r["sweep"] == "sensors" for r in rows)
    assert all(r["scenario_id"] == "default" for r in rows)
    with pytest.raises(ValueError):
        sweep_sensor_count(sc, counts=(9,))


def test_sweep_rotation_rows():
    sc = _small(t_f=20)
    rows = sweep_rotation(sc, periods=(1, None))
    assert [r["knob"] for r in rows] == [1, "inf"]
    assert all(r["sweep"] == "rotation" for r in rows)


def test_sweep_spacing_rows_default_to_mhe():
    sc = _small(t_f=12, estimators=())
    rows = sweep_spacing(sc, configs=((1, 2, 3), (1, 4, 7)), periods=(None,))
    assert [r["knob"] for r in rows] == ["1-2-3@inf", "1-4-7@inf"]
    assert all(r["estimator"] == "mhe" for r in rows)


def test_sweep_noise_rows_and_monotone_effect():
    sc = _small(t_f=25, seeds=(0, 1))
    rows = sweep_noise(sc, stds=(0.0, 40.0))
    assert [r["knob"] for r in rows] == [0.0, 40.0]
    assert rows[1]["rmse_rho"] > rows[0]["rmse_rho"]


def test_sweep_jobs_match_sequential():
    sc = _small(t_f=20, seeds=(0, 1))
    truth = generate_truth(sc)
    seq = sweep_noise(sc, stds=(0.0, 10.0), truth=truth, jobs=1)
    par = sweep_noise(sc, stds=(0.0, 10.0), truth=truth, jobs=2)
    for a, b in zip(seq, par):
        assert a["rmse_rho"] == b["rmse_rho"]
        assert a["rmse_v"] == b["rmse_v"]
        assert a["knob"] == b["knob"] and a["estimator"] == b["estimator"]


def test_write_sweep_csv(tmp_path):
    rows = [{
        "scenario_id": "default", "sweep": "noise", "estimator": "ekf",
        "knob": 5.0, "rmse_rho": 1.23456789123, "rmse_v": 0.5,
        "mean_step_time_s": 0.00123, "flags": "",
    }]
    path = tmp_path / "out.csv"
    write_sweep_csv(rows, str(path))
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == ("scenario_id,sweep,estimator,knob,"
                        "rmse_rho,rmse_v,mean_step_time_s,flags")
    assert lines[1] == "default,noise,ekf,5.0,1.23456789,0.5,0.00123,"
