"""What sensor rotation buys.

With only the minimum fixed instrumentation (last mainline cell plus the
ramps), three mobile sensors either stay parked or hop to the next free
cell every few steps.  Hopping spreads coverage over the whole road and
sharply improves the moving-horizon estimate of the unobserved queue.
"""
from dataclasses import replace

from arzest.scenarios import (
    EstimatorSpec,
    default_scenario,
    generate_truth,
    run_estimation,
)
from arzest.sensing import SensorSchedule, mobile_positions_at


def main():
    sc = default_scenario(t_f=500, noise_std=1.0)
    truth = generate_truth(sc)

    sched = sc.schedule
    print("default layout: fixed sensors", sorted(sched.fixed_segments),
          "+ mobiles starting at", list(sched.initial_positions))
    print("mobile positions over time (period 15):")
    for k in (0, 15, 30, 45):
        print(f"  k={k:<3d} -> {mobile_positions_at(sched, sc.topo, k)}")
    print()

    print(f"{'rotation':<10} {'rmse_rho':>9} {'rmse_v':>8}")
    for period in (1, 15, None):
        cell = replace(sc, schedule=SensorSchedule(
            fixed_segments=sched.fixed_segments, mobile_count=3,
            rotation_period=period, initial_positions=(1, 3, 7)))
        res = run_estimation(cell, truth, EstimatorSpec("mhe"), seed=0)
        label = "parked" if period is None else f"every {period}"
        print(f"{label:<10} {res.rmse_rho:9.3f} {res.rmse_v:8.3f}")
    print("\nparked sensors never see the queue between cells 4 and 8,")
    print("so the estimate there runs open loop on the nominal model.")


if __name__ == "__main__":
    main()
