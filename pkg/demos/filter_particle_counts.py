"""Particle filter and multiparticle Kalman filter accuracy versus bank size.

Runs both baselines on the bundled 10x10 world and prints MSE_c and final
state error with their spread over trajectories.

    python demos/filter_particle_counts.py --n-traj 20
"""
import argparse
import time

from beaconloc import MotionNoiseConfig, evaluate_poses, filter_dataset, load_map, simulate_split


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--env", default="world10")
    ap.add_argument("--n-traj", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    env = load_map(args.env)
    cfg = MotionNoiseConfig()
    ds = simulate_split(env, cfg, args.n_traj, seed=args.seed, split=2, env_id=env.name)

    print(f"{'filter':6} {'n':>6} {'MSE_c':>16} {'FSE':>16} {'ms/step':>8}")
    for kind, counts in (("pf", (50, 200, 1000, 5000)), ("mkf", (10, 50, 500))):
        for n in counts:
            t0 = time.perf_counter()
            pred = filter_dataset(kind, env, ds, n, cfg, seed=args.seed)
            ms = 1000 * (time.perf_counter() - t0) / (len(ds) * ds.n_steps)
            r = evaluate_poses(pred, ds.poses)
            print(f"{kind:6} {n:6d} {r.mse_c:8.3f} ({r.mse_c_std:5.2f}) {r.fse:8.3f} ({r.fse_std:5.2f}) {ms:8.2f}")


if __name__ == "__main__":
    main()
