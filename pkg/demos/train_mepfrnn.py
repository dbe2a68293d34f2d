"""Train a small mePFRNN on the 10x10 world and compare it with a PF.

A desk-scale run: 200 training trajectories, a few dozen epochs. Expect the
validation error to drop well below the untrained model's, not to match a
large particle filter.

    python demos/train_mepfrnn.py --epochs 30
"""
import argparse

from beaconloc import (
    Checkpoint, ModelSpec, MotionNoiseConfig, TrainConfig, evaluate, evaluate_poses, filter_dataset, load_map,
    simulate_split, train,
)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--particles", type=int, default=8)
    ap.add_argument("--hidden", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    env = load_map("world10")
    cfg = MotionNoiseConfig()
    tr = simulate_split(env, cfg, 200, seed=args.seed, split=0, env_id=env.name)
    va = simulate_split(env, cfg, 50, seed=args.seed, split=1, env_id=env.name)
    te = simulate_split(env, cfg, 50, seed=args.seed, split=2, env_id=env.name)

    spec = ModelSpec(kind="mepfrnn", hidden_dim=args.hidden, n_particles=args.particles)

    def show(row):
        if row["val_mse_c"] == row["val_mse_c"]:
            print(f"epoch {row['epoch']:3d}  train loss {row['train_loss']:.3f}  val MSE_c {row['val_mse_c']:.3f}")

    best, hist = train(Checkpoint.fresh(spec, args.seed), tr, va, TrainConfig(max_epochs=args.epochs, seed=args.seed),
                       env, progress=show)
    print(f"untrained val MSE_c {hist[0]['val_mse_c']:.3f}, best {best.provenance['best_val_mse_c']:.3f}")

    rep = evaluate(best, te, env)
    pf = evaluate_poses(filter_dataset("pf", env, te, 200, cfg, seed=args.seed), te.poses)
    print(f"test MSE_c  mePFRNN {rep.mse_c:.3f} ({rep.mse_c_std:.2f}) with {len(best.params)} parameters")
    print(f"test MSE_c  PF-200  {pf.mse_c:.3f} ({pf.mse_c_std:.2f})")


if __name__ == "__main__":
    main()
