"""Single-frame overfit run: 4 views at 32x32, W=32, D=8.

    python scripts/overfit.py --iters 2000 --seed 0
"""
import argparse

from dynvol.experiments import overfit


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iters", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    def log(stage, it, loss):
        if it % 200 == 0:
            print(f"iter {it:5d}  loss {loss:.6f}", flush=True)

    res = overfit(args.seed, args.iters, on_iteration=log)
    print(f"training-view PSNR {res.psnr:.2f} dB in {res.train_seconds:.0f}s")


if __name__ == "__main__":
    main()
