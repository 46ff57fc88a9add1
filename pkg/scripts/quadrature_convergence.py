"""Compositing error against the closed-form integral as the sample count doubles.

    python scripts/quadrature_convergence.py --scenes 5
"""
import argparse

import numpy as np

from dynvol.geometry import camera_rays
from dynvol.scene import Emitter, SyntheticSceneSpec, render_oracle_image, ring_rig


def exact_color(emitters, o, d, near, far):
    """Integrate emission-absorption exactly between the sphere boundary crossings."""
    spans = []
    for e in emitters:
        oc = o - np.asarray(e.center)
        b = oc @ d
        disc = b * b - (oc @ oc - e.radius ** 2)
        if disc > 0:
            spans.append(((-b - np.sqrt(disc), -b + np.sqrt(disc)), e))
    cuts = sorted({near, far} | {min(max(s, near), far) for iv, _ in spans for s in iv})
    color, trans = np.zeros(3), 1.0
    for a, b in zip(cuts[:-1], cuts[1:]):
        mid = 0.5 * (a + b)
        inside = [e for (s0, s1), e in spans if s0 <= mid <= s1]
        sig = sum(e.density for e in inside)
        if b <= a or sig == 0:
            continue
        att = np.exp(-sig * (b - a))
        color += trans * (1 - att) * sum(e.density * np.asarray(e.color) for e in inside) / sig
        trans *= att
    return color


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenes", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--size", type=int, default=16)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    cam = ring_rig(1, args.size)[0]
    o, d = (a.reshape(-1, 3) for a in camera_rays(cam))
    Ns = [16, 32, 64, 128, 256, 512]
    print("scene " + " ".join(f"{n:>9d}" for n in Ns) + "   (mean |error|, worst ray at 256)")
    for k in range(args.scenes):
        ems = tuple(Emitter(tuple(rng.uniform(-0.6, 0.6, 3)), rng.uniform(0.3, 0.8), rng.uniform(0.5, 4.0),
                            tuple(rng.uniform(0, 1, 3))) for _ in range(rng.integers(1, 4)))
        spec = SyntheticSceneSpec(static=ems)
        ref = np.array([exact_color(ems, o[i], d[i], cam.near, cam.far) for i in range(len(o))])
        errs = [np.abs(render_oracle_image(spec, cam, 0.0, n).reshape(-1, 3) - ref) for n in Ns]
        print(f"{k:5d} " + " ".join(f"{e.mean():9.2e}" for e in errs) + f"   {errs[4].max():.2e}")


if __name__ == "__main__":
    main()
