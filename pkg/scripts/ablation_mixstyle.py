"""Round-1 post-adaptation accuracy with and without statistics mixing, over a
grid of support sizes. One source model per seed is shared by every cell."""

import argparse
import dataclasses

import numpy as np

from fedmixstyle.config import SimConfig
from fedmixstyle.simulation import run_pretrain, run_simulation


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[42, 43])
    ap.add_argument("--shots", type=int, nargs="+", default=[1, 2, 5])
    args = ap.parse_args()

    models = {}
    print(f"{'k':>3} {'mixing':>7} {'zero-shot':>9} {'adapted':>8} {'global':>7}")
    for k in args.shots:
        for enabled in (False, True):
            cells = []
            for seed in args.seeds:
                base = SimConfig(seed=seed, rounds=1)
                base = dataclasses.replace(
                    base,
                    train=dataclasses.replace(base.train, seed=seed),
                    data=dataclasses.replace(base.data, seed=seed, k_shot=k),
                    adapt=dataclasses.replace(base.adapt, mixstyle=dataclasses.replace(base.adapt.mixstyle,
                                                                                       enabled=enabled)),
                )
                if seed not in models:  # support size and mixing do not touch pre-training
                    models[seed] = run_pretrain(base)[:2]
                spec, params = models[seed]
                rep = run_simulation(base, spec, params)[0]
                cells.append([np.mean([getattr(c, f) for c in rep.clients])
                              for f in ("zero_shot_acc", "post_adapt_acc", "global_acc")])
            zs, pa, ga = np.mean(cells, axis=0)
            print(f"{k:>3} {'on' if enabled else 'off':>7} {zs:>9.4f} {pa:>8.4f} {ga:>7.4f}")


if __name__ == "__main__":
    main()
