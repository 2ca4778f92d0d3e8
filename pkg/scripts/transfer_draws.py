"""Repeat the two-draw transfer experiment and count CI containment per k.

Each trial fits ISP on two independent draws from one planted model and
checks whether the cross-fit TAR falls inside the self-fit 95% CI.
"""

import argparse

from idsan.protocol import ProbeSettings, transfer
from idsan.synth import SynthConfig, generate


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--trials", type=int, default=10)
    ap.add_argument("--rank", type=int, default=64)
    ap.add_argument("--far", type=float, default=1e-3)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--k", type=int, nargs="+", default=[1, 4, 16])
    args = ap.parse_args()

    settings = ProbeSettings(far=args.far, seeds=args.seeds)
    inside = {k: 0 for k in args.k}
    for trial in range(args.trials):
        a, _ = generate(SynthConfig(seed=2 * trial, basis_seed=trial))
        b, _ = generate(SynthConfig(seed=2 * trial + 1, basis_seed=trial))
        for k in args.k:
            t = transfer(a, b, args.rank, k, settings)
            c = t["cells"]
            ok = True
            for data, other in (("A", "B"), ("B", "A")):
                w = c[f"fit{data}_eval{data}"]["tar"]
                x = c[f"fit{other}_eval{data}"]["tar"]["tar"]
                ok &= w["ci_low"] <= x <= w["ci_high"]
            inside[k] += ok
            print(f"trial {trial} k={k:2d} max cos {t['max_cosine']:.5f} inside CI: {ok}")
    for k in args.k:
        print(f"k={k:2d}: {inside[k]}/{args.trials} trials inside both CIs")


if __name__ == "__main__":
    main()
