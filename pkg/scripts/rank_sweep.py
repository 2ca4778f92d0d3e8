"""TAR as a function of ISP rank on a synthetic draw."""

import argparse

from idsan.protocol import ProbeSettings, rank_sweep
from idsan.synth import SynthConfig, generate


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--ranks", type=int, nargs="+", default=[0, 8, 16, 32, 48, 64, 96])
    ap.add_argument("--k", type=int, default=16)
    ap.add_argument("--far", type=float, default=1e-3)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--whiten", action="store_true")
    args = ap.parse_args()

    emb, truth = generate(SynthConfig(seed=args.seed))
    print(f"planted identity rank {truth.basis.shape[1]}")
    for cell in rank_sweep(emb, args.ranks, args.k, ProbeSettings(far=args.far, seeds=args.seeds), args.whiten):
        if cell["status"] == "ok":
            print(f"r={cell['rank']:4d}  TAR {cell['tar']['tar']:.4f}")
        else:
            print(f"r={cell['rank']:4d}  {cell['status']}")


if __name__ == "__main__":
    main()
