"""TAR of RAW, ISP and LEACE on a synthetic draw across the k grid."""

import argparse

from idsan.protocol import ProbeSettings, fit_projection, project, run_probe
from idsan.synth import SynthConfig, generate


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--rank", type=int, default=64)
    ap.add_argument("--far", type=float, default=1e-3)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--k", type=int, nargs="+", default=[1, 4, 16])
    args = ap.parse_args()

    emb, _ = generate(SynthConfig(seed=args.seed))
    settings = ProbeSettings(far=args.far, seeds=args.seeds)
    variants = {
        "RAW": emb,
        f"ISP r={args.rank}": project(emb, fit_projection(emb, "isp", rank=args.rank)),
        "LEACE": project(emb, fit_projection(emb, "leace")),
    }
    print(f"{'variant':<12}" + "".join(f"{'k=' + str(k):>24}" for k in args.k))
    for name, data in variants.items():
        row = []
        for k in args.k:
            t = run_probe(data, k, settings)["tar"]
            row.append(f"{t['tar']:.4f} [{t['ci_low']:.4f},{t['ci_high']:.4f}]")
        print(f"{name:<12}" + "".join(f"{c:>24}" for c in row))


if __name__ == "__main__":
    main()
