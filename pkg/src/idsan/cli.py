"""``idsan`` command line.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical error.
Reports are canonical JSON (sorted keys, floats at 6 significant digits);
two runs with the same arguments differ only in ``timestamp``.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import attribution, protocol, utility
from .embstore import load_embeddings, read_sidecar, save_embeddings
from .errors import DataError, IdsanError, NumericalError
from .projector import IspModel, apply_projector, load_projector, principal_angles, save_projector
from .synth import SynthConfig, generate, save_synth
from .verifier import MlpConfig

REPORT_VERSION = 1
DEFAULT_KS = (1, 4, 16)
DEFAULT_RANKS = (0, 64, 96, 128, 192)
DEFAULT_IDENTITY_COUNTS = (320, 640, 1280, 2000)

log = logging.getLogger("idsan")


# -- report -----------------------------------------------------------------


def _canonical(obj):
    if isinstance(obj, dict):
        return {str(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _canonical(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return str(x)
        return float(f"{x:.6g}")
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_canonical(obj), sort_keys=True, indent=2) + "\n"


@dataclass
class AuditReport:
    command: str
    config: dict
    results: dict
    timestamp: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds"))
    format_version: int = REPORT_VERSION

    def to_json(self) -> str:
        return canonical_json(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "AuditReport":
        return cls(**json.loads(text))


def emit(report: AuditReport, out: str | None) -> None:
    text = report.to_json()
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# -- argument parsing -------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", help="report path (default: stdout)")
    p.add_argument("--seed", type=int, default=0, help="base seed; sub-task seeds derive from it")


def _projection_flags(p: argparse.ArgumentParser, default: str = "none") -> None:
    p.add_argument("--project", choices=("none", "isp", "leace"), default=default)
    p.add_argument("--rank", type=int, help="ISP rank r")
    p.add_argument("--lambda", dest="lam", type=float, help="LEACE ridge lambda")
    p.add_argument("--whiten", action="store_true", help="fit ISP in the within-class whitened metric")


def _probe_flags(p: argparse.ArgumentParser, ks=DEFAULT_KS) -> None:
    p.add_argument("--emb", required=True, help="EMB1 file with sidecar")
    p.add_argument("--probe", choices=("ridge", "mlp"), default="ridge")
    p.add_argument("--k", type=int, nargs="+", default=list(ks), help="support images per identity")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--far", type=float, default=1e-4)
    p.add_argument("--quota", type=int, help="impostor pairs per ordered identity pair")
    p.add_argument("--epochs", type=int, default=MlpConfig.epochs, help="MLP probe epochs")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="idsan", description="Audit and remove identity information in frozen embeddings.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("probe", help="open-set verification probe")
    _probe_flags(p)
    _projection_flags(p)
    _common(p)

    p = sub.add_parser("sweep-rank", help="TAR across ISP ranks (0 = raw)")
    _probe_flags(p, ks=(16,))
    p.add_argument("--ranks", type=int, nargs="+", default=list(DEFAULT_RANKS))
    p.add_argument("--whiten", action="store_true")
    _common(p)

    p = sub.add_parser("sweep-identities", help="TAR as the ISP fit pool grows")
    _probe_flags(p, ks=(16,))
    p.add_argument("--identities", type=int, nargs="+", default=list(DEFAULT_IDENTITY_COUNTS))
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--whiten", action="store_true")
    _common(p)

    p = sub.add_parser("transfer", help="2x2 within/cross-dataset ISP transfer")
    _probe_flags(p)
    p.add_argument("--emb-b", required=True)
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--whiten", action="store_true")
    _common(p)

    p = sub.add_parser("attrib", help="FII / CPI / B* and mask geometry")
    p.add_argument("--emb", help="variant embeddings whose sidecar carries an 'attribution' index")
    p.add_argument("--projector", help="also report after applying this projector")
    p.add_argument("--mask", help="binary PGM face mask for the equal-area annulus")
    p.add_argument("--tolerance", type=float, default=attribution.AREA_TOLERANCE)
    p.add_argument("--bbox", type=float, nargs=4, metavar=("X1", "Y1", "X2", "Y2"))
    p.add_argument("--image-dims", type=int, nargs=2, metavar=("W", "H"))
    p.add_argument("--fcr", type=float, default=attribution.FCR_TARGET)
    _common(p)

    p = sub.add_parser("utility", help="task utility retention after projection")
    p.add_argument("--emb", required=True)
    _projection_flags(p, default="isp")
    p.add_argument("--knn-k", type=int, default=utility.KNN_K)
    p.add_argument("--alpha", type=float, default=1.0, help="linear probe ridge alpha")
    _common(p)

    p = sub.add_parser("synth", help="write a synthetic set with a planted identity subspace")
    p.add_argument("--out", required=True, help="EMB1 output path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--basis-seed", type=int)
    p.add_argument("--dim", type=int, default=SynthConfig.dim)
    p.add_argument("--identities", type=int, default=SynthConfig.identities)
    p.add_argument("--images", type=int, default=SynthConfig.images_per_identity)
    p.add_argument("--identity-rank", type=int, default=SynthConfig.identity_rank)
    p.add_argument("--noise", type=float, default=SynthConfig.noise_scale)
    p.add_argument("--task-rank", type=int, default=SynthConfig.task_rank)
    p.add_argument("--splits", type=int, nargs=3, metavar=("TRAIN", "VAL", "TEST"))

    p = sub.add_parser("fit", help="fit an ISP or LEACE projector on train identities")
    p.add_argument("--emb", required=True)
    _projection_flags(p, default="isp")
    p.add_argument("--out", required=True, help="projector output path")

    p = sub.add_parser("apply", help="apply a saved projector to an embedding set")
    p.add_argument("--emb", required=True)
    p.add_argument("--projector", required=True)
    p.add_argument("--out", required=True, help="EMB1 output path")

    p = sub.add_parser("angles", help="principal angles between two ISP bases")
    p.add_argument("--projector", help="ISP projector A")
    p.add_argument("--projector-b", help="ISP projector B")
    p.add_argument("--emb", help="fit A from this set instead")
    p.add_argument("--emb-b", help="fit B from this set instead")
    p.add_argument("--rank", type=int)
    p.add_argument("--whiten", action="store_true")
    p.add_argument("--out")
    return parser


# -- commands ---------------------------------------------------------------


def _settings(args) -> protocol.ProbeSettings:
    return protocol.ProbeSettings(
        probe=args.probe,
        far=args.far,
        seeds=args.seeds,
        quota=args.quota,
        seed=args.seed,
        mlp=MlpConfig(epochs=args.epochs),
    )


def _model_tag(kind: str, rank=None, lam=None, whiten=False) -> str:
    if kind == "none":
        return "raw"
    if kind == "isp":
        return f"isp{'-w' if whiten else ''}-r{rank}"
    return f"leace-l{lam if lam is not None else 1e-4:g}"


def _probe_config(args, emb, extra: dict | None = None) -> dict:
    cfg = {
        "dataset": emb.tag,
        "rows": emb.count,
        "dim": emb.dim,
        "k": list(args.k),
        "settings": protocol.settings_dict(_settings(args)),
    }
    cfg.update(extra or {})
    return cfg


def _hygiene(runs) -> dict:
    keys = ("support_in_pairs", "nontrain_in_fit", "train_in_pairs")
    out = {k: any(r["hygiene"][k] for r in runs) for k in keys}
    out["tau_frozen_before_test"] = all(r["hygiene"]["tau_frozen_before_test"] for r in runs)
    return out


def cmd_probe(args) -> AuditReport:
    emb = load_embeddings(args.emb)
    model = None
    if args.project != "none":
        model = protocol.fit_projection(emb, args.project, rank=args.rank, lam=args.lam, whiten=args.whiten)
    projected = protocol.project(emb, model)
    settings = _settings(args)
    runs = [protocol.run_probe(projected, k, settings) for k in args.k]
    config = _probe_config(
        args,
        emb,
        {
            "model": _model_tag(args.project, args.rank, args.lam, args.whiten),
            "projection": args.project,
            "rank": args.rank,
            "lambda": args.lam,
            "whiten": args.whiten,
        },
    )
    hygiene = _hygiene(runs)
    return AuditReport(
        "probe",
        config,
        {"runs": runs, "hygiene": hygiene, "tau_frozen_before_test": hygiene["tau_frozen_before_test"]},
    )


def _sweep_report(name, args, emb, cells_by_k, extra) -> AuditReport:
    runs = [c for cells in cells_by_k.values() for c in cells if c.get("status") == "ok"]
    hygiene = _hygiene(runs) if runs else {"tau_frozen_before_test": True}
    results = {
        "grid": [{"k": k, "cells": cells} for k, cells in cells_by_k.items()],
        "hygiene": hygiene,
        "tau_frozen_before_test": hygiene["tau_frozen_before_test"],
    }
    return AuditReport(name, _probe_config(args, emb, extra), results)


def cmd_sweep_rank(args) -> AuditReport:
    emb = load_embeddings(args.emb)
    settings = _settings(args)
    cells = {k: protocol.rank_sweep(emb, args.ranks, k, settings, whiten=args.whiten) for k in args.k}
    return _sweep_report("sweep-rank", args, emb, cells, {"ranks": args.ranks, "whiten": args.whiten})


def cmd_sweep_identities(args) -> AuditReport:
    emb = load_embeddings(args.emb)
    settings = _settings(args)
    cells = {
        k: protocol.identity_sweep(emb, args.identities, args.rank, k, settings, whiten=args.whiten) for k in args.k
    }
    extra = {"identity_counts": args.identities, "rank": args.rank, "whiten": args.whiten}
    return _sweep_report("sweep-identities", args, emb, cells, extra)


def cmd_transfer(args) -> AuditReport:
    emb_a, emb_b = load_embeddings(args.emb), load_embeddings(args.emb_b)
    settings = _settings(args)
    per_k = [protocol.transfer(emb_a, emb_b, args.rank, k, settings, whiten=args.whiten) for k in args.k]
    runs = [c for t in per_k for c in t["cells"].values()]
    hygiene = _hygiene(runs)
    config = _probe_config(args, emb_a, {"dataset_b": emb_b.tag, "rank": args.rank, "whiten": args.whiten})
    results = {
        "transfer": [{"k": k, **t} for k, t in zip(args.k, per_k)],
        "hygiene": hygiene,
        "tau_frozen_before_test": hygiene["tau_frozen_before_test"],
    }
    return AuditReport("transfer", config, results)


def _attribution_blocks(vectors: np.ndarray, index: dict) -> dict:
    """Assemble FII pairs and CPI / B* triplets from (kind, triplet, role, level) -> row entries."""
    groups: dict[tuple[str, str], dict] = {}
    for entry in index.get("rows", []):
        key = (entry["kind"], str(entry["triplet"]))
        slot = groups.setdefault(key, {})
        level = entry.get("level")
        if level is None:
            slot[entry["role"]] = vectors[int(entry["row"])]
        else:
            slot.setdefault(entry["role"], {})[float(level)] = vectors[int(entry["row"])]
    out = {}
    fii_pairs = [
        attribution.OcclusionPair(**{role: g[role] for role in attribution.OcclusionPair.__dataclass_fields__})
        for (kind, _), g in sorted(groups.items())
        if kind == "fii"
    ]
    if fii_pairs:
        out["fii"] = asdict(attribution.fii(fii_pairs))

    def series(g, role, levels):
        v = g[role]
        return np.stack([v[lv] for lv in levels]) if isinstance(v, dict) else v

    for kind in ("cpi", "bstar"):
        members = [g for (k, _), g in sorted(groups.items()) if k == kind]
        if not members:
            continue
        levels = sorted(members[0]["query"])
        triplets = [
            attribution.AttributionTriplet(series(g, "query", levels), series(g, "id", levels), series(g, "ctx", levels))
            for g in members
        ]
        if kind == "cpi":
            out["cpi"] = asdict(attribution.cpi_curve(triplets, levels))
        else:
            out["b_star"] = asdict(attribution.b_star(triplets, levels))
    return out


def cmd_attrib(args) -> AuditReport:
    results: dict = {}
    config: dict = {}
    if args.emb:
        emb = load_embeddings(args.emb)
        index = read_sidecar(args.emb).get("attribution")
        if index is None:
            raise DataError(f"{args.emb}: sidecar has no 'attribution' index")
        config["dataset"] = emb.tag
        results["raw"] = _attribution_blocks(emb.vectors.astype(np.float64), index)
        if args.projector:
            model = load_projector(args.projector)
            projected = apply_projector(model, protocol.project(emb, None))
            config["projector"] = args.projector
            results["projected"] = _attribution_blocks(projected.vectors.astype(np.float64), index)
    if args.mask:
        ring = attribution.equal_area_annulus(attribution.read_mask(args.mask), args.tolerance)
        results["annulus"] = {"width": ring.width, "area_ratio": ring.area_ratio, "tolerance": args.tolerance}
    if args.bbox:
        if not args.image_dims:
            raise ValueError("--bbox needs --image-dims")
        results["crop"] = asdict(attribution.fcr_crop(args.bbox, args.image_dims, args.fcr))
    if not results:
        raise ValueError("attrib needs --emb, --mask or --bbox")
    return AuditReport("attrib", config, results)


def cmd_utility(args) -> AuditReport:
    emb = protocol.project(load_embeddings(args.emb), None)
    kind = args.project
    model = None if kind == "none" else protocol.fit_projection(emb, kind, rank=args.rank, lam=args.lam, whiten=args.whiten)
    projected = protocol.project(emb, model)
    rows = utility.utility_report(emb, projected, k=args.knn_k, alpha=args.alpha)
    recall = {r.metric: r.projected for r in rows if r.metric.startswith("recall@")}
    config = {
        "dataset": emb.tag,
        "model": _model_tag(kind, args.rank, args.lam, args.whiten),
        "knn_k": args.knn_k,
        "alpha": args.alpha,
    }
    vals = list(recall.values())
    results = {
        "utility": [r.to_dict() for r in rows],
        "recall_monotone": bool(all(a <= b for a, b in zip(vals, vals[1:]))),
    }
    return AuditReport("utility", config, results)


def cmd_synth(args) -> AuditReport:
    splits = tuple(args.splits) if args.splits else None
    if splits is None:
        test = args.identities // 10
        splits = (args.identities - 2 * test, test, test)
    cfg = SynthConfig(
        dim=args.dim,
        identities=args.identities,
        images_per_identity=args.images,
        identity_rank=args.identity_rank,
        noise_scale=args.noise,
        task_rank=args.task_rank,
        splits=splits,
        seed=args.seed,
        basis_seed=args.basis_seed,
    )
    emb, truth = generate(cfg)
    path = save_synth(emb, truth, cfg, args.out)
    return AuditReport("synth", asdict(cfg), {"path": str(path), "rows": emb.count, "tag": emb.tag})


def cmd_fit(args) -> AuditReport:
    if args.project == "none":
        raise ValueError("fit needs --project isp or leace")
    emb = load_embeddings(args.emb)
    model = protocol.fit_projection(emb, args.project, rank=args.rank, lam=args.lam, whiten=args.whiten)
    save_projector(model, args.out)
    return AuditReport(
        "fit",
        {"dataset": emb.tag, "model": _model_tag(args.project, args.rank, args.lam, args.whiten)},
        {"path": args.out, "rank": model.rank, "provenance": model.provenance},
    )


def cmd_apply(args) -> AuditReport:
    emb = load_embeddings(args.emb)
    model = load_projector(args.projector)
    out = apply_projector(model, protocol.project(emb, None))
    save_embeddings(out, args.out)
    return AuditReport("apply", {"dataset": emb.tag, "projector": args.projector}, {"path": args.out, "tag": out.tag})


def _basis(path, emb_path, rank, whiten):
    if path:
        model = load_projector(path)
        if not isinstance(model, IspModel):
            raise DataError(f"{path} is not an ISP projector")
        return model
    if emb_path and rank:
        return protocol.fit_projection(load_embeddings(emb_path), "isp", rank=rank, whiten=whiten)
    raise ValueError("angles needs --projector/--projector-b or --emb/--emb-b with --rank")


def cmd_angles(args) -> AuditReport:
    a = _basis(args.projector, args.emb, args.rank, args.whiten)
    b = _basis(args.projector_b, args.emb_b, args.rank, args.whiten)
    angles = principal_angles(a.basis, b.basis)
    results = {
        "cosines": angles.cosines,
        "angles_deg": angles.angles_deg(),
        "max_cosine": angles.max_cosine,
        "rank_a": a.rank,
        "rank_b": b.rank,
    }
    return AuditReport("angles", {"rank": args.rank, "whiten": args.whiten}, results)


COMMANDS = {
    "probe": cmd_probe,
    "sweep-rank": cmd_sweep_rank,
    "sweep-identities": cmd_sweep_identities,
    "transfer": cmd_transfer,
    "attrib": cmd_attrib,
    "utility": cmd_utility,
    "synth": cmd_synth,
    "fit": cmd_fit,
    "apply": cmd_apply,
    "angles": cmd_angles,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        report = COMMANDS[args.command](args)
        emit(report, args.out if args.command not in ("synth", "fit", "apply") else None)
    except NumericalError as exc:
        print(f"idsan: numerical error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except (IdsanError, OSError) as exc:
        print(f"idsan: data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"idsan: usage error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
