"""End-to-end open-set probing protocol and the sweeps built on it.

Seed derivation: every random sub-task takes ``derive_seed(seed, *tags)``,
a 64-bit BLAKE2b digest of the base seed and a tag tuple such as
``("calibration", k)``, ``("eval", k, j)`` or ``("pairs", "test", k, j)``.

For each k the protocol
  1. splits S_i/Q_i with the calibration seed, fits the probe on train
     supports for every candidate alpha, scores val pairs, and freezes the
     alpha and tau with the best val TAR at the target FAR;
  2. for each evaluation seed, re-splits S_i/Q_i, refits the probe with the
     frozen alpha on the new train supports, and scores test pairs against
     the frozen tau (``refit_per_seed=False`` reuses the calibration probe).
"""

from __future__ import annotations

import hashlib
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import calib
from .embstore import EmbeddingSet, ensure_normalized, make_support_query_split
from .errors import DegenerateVector, RankDeficient
from .projector import (
    apply_projector,
    fit_isp,
    fit_leace,
    principal_angles,
)
from .verifier import (
    RIDGE_ALPHAS,
    MlpConfig,
    audit_open_set,
    build_pairs,
    default_quota,
    fit_mlp_probe,
    fit_ridge_probe,
    score_pairs,
)

log = logging.getLogger(__name__)


def derive_seed(seed: int, *tags) -> int:
    digest = hashlib.blake2b(repr((int(seed),) + tags).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def worker_count() -> int:
    env = os.environ.get("IDSAN_THREADS")
    if env:
        return max(1, int(env))
    return max(1, min(4, os.cpu_count() or 1))


def pmap(fn, items):
    items = list(items)
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class ProbeSettings:
    probe: str = "ridge"
    far: float = 1e-4
    seeds: int = 5
    quota: int | None = None
    seed: int = 0
    alphas: tuple[float, ...] = RIDGE_ALPHAS
    mlp: MlpConfig = field(default_factory=MlpConfig)
    min_impostors: int = calib.FAR_TARGET_MIN_IMPOSTORS
    ci: str = "t"
    # True: each seed reshuffles every identity's S_i/Q_i and refits the probe
    # with the frozen alpha. False: the calibration probe is reused.
    refit_per_seed: bool = True


def _fit_probe(emb, sq, settings: ProbeSettings, alpha: float | None, seed_tag):
    if settings.probe == "ridge":
        return fit_ridge_probe(emb, sq, alpha)
    if settings.probe == "mlp":
        cfg = replace(settings.mlp, seed=derive_seed(settings.seed, "mlp", *seed_tag) % (2**31))
        return fit_mlp_probe(emb, sq, cfg)
    raise ValueError(f"unknown probe kind {settings.probe!r}")


def _quota(emb: EmbeddingSet, split: str, settings: ProbeSettings) -> int:
    if settings.quota is not None:
        return settings.quota
    return default_quota(len(emb.identities_in(split)), settings.min_impostors)


def calibrate(emb: EmbeddingSet, k: int, settings: ProbeSettings) -> dict:
    """Select alpha and tau on validation identities only."""
    sq = make_support_query_split(emb, k, derive_seed(settings.seed, "calibration", k))
    pairs = build_pairs(emb, "val", sq, _quota(emb, "val", settings), derive_seed(settings.seed, "pairs", "val", k))
    alphas = settings.alphas if settings.probe == "ridge" else (None,)

    def one(alpha):
        probe = _fit_probe(emb, sq, settings, alpha, ("calibration", k))
        mated, imp = score_pairs(probe, emb, pairs)
        op = calib.calibrate_threshold(mated, imp, settings.far, min_impostors=settings.min_impostors)
        return alpha, op, calib.tar_at_far(mated, imp, op), probe

    results = pmap(one, alphas)
    best = max(range(len(results)), key=lambda t: (results[t][2].tar, -t))
    alpha, op, val_tar, probe = results[best]
    return {
        "alpha": alpha,
        "operating_point": op,
        "val_tar": val_tar,
        "alpha_grid": [{"alpha": a, "val_tar": r.tar, "tau": o.tau} for a, o, r, _ in results],
        "pairs": pairs,
        "split": sq,
        "probe": probe,
    }


def evaluate_seed(emb: EmbeddingSet, k: int, j: int, settings: ProbeSettings, cal: dict) -> dict:
    sq = make_support_query_split(emb, k, derive_seed(settings.seed, "eval", k, j))
    if settings.refit_per_seed:
        probe = _fit_probe(emb, sq, settings, cal["alpha"], ("eval", k, j))
    else:
        probe = cal["probe"]
    pairs = build_pairs(emb, "test", sq, _quota(emb, "test", settings), derive_seed(settings.seed, "pairs", "test", k, j))
    mated, imp = score_pairs(probe, emb, pairs)
    result = calib.tar_at_far(mated, imp, cal["operating_point"])
    audit = audit_open_set(emb, sq, pairs, probe)
    return {"seed_index": j, "result": result, "audit": audit, "pairs": pairs.summary()}


def run_probe(emb: EmbeddingSet, k: int, settings: ProbeSettings) -> dict:
    """Calibrate on val, then evaluate the frozen operating point on test over seeds."""
    emb = ensure_normalized(emb)
    events = []
    cal = calibrate(emb, k, settings)
    events.append("calibrated")
    cal_audit = audit_open_set(emb, cal["split"], cal["pairs"], cal["probe"])
    seeds = pmap(lambda j: evaluate_seed(emb, k, j, settings, cal), range(settings.seeds))
    events.extend(f"test:{s['seed_index']}" for s in seeds)
    per_seed = [s["result"].tar for s in seeds]
    agg = calib.seed_aggregate(per_seed, method=settings.ci)
    op = cal["operating_point"]
    hygiene = {
        "support_in_pairs": cal_audit["support_in_pairs"] or any(s["audit"]["support_in_pairs"] for s in seeds),
        "nontrain_in_fit": cal_audit["nontrain_in_fit"] or any(s["audit"]["nontrain_in_fit"] for s in seeds),
        "train_in_pairs": cal_audit["train_in_pairs"] or any(s["audit"]["train_in_pairs"] for s in seeds),
        "tau_frozen_before_test": events[0] == "calibrated"
        and all(s["result"].tau == op.tau for s in seeds),
    }
    return {
        "k": k,
        "probe": settings.probe,
        "alpha": cal["alpha"],
        "alpha_grid": cal["alpha_grid"],
        "operating_point": op.to_dict(),
        "val": cal["val_tar"].to_dict(),
        "val_pairs": cal["pairs"].summary(),
        "per_seed": [
            {"seed_index": s["seed_index"], **s["result"].to_dict(), "pairs": s["pairs"]} for s in seeds
        ],
        "tar": agg.to_dict(),
        "hygiene": hygiene,
    }


# -- projections ----------------------------------------------------------


def fit_projection(emb: EmbeddingSet, kind: str, *, rank: int | None = None, lam: float | None = None,
                   whiten: bool = False, identities=None):
    emb = ensure_normalized(emb)
    if kind == "isp":
        if rank is None:
            raise ValueError("ISP needs --rank")
        return fit_isp(emb, rank, identities=identities, whiten=whiten).quantized()
    if kind == "leace":
        return fit_leace(emb, 1e-4 if lam is None else lam).quantized()
    raise ValueError(f"unknown projection {kind!r}")


def project(emb: EmbeddingSet, model) -> EmbeddingSet:
    if model is None:
        return ensure_normalized(emb)
    return apply_projector(model, ensure_normalized(emb))


def rank_sweep(emb: EmbeddingSet, ranks, k: int, settings: ProbeSettings, whiten: bool = False) -> list[dict]:
    """TAR per ISP rank; r = 0 is the unprojected baseline."""
    emb = ensure_normalized(emb)
    cells = []
    for r in ranks:
        cell = {"rank": int(r)}
        try:
            model = None if r == 0 else fit_projection(emb, "isp", rank=int(r), whiten=whiten)
            cell.update(run_probe(project(emb, model), k, settings))
            cell["status"] = "ok"
        except RankDeficient as exc:
            cell.update(status="RankDeficient", matrix_rank=exc.matrix_rank)
        except DegenerateVector as exc:
            cell.update(status="DegenerateVector", detail=str(exc))
        cells.append(cell)
    return cells


def identity_sweep(emb: EmbeddingSet, counts, rank: int, k: int, settings: ProbeSettings,
                   whiten: bool = False) -> list[dict]:
    """TAR as the ISP fit pool grows; the pool is a seeded subset of train identities."""
    emb = ensure_normalized(emb)
    train = emb.identities_in("train")
    order = np.random.default_rng(derive_seed(settings.seed, "identity-pool")).permutation(train)
    cells = []
    for m in counts:
        cell = {"identities": int(m), "rank": rank}
        if m > len(train):
            cell.update(status="InsufficientIdentities", available=int(len(train)))
            cells.append(cell)
            continue
        try:
            model = fit_projection(emb, "isp", rank=rank, whiten=whiten, identities=np.sort(order[:m]))
            cell.update(run_probe(project(emb, model), k, settings))
            cell["status"] = "ok"
        except RankDeficient as exc:
            cell.update(status="RankDeficient", matrix_rank=exc.matrix_rank)
        cells.append(cell)
    return cells


def transfer(emb_a: EmbeddingSet, emb_b: EmbeddingSet, rank: int, k: int, settings: ProbeSettings,
             whiten: bool = False) -> dict:
    """2x2 transfer: projectors fit on A and B, each evaluated on A and B."""
    emb_a, emb_b = ensure_normalized(emb_a), ensure_normalized(emb_b)
    if emb_a.dim != emb_b.dim:
        from .errors import DimError

        raise DimError(f"dataset dims differ: {emb_a.dim} vs {emb_b.dim}")
    p_a = fit_projection(emb_a, "isp", rank=rank, whiten=whiten)
    p_b = fit_projection(emb_b, "isp", rank=rank, whiten=whiten)
    cells = {}
    for eval_name, emb in (("A", emb_a), ("B", emb_b)):
        for fit_name, model in (("A", p_a), ("B", p_b)):
            label = "ISP-W" if fit_name == eval_name else "ISP-X"
            res = run_probe(project(emb, model), k, settings)
            res["label"] = label
            cells[f"fit{fit_name}_eval{eval_name}"] = res
    angles = principal_angles(p_a.basis, p_b.basis)
    return {"cells": cells, "principal_angles": angles.cosines.tolist(), "max_cosine": angles.max_cosine}


def settings_dict(settings: ProbeSettings) -> dict:
    d = asdict(settings)
    d["alphas"] = list(settings.alphas)
    return d
