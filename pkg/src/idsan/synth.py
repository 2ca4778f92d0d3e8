"""Synthetic embedding sets with a planted low-rank identity subspace.

Identity means live in a planted r*-dimensional subspace U*; an optional
per-image task attribute lives in a disjoint planted subspace orthogonal to
U*. Every image is ``normalize(mu_i + task + noise)`` with isotropic noise.
Scales are set so that ``||mu_i||`` is about ``signal_scale`` and the noise
vector norm is about ``noise_scale``; their ratio is the SNR.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import calib
from .embstore import EmbeddingSet, from_arrays, normalize, save_embeddings
from .projector import read_container, write_container
from .verifier import PairSet, cosine_rows


@dataclass(frozen=True)
class SynthConfig:
    dim: int = 128
    identities: int = 400
    images_per_identity: int = 20
    identity_rank: int = 64
    signal_scale: float = 1.0
    noise_scale: float = 0.25
    task_rank: int = 8
    task_classes: int = 8
    task_scale: float = 0.5
    splits: tuple[int, int, int] = (320, 40, 40)
    seed: int = 0
    # seed for the planted subspaces; defaults to ``seed``. Two configs with
    # the same basis_seed and different seeds are independent draws from
    # one planted model.
    basis_seed: int | None = None

    def __post_init__(self):
        if self.dim < 1 or self.identities < 1 or self.images_per_identity < 1:
            raise ValueError("dim, identities and images_per_identity must be positive")
        if self.identity_rank < 0 or self.task_rank < 0:
            raise ValueError("ranks must be non-negative")
        if self.identity_rank + self.task_rank > self.dim:
            raise ValueError("identity_rank + task_rank must not exceed dim")
        if min(self.signal_scale, self.noise_scale, self.task_scale) < 0:
            raise ValueError("scales must be non-negative")
        if self.task_rank and self.task_classes < 1:
            raise ValueError("task_classes must be positive when task_rank > 0")
        if sum(self.splits) != self.identities:
            raise ValueError(f"splits {self.splits} do not sum to {self.identities} identities")

    @property
    def snr(self) -> float:
        return self.signal_scale / self.noise_scale if self.noise_scale else float("inf")


@dataclass(frozen=True, eq=False)
class GroundTruth:
    basis: np.ndarray  # (d, r*) planted identity basis U*
    class_means: np.ndarray  # (m, d) un-normalized identity means
    task_basis: np.ndarray  # (d, task_rank)
    task_centers: np.ndarray  # (task_classes, d)


def planted_bases(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rng = np.random.default_rng([cfg.seed if cfg.basis_seed is None else cfg.basis_seed, 1])
    q, _ = np.linalg.qr(rng.standard_normal((cfg.dim, cfg.identity_rank + cfg.task_rank)))
    u_star = q[:, : cfg.identity_rank]
    v_star = q[:, cfg.identity_rank :]
    if cfg.task_rank:
        g = rng.standard_normal((cfg.task_classes, cfg.task_rank)) * (cfg.task_scale / np.sqrt(cfg.task_rank))
        centers = g @ v_star.T
    else:
        centers = np.zeros((max(cfg.task_classes, 1), cfg.dim))
    return u_star, v_star, centers


def generate(cfg: SynthConfig) -> tuple[EmbeddingSet, GroundTruth]:
    u_star, v_star, centers = planted_bases(cfg)
    rng = np.random.default_rng([cfg.seed, 2])
    m, n, d = cfg.identities, cfg.images_per_identity, cfg.dim
    if cfg.identity_rank:
        c = rng.standard_normal((m, cfg.identity_rank)) * (cfg.signal_scale / np.sqrt(cfg.identity_rank))
        means = c @ u_star.T
    else:
        means = np.zeros((m, d))
    identity_of = np.repeat(np.arange(m), n)
    task = rng.integers(0, len(centers), size=m * n)
    noise = rng.standard_normal((m * n, d)) * (cfg.noise_scale / np.sqrt(d))
    raw = means[identity_of] + centers[task] + noise
    labels = [f"id{i:05d}" for i in identity_of]
    names = [f"id{i:05d}" for i in range(m)]
    a, b, _ = cfg.splits
    splits = {"train": names[:a], "val": names[a : a + b], "test": names[a + b :]}
    emb = from_arrays(
        raw,
        labels,
        splits,
        balanced_n=n,
        task_labels=task if cfg.task_rank else None,
        tag=f"synth-d{d}-m{m}-r{cfg.identity_rank}-s{cfg.seed}",
    )
    emb = normalize(emb)
    return emb, GroundTruth(basis=u_star, class_means=means, task_basis=v_star, task_centers=centers)


def oracle_scores(truth: GroundTruth, emb: EmbeddingSet, pairs: PairSet) -> tuple[np.ndarray, np.ndarray]:
    """Cosine scores after projecting onto the planted identity basis."""
    proj = emb.vectors.astype(np.float64) @ truth.basis
    return cosine_rows(proj, pairs.mated), cosine_rows(proj, pairs.impostor)


def oracle_best_linear_tar(
    truth: GroundTruth,
    emb: EmbeddingSet,
    pairs: PairSet,
    far_target: float,
    *,
    calibration_pairs: PairSet | None = None,
) -> float:
    """TAR of the planted-basis verifier, calibrated on ``calibration_pairs`` (default: the same pairs)."""
    mated, imp = oracle_scores(truth, emb, pairs)
    cal = pairs if calibration_pairs is None else calibration_pairs
    cal_mated, cal_imp = oracle_scores(truth, emb, cal)
    op = calib.calibrate_threshold(cal_mated, cal_imp, far_target, min_impostors=0)
    return calib.tar_at_far(mated, imp, op).tar


def truth_path(path) -> Path:
    return Path(path).with_suffix(".truth.bin")


def save_synth(emb: EmbeddingSet, truth: GroundTruth, cfg: SynthConfig, path) -> Path:
    path = Path(path)
    save_embeddings(emb, path, extra={"synth_config": asdict(cfg)})
    payload = np.concatenate(
        [
            truth.basis.ravel(order="F"),
            truth.class_means.ravel(),
            truth.task_basis.ravel(order="F"),
            truth.task_centers.ravel(),
        ]
    )
    header = {
        "kind": "synth-truth",
        "dim": cfg.dim,
        "rank": cfg.identity_rank,
        "identities": cfg.identities,
        "task_rank": cfg.task_rank,
        "task_centers": int(truth.task_centers.shape[0]),
        "payload_len": int(payload.size),
    }
    write_container(truth_path(path), header, payload)
    return path


def load_truth(path) -> GroundTruth:
    header, p = read_container(truth_path(path))
    d, r, m = header["dim"], header["rank"], header["identities"]
    tr, tc = header["task_rank"], header["task_centers"]
    sizes = [d * r, m * d, d * tr, tc * d]
    parts = np.split(p, np.cumsum(sizes)[:-1])
    return GroundTruth(
        basis=parts[0].reshape((d, r), order="F"),
        class_means=parts[1].reshape((m, d)),
        task_basis=parts[2].reshape((d, tr), order="F"),
        task_centers=parts[3].reshape((tc, d)),
    )
