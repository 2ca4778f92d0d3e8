"""Open-set verification probes and pair construction.

Evaluation pairs come only from query images (Q_i) of val/test identities;
probes only ever see train identities. A probe is a map g from embeddings
to a projection space and the pair score is cos(g(a), g(b)).
"""

from __future__ import annotations

import json
import logging
import math
import threading
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .embstore import EmbeddingSet, SupportQuerySplit
from .errors import DimError, EmptyImpostors, FormatError, SingularSystem, TrainingDiverged
from .projector import one_hot, read_container, write_container

log = logging.getLogger(__name__)
# torch's global generator seeds weight init; concurrent fits must not interleave
_INIT_LOCK = threading.Lock()

RIDGE_ALPHAS = (1e-3, 1e-2, 1e-1, 1.0, 10.0)


@dataclass(frozen=True, eq=False)
class PairSet:
    mated: np.ndarray  # (M, 2) row indices
    impostor: np.ndarray  # (N, 2) row indices
    quota_per_identity_pair: int
    seed: int
    split: str = ""
    identity_count: int = 0

    @property
    def min_far(self) -> float:
        return 1.0 / len(self.impostor)

    def rows(self) -> np.ndarray:
        return np.unique(np.concatenate([self.mated.ravel(), self.impostor.ravel()]))

    def summary(self) -> dict:
        return {
            "split": self.split,
            "identities": self.identity_count,
            "mated": int(len(self.mated)),
            "impostor": int(len(self.impostor)),
            "quota_per_identity_pair": self.quota_per_identity_pair,
            "seed": self.seed,
            "min_far": self.min_far,
        }

    def save(self, path) -> Path:
        path = Path(path)
        doc = {
            "summary": self.summary(),
            "mated": self.mated.ravel().tolist(),
            "impostor": self.impostor.ravel().tolist(),
        }
        path.write_text(json.dumps(doc, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "PairSet":
        doc = json.loads(Path(path).read_text())
        s = doc["summary"]
        return cls(
            mated=np.asarray(doc["mated"], dtype=np.int64).reshape(-1, 2),
            impostor=np.asarray(doc["impostor"], dtype=np.int64).reshape(-1, 2),
            quota_per_identity_pair=int(s["quota_per_identity_pair"]),
            seed=int(s["seed"]),
            split=s.get("split", ""),
            identity_count=int(s.get("identities", 0)),
        )


def default_quota(identity_count: int, target_total: int = 10_000) -> int:
    """Smallest per-ordered-pair quota reaching ``target_total`` impostors."""
    ordered = identity_count * (identity_count - 1)
    return max(1, math.ceil(target_total / ordered)) if ordered else 1


def _pair_rng(seed: int, identity: int) -> np.random.Generator:
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, identity], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def build_pairs(
    emb: EmbeddingSet,
    split: str,
    sq: SupportQuerySplit,
    quota: int,
    seed: int,
) -> PairSet:
    """Exhaustive mated pairs within each Q_i plus quota-sampled impostors.

    For every ordered identity pair (i, j), i != j, up to ``quota`` distinct
    (a, b) with a in Q_i and b in Q_j are drawn without replacement.
    """
    if quota < 1:
        raise ValueError("quota must be >= 1")
    ids = emb.identities_in(split)
    mated = []
    for i in ids:
        q = sq.query_of[int(i)]
        if len(q) < 2:
            log.warning("identity %s has %d query images; no mated pairs", emb.identity_labels[i], len(q))
            continue
        a, b = np.triu_indices(len(q), k=1)
        mated.append(np.stack([q[a], q[b]], axis=1))
    impostor = []
    for i in ids:
        qi = sq.query_of[int(i)]
        rng = _pair_rng(seed, int(i))
        for j in ids:
            if j == i:
                continue
            qj = sq.query_of[int(j)]
            total = len(qi) * len(qj)
            if total == 0:
                continue
            pick = rng.choice(total, size=min(quota, total), replace=False)
            impostor.append(np.stack([qi[pick // len(qj)], qj[pick % len(qj)]], axis=1))
    if not impostor:
        raise EmptyImpostors(f"split {split!r} yields no impostor pairs")
    return PairSet(
        mated=np.concatenate(mated) if mated else np.zeros((0, 2), dtype=np.int64),
        impostor=np.concatenate(impostor),
        quota_per_identity_pair=quota,
        seed=seed,
        split=split,
        identity_count=len(ids),
    )


def cosine_rows(proj: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    """Cosine between rows pairs[:, 0] and pairs[:, 1]; zero vectors score 0."""
    proj = np.asarray(proj, dtype=np.float64)
    norms = np.linalg.norm(proj, axis=1)
    zero = norms == 0.0
    if zero.any():
        log.info("%d projected vectors are zero; their pairs score 0", int(zero.sum()))
    unit = np.divide(proj, norms[:, None], out=np.zeros_like(proj), where=~zero[:, None])
    if len(pairs) == 0:
        return np.zeros(0)
    return np.einsum("ij,ij->i", unit[pairs[:, 0]], unit[pairs[:, 1]])


@dataclass(frozen=True, eq=False)
class RidgeProbe:
    projection: np.ndarray  # (d, r_probe)
    center: np.ndarray  # (d,) train support mean
    alpha: float
    fit_identities: tuple[int, ...] = ()

    @property
    def dim(self) -> int:
        return self.projection.shape[0]

    @property
    def r_probe(self) -> int:
        return self.projection.shape[1]

    def project(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.center) @ self.projection


def fit_ridge_probe(
    emb: EmbeddingSet,
    sq: SupportQuerySplit,
    alpha: float,
    r_probe: int | None = None,
    split: str = "train",
) -> RidgeProbe:
    """Ridge regression from train support embeddings to one-hot identity targets.

    The coefficient matrix is used as the projection W. ``r_probe`` below the
    number of train identities gives the reduced-rank solution.
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    ids = emb.identities_in(split)
    rows = sq.support_rows(ids)
    if len(rows) == 0:
        raise ValueError(f"no support embeddings for split {split!r}")
    x = emb.vectors[rows].astype(np.float64)
    y = one_hot(emb.identity_of[rows])
    center = x.mean(axis=0)
    xc = x - center
    yc = y - y.mean(axis=0)
    gram = xc.T @ xc + alpha * np.eye(emb.dim)
    if alpha == 0 and np.linalg.matrix_rank(gram) < emb.dim:
        raise SingularSystem("alpha = 0 with a rank-deficient Gram matrix")
    w = np.linalg.solve(gram, xc.T @ yc)
    if r_probe is not None and r_probe < w.shape[1]:
        _, _, vt = np.linalg.svd(xc @ w, full_matrices=False)
        w = w @ vt[:r_probe].T
    return RidgeProbe(projection=w, center=center, alpha=float(alpha), fit_identities=tuple(int(i) for i in ids))


@dataclass(frozen=True)
class MlpConfig:
    hidden: int = 512
    out_dim: int = 128
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 256
    seed: int = 0
    scale_init: float = 10.0
    max_pairs: int = 20_000  # cap on mated (and on impostor) training pairs
    smooth_window: int = 5
    patience: int = 5


@dataclass(frozen=True, eq=False)
class MlpProbe:
    weights: tuple[np.ndarray, ...]  # W1 (d,h), W2 (h,h), W3 (h,out)
    biases: tuple[np.ndarray, ...]
    scale: float
    config: MlpConfig
    loss_history: tuple[float, ...] = ()
    aborted: bool = False
    report: str = ""
    fit_identities: tuple[int, ...] = ()
    activation: str = "relu"

    @property
    def dim(self) -> int:
        return self.weights[0].shape[0]

    def project(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if k < last:
                h = np.maximum(h, 0.0)
        return h


def training_pairs(emb: EmbeddingSet, sq: SupportQuerySplit, seed: int, max_pairs: int, split: str = "train"):
    """Query-support pairs over train identities: (q in Q_i, s in S_i) mated, (q in Q_i, s in S_j) impostor."""
    ids = emb.identities_in(split)
    rng = np.random.default_rng([seed, 7])
    mated = [
        np.stack(np.meshgrid(sq.query_of[int(i)], sq.support_of[int(i)], indexing="ij"), -1).reshape(-1, 2)
        for i in ids
    ]
    mated = np.concatenate(mated)
    if len(mated) > max_pairs:
        mated = mated[np.sort(rng.choice(len(mated), max_pairs, replace=False))]
    # impostors: as many as mated, spread evenly over query identities
    n_imp = len(mated)
    qi = rng.choice(ids, size=n_imp)
    offset = rng.integers(1, len(ids), size=n_imp)
    pos = np.searchsorted(ids, qi)
    sj = ids[(pos + offset) % len(ids)]
    a = np.array([rng.choice(sq.query_of[int(i)]) for i in qi])
    b = np.array([rng.choice(sq.support_of[int(j)]) for j in sj])
    impostor = np.stack([a, b], axis=1)
    pairs = np.concatenate([mated, impostor])
    labels = np.concatenate([np.ones(len(mated)), np.zeros(len(impostor))])
    return pairs, labels


def fit_mlp_probe(
    emb: EmbeddingSet,
    sq: SupportQuerySplit,
    config: MlpConfig = MlpConfig(),
    split: str = "train",
) -> MlpProbe:
    """Train d -> h -> h -> out with BCE on sigmoid(s * cos(g(a), g(b))), s learned."""
    import torch

    ids = emb.identities_in(split)
    x_all = torch.from_numpy(emb.vectors.astype(np.float32))
    with _INIT_LOCK, torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        net = torch.nn.Sequential(
            torch.nn.Linear(emb.dim, config.hidden),
            torch.nn.ReLU(),
            torch.nn.Linear(config.hidden, config.hidden),
            torch.nn.ReLU(),
            torch.nn.Linear(config.hidden, config.out_dim),
        ).double()
    log_scale = torch.nn.Parameter(torch.tensor(math.log(config.scale_init), dtype=torch.float64))
    history: list[float] = []
    aborted, report = False, ""
    if config.epochs > 0:
        if sq.k < 1:
            raise ValueError("MLP probe needs at least one support image per identity")
        pairs, labels = training_pairs(emb, sq, config.seed, config.max_pairs, split)
        pairs_t = torch.from_numpy(pairs)
        labels_t = torch.from_numpy(labels)
        x_all = x_all.double()
        params = list(net.parameters()) + [log_scale]
        opt = torch.optim.Adam(params, lr=config.lr)
        steps_per_epoch = math.ceil(len(pairs) / config.batch_size)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=config.epochs * steps_per_epoch)
        gen = torch.Generator().manual_seed(config.seed)
        loss_fn = torch.nn.BCEWithLogitsLoss()
        best, bad_epochs = math.inf, 0
        for epoch in range(config.epochs):
            order = torch.randperm(len(pairs), generator=gen)
            total = 0.0
            for start in range(0, len(pairs), config.batch_size):
                idx = order[start : start + config.batch_size]
                pa, pb = pairs_t[idx, 0], pairs_t[idx, 1]
                ga = torch.nn.functional.normalize(net(x_all[pa]), dim=1)
                gb = torch.nn.functional.normalize(net(x_all[pb]), dim=1)
                logits = log_scale.exp() * (ga * gb).sum(dim=1)
                loss = loss_fn(logits, labels_t[idx])
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"loss became {loss.item()} at epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                sched.step()
                total += loss.item() * len(idx)
            history.append(total / len(pairs))
            smooth = float(np.mean(history[-config.smooth_window :]))
            if smooth < best:
                best, bad_epochs = smooth, 0
            else:
                bad_epochs += 1
                if bad_epochs >= config.patience:
                    aborted = True
                    report = (
                        f"smoothed loss stopped decreasing for {bad_epochs} epochs "
                        f"(best {best:.4f}, now {smooth:.4f}) at epoch {epoch}"
                    )
                    log.warning("MLP training aborted: %s", report)
                    break
    linears = [m for m in net if isinstance(m, torch.nn.Linear)]
    return MlpProbe(
        weights=tuple(m.weight.detach().numpy().T.copy() for m in linears),
        biases=tuple(m.bias.detach().numpy().copy() for m in linears),
        scale=float(log_scale.exp().item()),
        config=config,
        loss_history=tuple(history),
        aborted=aborted,
        report=report,
        fit_identities=tuple(int(i) for i in ids),
    )


def score_pairs(probe, emb: EmbeddingSet, pairs: PairSet) -> tuple[np.ndarray, np.ndarray]:
    """Raw (mated, impostor) cosine scores in the probe's projection space."""
    if probe.dim != emb.dim:
        raise DimError(f"probe dim {probe.dim} != embedding dim {emb.dim}")
    rows = pairs.rows()
    proj = np.zeros((emb.count, 0))
    if len(rows):
        sub = probe.project(emb.vectors[rows])
        proj = np.zeros((emb.count, sub.shape[1]))
        proj[rows] = sub
    return cosine_rows(proj, pairs.mated), cosine_rows(proj, pairs.impostor)


def audit_open_set(emb: EmbeddingSet, sq: SupportQuerySplit, pairs: PairSet, probe) -> dict:
    """Check that no support image is paired and that the probe saw only train identities."""
    support = set()
    for rows in sq.support_of.values():
        support.update(int(r) for r in rows)
    paired = set(int(r) for r in pairs.rows())
    pair_ids = set(int(emb.identity_of[r]) for r in paired)
    train = set(int(i) for i in emb.identities_in("train"))
    return {
        "support_in_pairs": bool(support & paired),
        "nontrain_in_fit": bool(set(probe.fit_identities) - train),
        "train_in_pairs": bool(pair_ids & train),
    }


# -- serialization ----------------------------------------------------------


def save_probe(probe, path) -> Path:
    if isinstance(probe, RidgeProbe):
        payload = np.concatenate([probe.projection.ravel(order="F"), probe.center])
        header = {
            "kind": "ridge",
            "dim": probe.dim,
            "rank": probe.r_probe,
            "alpha": probe.alpha,
            "fit_identities": list(probe.fit_identities),
            "provenance": "",
        }
    elif isinstance(probe, MlpProbe):
        parts = []
        for w, b in zip(probe.weights, probe.biases):
            parts += [w.ravel(order="F"), b]
        payload = np.concatenate(parts + [np.array([probe.scale])])
        header = {
            "kind": "mlp",
            "dim": probe.dim,
            "rank": int(probe.weights[-1].shape[1]),
            "layers": [list(w.shape) for w in probe.weights],
            "activation": probe.activation,
            "config": asdict(probe.config),
            "loss_history": list(probe.loss_history),
            "fit_identities": list(probe.fit_identities),
            "provenance": "",
        }
    else:
        raise TypeError(f"cannot save {type(probe).__name__}")
    header["payload_len"] = int(payload.size)
    return write_container(path, header, payload)


def load_probe(path):
    header, p = read_container(path)
    kind = header.get("kind")
    d = int(header["dim"])
    if kind == "ridge":
        r = int(header["rank"])
        return RidgeProbe(
            projection=p[: d * r].reshape((d, r), order="F"),
            center=p[d * r :].copy(),
            alpha=float(header["alpha"]),
            fit_identities=tuple(header.get("fit_identities", [])),
        )
    if kind == "mlp":
        weights, biases, pos = [], [], 0
        for rows, cols in header["layers"]:
            weights.append(p[pos : pos + rows * cols].reshape((rows, cols), order="F"))
            pos += rows * cols
            biases.append(p[pos : pos + cols].copy())
            pos += cols
        return MlpProbe(
            weights=tuple(weights),
            biases=tuple(biases),
            scale=float(p[pos]),
            config=MlpConfig(**header["config"]),
            loss_history=tuple(header.get("loss_history", [])),
            fit_identities=tuple(header.get("fit_identities", [])),
            activation=header.get("activation", "relu"),
        )
    raise FormatError(f"{path}: not a probe file (kind={kind!r})")
