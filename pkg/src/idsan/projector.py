"""Linear sanitization projectors.

ISP removes the span of the top-r left singular vectors of the centered
identity-mean matrix; LEACE is the closed-form least-squares erasure used
as a baseline. Both are fit on train identities only and applied row-wise.

Projector files share one container: a uint32 header length, a UTF-8 JSON
header (``version``, ``kind``, ``dim``, ``rank``, ...), then a flat
little-endian float32 payload whose layout depends on ``kind``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .embstore import EmbeddingSet
from .errors import (
    DataError,
    DegenerateFit,
    DegenerateVector,
    DimError,
    FormatError,
    InvalidBasis,
    RankDeficient,
    UnsupportedVersion,
)

FORMAT_VERSION = 1
LEACE_LAMBDAS = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2)
_LEN = struct.Struct("<I")


@dataclass(frozen=True, eq=False)
class IspModel:
    basis: np.ndarray  # (d, r), orthonormal columns
    global_mean: np.ndarray  # (d,), mean of identity means
    singular_values: np.ndarray  # (r,)
    fit_identity_count: int
    provenance: str = ""
    whitened: bool = False

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    def matrix(self) -> np.ndarray:
        """Dense P = I - U U^T (materialized on demand)."""
        return np.eye(self.dim) - self.basis @ self.basis.T

    def quantized(self) -> "IspModel":
        """Copy whose arrays hold exactly the float32 values a saved file stores."""
        return replace(
            self,
            basis=_f32(self.basis),
            global_mean=_f32(self.global_mean),
        )


@dataclass(frozen=True, eq=False)
class LeaceModel:
    erasure: np.ndarray  # (d, d)
    mean: np.ndarray  # (d,)
    ridge_lambda: float
    class_count: int
    provenance: str = ""

    @property
    def dim(self) -> int:
        return self.erasure.shape[0]

    @property
    def rank(self) -> int:
        """Number of erased directions (d - rank of the erasure matrix)."""
        return self.dim - int(np.linalg.matrix_rank(self.erasure))

    def quantized(self) -> "LeaceModel":
        return replace(self, erasure=_f32(self.erasure), mean=_f32(self.mean))


@dataclass(frozen=True)
class SubspaceAlignment:
    cosines: np.ndarray  # descending, clamped to [0, 1]

    @property
    def max_cosine(self) -> float:
        return float(self.cosines[0]) if len(self.cosines) else 0.0

    def angles_deg(self) -> np.ndarray:
        return np.degrees(np.arccos(self.cosines))


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _require_normalized(emb: EmbeddingSet, what: str) -> None:
    if not emb.normalized:
        raise DataError(f"{what} expects normalized embeddings; call normalize() first")


def identity_means(emb: EmbeddingSet, identities) -> np.ndarray:
    """Per-identity means over all images of each identity, shape (m, d)."""
    x = emb.vectors
    return np.stack([x[emb.rows_of(int(i))].astype(np.float64).mean(axis=0) for i in identities])


def numerical_rank(singular_values: np.ndarray, shape: tuple[int, int]) -> int:
    if len(singular_values) == 0 or singular_values[0] == 0.0:
        return 0
    tol = singular_values[0] * max(shape) * np.finfo(np.float64).eps
    return int(np.sum(singular_values > tol))


def centered_mean_matrix(emb: EmbeddingSet, identities) -> tuple[np.ndarray, np.ndarray]:
    """Return (M, mu_C): M is d x m with columns mu_i - mu_C."""
    mus = identity_means(emb, identities)
    mu_c = mus.mean(axis=0)
    return (mus - mu_c).T, mu_c


def _sym_power(s: np.ndarray, power: float) -> np.ndarray:
    w, v = np.linalg.eigh(s)
    return (v * w**power) @ v.T


def _within_class_cov(emb: EmbeddingSet, identities) -> np.ndarray:
    x = emb.vectors
    d = emb.dim
    acc = np.zeros((d, d))
    total = 0
    for i in identities:
        xi = x[emb.rows_of(int(i))].astype(np.float64)
        xi = xi - xi.mean(axis=0)
        acc += xi.T @ xi
        total += len(xi)
    return acc / total


def fit_isp(
    emb: EmbeddingSet,
    rank: int,
    split: str = "train",
    *,
    identities=None,
    whiten: bool = False,
) -> IspModel:
    """Fit the identity sanitization projector on one split's identities.

    ``identities`` overrides the split (used by identity-count sweeps).
    With ``whiten=True`` the SVD runs on Sigma_w^{-1/2} M (ridge-regularized
    within-class covariance) and the kept directions are mapped back to the
    input space and re-orthonormalized.
    """
    _require_normalized(emb, "fit_isp")
    ids = emb.identities_in(split) if identities is None else np.asarray(identities, dtype=np.int64)
    if len(ids) < 2:
        raise DegenerateFit(f"need at least 2 identities to fit ISP, got {len(ids)}")
    if rank < 1:
        raise ValueError("rank must be >= 1")
    m_mat, mu_c = centered_mean_matrix(emb, ids)
    if whiten:
        sw = _within_class_cov(emb, ids)
        sw += 1e-4 * np.trace(sw) / emb.dim * np.eye(emb.dim)
        target = _sym_power(sw, -0.5) @ m_mat
    else:
        target = m_mat
    u, s, _ = np.linalg.svd(target, full_matrices=False)
    mrank = numerical_rank(s, target.shape)
    if rank > mrank:
        raise RankDeficient(f"rank {rank} exceeds rank(M) = {mrank}", matrix_rank=mrank)
    basis = u[:, :rank]
    if whiten:
        basis, _ = np.linalg.qr(_sym_power(sw, 0.5) @ basis)
    return IspModel(
        basis=basis,
        global_mean=mu_c,
        singular_values=s[:rank].copy(),
        fit_identity_count=len(ids),
        provenance=emb.tag,
        whitened=whiten,
    )


def mean_matrix_rank(emb: EmbeddingSet, split: str = "train", identities=None) -> int:
    ids = emb.identities_in(split) if identities is None else np.asarray(identities, dtype=np.int64)
    m_mat, _ = centered_mean_matrix(emb, ids)
    s = np.linalg.svd(m_mat, compute_uv=False)
    return numerical_rank(s, m_mat.shape)


def apply_isp(model: IspModel, emb: EmbeddingSet) -> EmbeddingSet:
    if model.dim != emb.dim:
        raise DimError(f"projector dim {model.dim} != embedding dim {emb.dim}")
    _require_normalized(emb, "apply_isp")
    x = emb.vectors.astype(np.float64)
    px = x - (x @ model.basis) @ model.basis.T
    norms = np.linalg.norm(px, axis=1)
    bad = np.flatnonzero(norms < 1e-9)
    if len(bad):
        raise DegenerateVector(f"row {bad[0]} lies in the identity subspace", row=int(bad[0]))
    return emb.with_vectors(px / norms[:, None], normalized=True, tag=f"{emb.tag}+isp{model.rank}")


def one_hot(labels: np.ndarray) -> np.ndarray:
    classes, inv = np.unique(labels, return_inverse=True)
    out = np.zeros((len(labels), len(classes)))
    out[np.arange(len(labels)), inv] = 1.0
    return out


def fit_leace(emb: EmbeddingSet, lam: float, split: str = "train") -> LeaceModel:
    """Closed-form least-squares erasure of the identity concept.

    erasure = I - W^+ Pi W with W = (Sigma_xx + lam I)^(-1/2) and Pi the
    orthogonal projector onto the column space of W Sigma_xz.
    """
    _require_normalized(emb, "fit_leace")
    if not lam > 0:
        raise ValueError("LEACE ridge lambda must be > 0")
    rows = emb.rows_in(split)
    labels = emb.identity_of[rows]
    classes = np.unique(labels)
    if len(classes) < 2:
        raise DegenerateFit("LEACE needs at least 2 identity classes")
    x = emb.vectors[rows].astype(np.float64)
    mean = x.mean(axis=0)
    xc = x - mean
    z = one_hot(labels)
    zc = z - z.mean(axis=0)
    n = len(rows)
    sxx = xc.T @ xc / n
    sxz = xc.T @ zc / n
    w_eig, v = np.linalg.eigh(sxx + lam * np.eye(emb.dim))
    whiten = (v * w_eig**-0.5) @ v.T
    unwhiten = (v * w_eig**0.5) @ v.T
    a = whiten @ sxz
    u, s, _ = np.linalg.svd(a, full_matrices=False)
    u = u[:, : numerical_rank(s, a.shape)]
    erasure = np.eye(emb.dim) - unwhiten @ (u @ (u.T @ whiten))
    return LeaceModel(
        erasure=erasure,
        mean=mean,
        ridge_lambda=float(lam),
        class_count=len(classes),
        provenance=emb.tag,
    )


def apply_leace(model: LeaceModel, emb: EmbeddingSet, renormalize: bool = False) -> EmbeddingSet:
    """x -> erasure (x - mean) + mean, optionally rescaled to unit norm.

    Renormalizing breaks the exact zero cross-covariance guarantee, so it is
    off by default.
    """
    if model.dim != emb.dim:
        raise DimError(f"projector dim {model.dim} != embedding dim {emb.dim}")
    x = emb.vectors.astype(np.float64)
    out = (x - model.mean) @ model.erasure.T + model.mean
    if renormalize:
        norms = np.linalg.norm(out, axis=1)
        bad = np.flatnonzero(norms < 1e-9)
        if len(bad):
            raise DegenerateVector(f"row {bad[0]} erased to zero", row=int(bad[0]))
        out = out / norms[:, None]
    return emb.with_vectors(out, normalized=renormalize, tag=f"{emb.tag}+leace")


def cross_covariance(x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Empirical cross-covariance between rows of x and one-hot labels."""
    x = np.asarray(x, dtype=np.float64)
    z = one_hot(labels)
    return (x - x.mean(axis=0)).T @ (z - z.mean(axis=0)) / len(x)


def apply_projector(model, emb: EmbeddingSet, renormalize_leace: bool = False) -> EmbeddingSet:
    if isinstance(model, IspModel):
        return apply_isp(model, emb)
    return apply_leace(model, emb, renormalize=renormalize_leace)


def principal_angles(a: np.ndarray, b: np.ndarray) -> SubspaceAlignment:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] != b.shape[0]:
        raise DimError(f"ambient dims differ: {a.shape[0]} vs {b.shape[0]}")
    for name, u in (("a", a), ("b", b)):
        err = np.max(np.abs(u.T @ u - np.eye(u.shape[1]))) if u.shape[1] else 0.0
        if err > 1e-4:
            raise InvalidBasis(f"basis {name} is not column-orthonormal (max error {err:.2e})")
    s = np.linalg.svd(a.T @ b, compute_uv=False)
    return SubspaceAlignment(cosines=np.clip(s, 0.0, 1.0))


# -- file container ---------------------------------------------------------


def write_container(path, header: dict, payload: np.ndarray) -> Path:
    path = Path(path)
    header = {"version": FORMAT_VERSION, **header}
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    data = np.ascontiguousarray(payload, dtype="<f4").ravel()
    with open(path, "wb") as fh:
        fh.write(_LEN.pack(len(raw)))
        fh.write(raw)
        fh.write(data.tobytes())
    return path


def read_container(path) -> tuple[dict, np.ndarray]:
    blob = Path(path).read_bytes()
    if len(blob) < _LEN.size:
        raise FormatError(f"{path}: truncated file")
    (hlen,) = _LEN.unpack_from(blob)
    if len(blob) < _LEN.size + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[_LEN.size : _LEN.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from exc
    if not isinstance(header, dict):
        raise FormatError(f"{path}: header is not an object")
    if header.get("version") != FORMAT_VERSION:
        raise UnsupportedVersion(f"{path}: unsupported version {header.get('version')!r}")
    body = blob[_LEN.size + hlen :]
    if len(body) % 4:
        raise FormatError(f"{path}: payload is not a whole number of float32 values")
    payload = np.frombuffer(body, dtype="<f4").astype(np.float64)
    expected = header.get("payload_len")
    if expected is None or len(payload) != expected:
        raise FormatError(f"{path}: payload has {len(payload)} values, header says {expected}")
    return header, payload


def save_projector(model, path) -> Path:
    if isinstance(model, IspModel):
        payload = np.concatenate([model.basis.ravel(order="F"), model.global_mean])
        header = {
            "kind": "isp",
            "dim": model.dim,
            "rank": model.rank,
            "provenance": model.provenance,
            "singular_values": [float(s) for s in model.singular_values],
            "fit_identity_count": model.fit_identity_count,
            "whitened": model.whitened,
        }
    elif isinstance(model, LeaceModel):
        payload = np.concatenate([model.erasure.ravel(order="C"), model.mean])
        header = {
            "kind": "leace",
            "dim": model.dim,
            "rank": model.rank,
            "lambda": model.ridge_lambda,
            "class_count": model.class_count,
            "provenance": model.provenance,
        }
    else:
        raise TypeError(f"cannot save {type(model).__name__}")
    header["payload_len"] = int(payload.size)
    return write_container(path, header, payload)


def load_projector(path):
    header, payload = read_container(path)
    kind = header.get("kind")
    d = int(header["dim"])
    if kind == "isp":
        r = int(header["rank"])
        if payload.size != d * r + d:
            raise FormatError(f"{path}: ISP payload size mismatch")
        basis = payload[: d * r].reshape((d, r), order="F")
        return IspModel(
            basis=basis,
            global_mean=payload[d * r :].copy(),
            singular_values=np.asarray(header.get("singular_values", []), dtype=np.float64),
            fit_identity_count=int(header.get("fit_identity_count", 0)),
            provenance=header.get("provenance", ""),
            whitened=bool(header.get("whitened", False)),
        )
    if kind == "leace":
        if payload.size != d * d + d:
            raise FormatError(f"{path}: LEACE payload size mismatch")
        return LeaceModel(
            erasure=payload[: d * d].reshape((d, d)),
            mean=payload[d * d :].copy(),
            ridge_lambda=float(header["lambda"]),
            class_count=int(header.get("class_count", 0)),
            provenance=header.get("provenance", ""),
        )
    raise FormatError(f"{path}: not a projector file (kind={kind!r})")
