"""Tangent-space estimation and tangent-space-projected (tsp) explanations.

Two estimators are provided: the hyperplane method (SVD of a centered
k-nearest-neighbour cloud around the query point) and the autoencoder
method (SVD of the decoder Jacobian at the encoded point). Both produce a
rank-d orthogonal projector P = Q Q^T stored through its basis Q.

Projected explanations follow the method that produced the map: plain
projection for gradient and LRP maps, the generalized projector (x_i / x_j
reweighting with zeroed columns where x_j = 0) for input-times-gradient,
and per-path-gradient projection for integrated gradients, always with the
projector of the data point itself.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tape as T
from .explain import ExplanationMap, IntGradConfig, gradient_maps, _prepare
from .models import AutoencoderModel, MlpModel, mlp_forward, predict
from .tape import ContractError, Tape, as_array, svd


@dataclass
class Projector:
    """Rank-d orthogonal projector onto an estimated tangent space."""

    basis: np.ndarray  # (D, d), orthonormal columns
    anchor: np.ndarray | None = None  # the data point the estimate belongs to

    def __post_init__(self):
        self.basis = as_array(self.basis)
        if self.basis.ndim != 2:
            raise ContractError("projector basis must be a (D, d) matrix")
        gram = self.basis.T @ self.basis
        if np.abs(gram - np.eye(self.basis.shape[1])).max() > 1e-10:
            raise ContractError("projector basis columns are not orthonormal")
        if self.anchor is not None:
            self.anchor = as_array(self.anchor).ravel()

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    def matrix(self) -> np.ndarray:
        return self.basis @ self.basis.T

    def apply(self, h) -> np.ndarray:
        """P h for a single vector or row-wise for a batch."""
        h = as_array(h)
        if h.ndim == 1:
            return self.basis @ (self.basis.T @ h)
        return (h @ self.basis) @ self.basis.T


# ---------------------------------------------------------------------------
# nearest neighbours and the hyperplane method
# ---------------------------------------------------------------------------


def knn_indices(queries, base, k, exclude=None, chunk=256) -> np.ndarray:
    """Indices of the k Euclidean nearest neighbours in base for each query.

    exclude, when given, lists one base index per query to skip (used for
    self-matches when queries come from the base set). Ties resolve by the
    lower base index, which keeps results deterministic.
    """
    queries = np.atleast_2d(as_array(queries))
    base = as_array(base)
    if base.ndim != 2 or queries.shape[1] != base.shape[1]:
        raise ContractError("query and base dimensions disagree")
    if k < 1 or k > len(base) - (0 if exclude is None else 1):
        raise ContractError(f"k={k} incompatible with base of {len(base)} points")
    base_sq = (base * base).sum(axis=1)
    out = np.empty((len(queries), k), dtype=np.int64)
    for start in range(0, len(queries), chunk):
        q = queries[start:start + chunk]
        d2 = base_sq[None, :] - 2.0 * (q @ base.T)
        if exclude is not None:
            rows = np.arange(start, min(start + chunk, len(queries)))
            mask = np.asarray(exclude)[rows]
            d2[np.arange(len(q)), mask] = np.inf
        order = np.argsort(d2, axis=1, kind="stable")
        out[start:start + len(q)] = order[:, :k]
    return out


def _cloud_basis(cloud: np.ndarray, d: int):
    centered = cloud - cloud.mean(axis=0)
    u, s, v = svd(centered)
    tol = max(cloud.shape) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    rank = int((s > max(tol, 1e-12)).sum())
    if rank < d:
        raise ContractError(
            f"neighbourhood has rank {rank}, cannot span a {d}-dimensional tangent"
        )
    return v[:, :d].copy()


def hyperplane_tangent(x, base, k, d, exclude_index=None) -> Projector:
    """Tangent estimate from the k nearest neighbours plus the point itself.

    The (k+1)-point cloud is centered on its mean and decomposed; the top d
    right-singular directions span the tangent.
    """
    x = as_array(x).ravel()
    base = as_array(base)
    if d < 1 or d > x.size:
        raise ContractError(f"tangent dimension d={d} out of range")
    if k < d:
        raise ContractError("need at least d neighbours (k >= d)")
    exclude = None if exclude_index is None else np.asarray([exclude_index])
    idx = knn_indices(x[None, :], base, k, exclude=exclude)[0]
    cloud = np.vstack([x[None, :], base[idx]])
    return Projector(_cloud_basis(cloud, d), x)


def reconstruction_sweep(x, base, k, d_max, exclude_index=None) -> np.ndarray:
    """Summed squared residual of the centered neighbour cloud for d = 1..d_max.

    Residuals are computed from the singular values, so the curve is exactly
    non-increasing in d.
    """
    x = as_array(x).ravel()
    exclude = None if exclude_index is None else np.asarray([exclude_index])
    idx = knn_indices(x[None, :], as_array(base), k, exclude=exclude)[0]
    cloud = np.vstack([x[None, :], as_array(base)[idx]])
    centered = cloud - cloud.mean(axis=0)
    _, s, _ = svd(centered)
    total = float((s * s).sum())
    sq = np.concatenate([s * s, np.zeros(max(0, d_max - s.size))])
    return total - np.cumsum(sq)[:d_max]


# ---------------------------------------------------------------------------
# autoencoder method
# ---------------------------------------------------------------------------


def decoder_jacobian(decoder: MlpModel, z) -> np.ndarray:
    """Exact Jacobian d decoder / d z, shape (D_out, d_z).

    Computed as one batched reverse pass: the code is replicated once per
    output row and each row selects its own output component, so the
    gradient of the summed selection recovers the full Jacobian.
    """
    z = as_array(z).ravel()
    d_out = decoder.out_dim
    tp = Tape()
    zb = tp.leaf(np.tile(z, (d_out, 1)), check_finite=False)
    out = mlp_forward(tp, decoder, zb)
    sel = T.sum_all(T.mul(out, tp.leaf(np.eye(d_out), check_finite=False)))
    (g,) = T.grad(sel, [zb])
    return g.value.copy()


def decoder_tangent(ae: AutoencoderModel, x, d) -> Projector:
    """Tangent estimate from the top-d left singular vectors of the decoder
    Jacobian at z = encoder(x)."""
    x = as_array(x).ravel()
    if d < 1 or d > ae.code_dim:
        raise ContractError(f"tangent dimension d={d} exceeds code dimension {ae.code_dim}")
    z = predict(ae.encoder, x)
    jac = decoder_jacobian(ae.decoder, z)
    u, s, _ = svd(jac)
    tol = max(jac.shape) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    rank = int((s > max(tol, 1e-12)).sum())
    if rank < d:
        raise ContractError(f"decoder Jacobian has rank {rank}, need at least {d}")
    return Projector(u[:, :d].copy(), x)


# ---------------------------------------------------------------------------
# projector cache (FWPROJ01)
# ---------------------------------------------------------------------------

_PROJ_MAGIC = b"FWPROJ01"


class ProjFormatError(ValueError):
    pass


class ProjectorCache:
    """Read-only view of an FWPROJ01 basis cache, keyed by sample index.

    Layout: magic, u32 count, u32 D, u32 d, then per record a u32 sample
    index followed by the (D, d) basis as little-endian f32. Records are
    memory-mapped and promoted to f64 on access.
    """

    def __init__(self, path):
        self.path = Path(path)
        with open(self.path, "rb") as fh:
            head = fh.read(20)
        if len(head) < 20 or head[:8] != _PROJ_MAGIC:
            raise ProjFormatError(f"{path}: bad magic or truncated header")
        self.count, self.dim, self.rank = struct.unpack("<III", head[8:20])
        rec = 4 + 4 * self.dim * self.rank
        expected = 20 + rec * self.count
        actual = self.path.stat().st_size
        if actual != expected:
            raise ProjFormatError(f"{path}: expected {expected} bytes, found {actual}")
        self._raw = np.memmap(self.path, dtype=np.uint8, mode="r", offset=20)
        self._rec = rec
        keys = np.frombuffer(
            np.ascontiguousarray(self._raw.reshape(self.count, rec)[:, :4]), dtype="<u4"
        )
        self._offsets = {int(k): i for i, k in enumerate(keys)}
        if len(self._offsets) != self.count:
            raise ProjFormatError(f"{path}: duplicate sample indices")

    def indices(self) -> list:
        return sorted(self._offsets)

    def basis(self, sample_index: int) -> np.ndarray:
        try:
            row = self._offsets[int(sample_index)]
        except KeyError:
            raise ProjFormatError(f"sample {sample_index} not in cache {self.path}") from None
        rec = self._raw[row * self._rec:(row + 1) * self._rec]
        flat = np.frombuffer(np.ascontiguousarray(rec[4:]), dtype="<f4")
        return flat.astype(np.float64).reshape(self.dim, self.rank)

    def basis_batch(self, sample_indices) -> np.ndarray:
        return np.stack([self.basis(i) for i in sample_indices])

    def projector(self, sample_index: int, anchor=None) -> Projector:
        # cached bases are f32, so re-orthonormalize before the strict
        # Projector validation; the spanned subspace is unchanged
        return Projector(reorthonormalize(self.basis(sample_index)), anchor)


def reorthonormalize(basis) -> np.ndarray:
    """Snap a nearly orthonormal basis back to machine-precision orthonormal
    columns (QR with positive diagonal, so the result is deterministic)."""
    q, r = np.linalg.qr(as_array(basis))
    signs = np.where(np.diag(r) < 0.0, -1.0, 1.0)
    return np.ascontiguousarray(q * signs)


def write_projector_cache(path, bases: dict):
    """bases maps sample index -> (D, d) basis; all entries must agree in shape."""
    items = sorted(bases.items())
    if not items:
        raise ContractError("refusing to write an empty projector cache")
    dim, rank = items[0][1].shape
    with open(path, "wb") as fh:
        fh.write(_PROJ_MAGIC + struct.pack("<III", len(items), dim, rank))
        for key, basis in items:
            if basis.shape != (dim, rank):
                raise ContractError("all cached bases must share one shape")
            fh.write(struct.pack("<I", int(key)))
            fh.write(np.ascontiguousarray(basis).astype("<f4").tobytes())
    return Path(path)


def build_hyperplane_cache(path, queries, base, k, d, sample_indices=None,
                           exclude_self=False, chunk=256):
    """Estimate hyperplane tangents for many queries and cache the bases.

    With exclude_self=True, queries are assumed to be rows of base and
    sample_indices (default 0..n-1) name their base rows, which are skipped
    during the neighbour search.
    """
    queries = np.atleast_2d(as_array(queries))
    base = as_array(base)
    n = len(queries)
    if sample_indices is None:
        sample_indices = np.arange(n)
    sample_indices = np.asarray(sample_indices, dtype=np.int64)
    exclude = sample_indices if exclude_self else None
    neigh = knn_indices(queries, base, k, exclude=exclude, chunk=chunk)
    bases = {}
    for i in range(n):
        cloud = np.vstack([queries[i][None, :], base[neigh[i]]])
        bases[int(sample_indices[i])] = _cloud_basis(cloud, d)
    return ProjectorCache(write_projector_cache(path, bases))


# ---------------------------------------------------------------------------
# tsp explanations
# ---------------------------------------------------------------------------


def generalized_project(proj: Projector, x, h) -> np.ndarray:
    """Apply the generalized projector: entries P_ij become (x_i / x_j) P_ij
    with column j zeroed wherever x_j = 0. Equivalent to x * P(h / x) with
    the convention that vanishing inputs contribute nothing."""
    x = as_array(x).ravel()
    h = as_array(h).ravel()
    ratio = np.divide(h, x, out=np.zeros_like(h), where=x != 0.0)
    return x * proj.apply(ratio)


def tsp_map(emap: ExplanationMap, proj: Projector, x=None, model=None,
            intgrad_cfg: IntGradConfig | None = None, lrp_generalized: bool = False,
            ) -> ExplanationMap:
    """Project an explanation onto the tangent space, respecting the method.

    Maps must still be raw; normalization happens afterwards. gradient and
    LRP maps are projected directly (LRP can opt into the generalized
    projector); xgrad always uses the generalized projector; intgrad is
    recomputed with every path gradient projected by this data point's
    projector, which needs the model and input.
    """
    if emap.normalization != "raw":
        raise ContractError("project raw maps; normalize afterwards")
    if emap.values.size != proj.dim:
        raise ContractError(
            f"map dimension {emap.values.size} does not match projector {proj.dim}"
        )
    method = emap.method
    if method == "gradient" or (method.startswith("lrp") and not lrp_generalized):
        vals = proj.apply(emap.values)
    elif method == "xgrad" or (method.startswith("lrp") and lrp_generalized):
        if x is None:
            x = proj.anchor
        if x is None:
            raise ContractError(f"{method} projection needs the input point x")
        vals = generalized_project(proj, x, emap.values)
    elif method == "intgrad":
        if model is None:
            raise ContractError("intgrad projection recomputes path gradients; pass the model")
        if x is None:
            x = proj.anchor
        if x is None:
            raise ContractError("intgrad projection needs the input point x")
        vals = tsp_intgrad_maps(model, np.atleast_2d(as_array(x)),
                                np.asarray([emap.k]), [proj], intgrad_cfg)[0]
    else:
        raise ContractError(f"no tangent-space projection defined for {method!r}")
    return replace(emap, values=vals, method=f"tsp-{method}")


def project_gradient_maps(maps: np.ndarray, bases: np.ndarray) -> np.ndarray:
    """Row-wise P h for stacked maps and per-sample bases (n, D, d)."""
    maps = as_array(maps)
    t = np.einsum("bdk,bd->bk", bases, maps)
    return np.einsum("bdk,bk->bd", bases, t)


def tsp_intgrad_maps(model, x, ks=None, projectors=None, cfg: IntGradConfig | None = None,
                     batch=512) -> np.ndarray:
    """Integrated gradients with every path gradient projected by the data
    point's own projector before the (x - xbar) weighting."""
    cfg = cfg or IntGradConfig()
    x2, ks = _prepare(model, x, ks)
    if projectors is None or len(projectors) != len(x2):
        raise ContractError("need one projector per input row")
    bases = np.stack([p.basis for p in projectors])
    base = np.zeros(model.in_dim) if cfg.baseline is None else as_array(cfg.baseline).ravel()
    if base.shape != (model.in_dim,):
        raise ContractError("baseline shape does not match the input dimension")
    delta = x2 - base
    acc = np.zeros_like(x2)
    for j in range(1, cfg.steps + 1):
        t = (j - 0.5) / cfg.steps
        acc += project_gradient_maps(gradient_maps(model, base + t * delta, ks, batch=batch),
                                     bases)
    return delta * acc / cfg.steps
