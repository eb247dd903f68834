"""Similarity metrics between explanation maps, model-agreement metrics, and
the pixel-flipping faithfulness evaluation.

SSIM is computed from its definition: mean local SSIM over valid 11x11
Gaussian-weighted windows (sigma 1.5, K1 = 0.01, K2 = 0.03) with the dynamic
range taken jointly over both maps. Pixel flipping removes pixels in
relevance order, fills them by iterative diffusion, and tracks the softmax
confidence of the originally predicted class.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .explain import ExplanationMap
from .models import predict, softmax_probs
from .tape import ContractError, as_array

_WIN = 11
_SIGMA = 1.5
_K1 = 0.01
_K2 = 0.03


class ConstantMapError(ValueError):
    """Correlation is undefined for a constant map; callers exclude the pair."""


def _gaussian_window() -> np.ndarray:
    half = (_WIN - 1) / 2.0
    g = np.exp(-((np.arange(_WIN) - half) ** 2) / (2.0 * _SIGMA ** 2))
    w = np.outer(g, g)
    return w / w.sum()


_WINDOW = _gaussian_window()


def ssim(a, b) -> float:
    """Mean local structural similarity of two equally shaped 2-d maps.

    The dynamic range L is max - min over both maps jointly; when L = 0 both
    maps are the same constant and the result is defined as 1.
    """
    a = as_array(a)
    b = as_array(b)
    if a.ndim != 2 or a.shape != b.shape:
        raise ContractError(f"ssim needs two equal 2-d maps, got {a.shape} and {b.shape}")
    if min(a.shape) < _WIN:
        raise ContractError(f"maps must be at least {_WIN}x{_WIN}")
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    span = hi - lo
    if span == 0.0:
        return 1.0
    c1 = (_K1 * span) ** 2
    c2 = (_K2 * span) ** 2

    wa = sliding_window_view(a, (_WIN, _WIN))
    wb = sliding_window_view(b, (_WIN, _WIN))
    mu_a = np.einsum("ijkl,kl->ij", wa, _WINDOW)
    mu_b = np.einsum("ijkl,kl->ij", wb, _WINDOW)
    m_aa = np.einsum("ijkl,kl->ij", wa * wa, _WINDOW)
    m_bb = np.einsum("ijkl,kl->ij", wb * wb, _WINDOW)
    m_ab = np.einsum("ijkl,kl->ij", wa * wb, _WINDOW)
    var_a = m_aa - mu_a * mu_a
    var_b = m_bb - mu_b * mu_b
    cov = m_ab - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def pcc(a, b) -> float:
    """Pearson correlation of the flattened maps."""
    a = as_array(a).ravel()
    b = as_array(b).ravel()
    if a.shape != b.shape:
        raise ContractError("pcc needs equally sized maps")
    if a.std() == 0.0 or b.std() == 0.0:
        raise ConstantMapError("correlation undefined for a constant map")
    return float(np.corrcoef(a, b)[0, 1])


def mse(a, b) -> float:
    a = as_array(a).ravel()
    b = as_array(b).ravel()
    if a.shape != b.shape:
        raise ContractError("mse needs equally sized inputs")
    return float(((a - b) ** 2).mean())


def kl(p, q, floor: float = 1e-12) -> float:
    """KL divergence between probability vectors with flooring at 1e-12."""
    p = np.maximum(as_array(p).ravel(), floor)
    q = np.maximum(as_array(q).ravel(), floor)
    if p.shape != q.shape:
        raise ContractError("kl needs equally sized distributions")
    return float((p * np.log(p / q)).sum())


# ---------------------------------------------------------------------------
# pixel flipping
# ---------------------------------------------------------------------------


@dataclass
class FlipCurve:
    fractions: np.ndarray  # share of pixels flipped, starting at 0
    confidences: np.ndarray  # softmax confidence of the original class
    auc: float
    order: str  # relevance | random

    def __post_init__(self):
        if np.any(np.diff(self.fractions) <= 0):
            raise ContractError("flip fractions must be strictly increasing")


def neighbor_counts(shape) -> np.ndarray:
    cnt = np.full(shape, 4.0)
    cnt[0, :] -= 1
    cnt[-1, :] -= 1
    cnt[:, 0] -= 1
    cnt[:, -1] -= 1
    return cnt


def diffuse_inpaint(img, mask, sweeps: int = 100, tol: float = 1e-6) -> np.ndarray:
    """Fill masked pixels by Jacobi diffusion.

    Masked pixels start at 0 and move to the mean of their in-bounds
    4-neighbours each sweep (unmasked neighbours keep their true values);
    stops after `sweeps` rounds or when the largest update drops below tol.
    """
    img = as_array(img)
    mask = np.asarray(mask, dtype=bool)
    if img.ndim != 2 or mask.shape != img.shape:
        raise ContractError("inpainting needs a 2-d image and a matching mask")
    out = img.copy()
    out[mask] = 0.0
    if not mask.any():
        return out
    cnt = neighbor_counts(img.shape)
    for _ in range(sweeps):
        s = np.zeros_like(out)
        s[1:, :] += out[:-1, :]
        s[:-1, :] += out[1:, :]
        s[:, 1:] += out[:, :-1]
        s[:, :-1] += out[:, 1:]
        new = s / cnt
        delta = float(np.abs(new[mask] - out[mask]).max())
        out[mask] = new[mask]
        if delta < tol:
            break
    return out


def pixel_flipping(model, x, emap: ExplanationMap, steps: int = 100,
                   order: str = "relevance", rng=None,
                   sweeps: int = 100, tol: float = 1e-6) -> FlipCurve:
    """Remove pixels batch by batch and track the original-class confidence.

    The map must be abs-sum-one normalized and describe a 2-d image. Pixels
    are ranked by descending relevance with index tie-break, or by a seeded
    random permutation for order="random". Batch sizes follow an even split
    of all pixels over `steps`, so the curve ends with every pixel flipped.
    """
    x = as_array(x).ravel()
    if len(emap.shape) != 2:
        raise ContractError("pixel flipping needs an image-shaped map")
    if emap.normalization != "abs-sum-one":
        raise ContractError("pixel flipping expects an abs-sum-one normalized map")
    if x.size != emap.values.size:
        raise ContractError("input and map sizes disagree")
    img = x.reshape(emap.shape)
    d = x.size
    if steps < 1 or steps > d:
        raise ContractError(f"steps must lie in 1..{d}")

    if order == "relevance":
        ranking = np.argsort(-emap.values, kind="stable")
    elif order == "random":
        if rng is None:
            raise ContractError("random order needs a generator")
        ranking = rng.permutation(d)
    else:
        raise ContractError(f"unknown flip order {order!r}")

    probs0 = softmax_probs(predict(model, x[None, :]))[0]
    k_orig = int(np.argmax(probs0))
    cum = np.round(np.arange(1, steps + 1) * d / steps).astype(int)

    confidences = [float(probs0[k_orig])]
    mask = np.zeros(d, dtype=bool)
    for j in range(steps):
        mask[ranking[:cum[j]]] = True
        filled = diffuse_inpaint(img, mask.reshape(emap.shape), sweeps=sweeps, tol=tol)
        p = softmax_probs(predict(model, filled.ravel()[None, :]))[0]
        confidences.append(float(p[k_orig]))
    fractions = np.concatenate([[0.0], cum / d])
    confidences = np.asarray(confidences)
    auc = float(np.trapezoid(confidences, fractions))
    return FlipCurve(fractions, confidences, auc, order)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    per_sample: list  # one dict per sample
    aggregates: dict

    def __post_init__(self):
        for name, agg in self.aggregates.items():
            if isinstance(agg, dict) and {"p25", "median", "p75"} <= set(agg):
                if not agg["p25"] <= agg["median"] <= agg["p75"]:
                    raise ContractError(f"percentiles out of order for {name}")


def aggregate(values) -> dict:
    """Median with 25th/75th percentiles, the convention used in all tables."""
    arr = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if arr.size == 0 or not np.all(np.isfinite(arr)):
        raise ContractError("cannot aggregate empty or non-finite values")
    p25, med, p75 = np.percentile(arr, [25.0, 50.0, 75.0])
    return {"p25": float(p25), "median": float(med), "p75": float(p75), "n": int(arr.size)}


def build_report(per_sample: list, metric_keys=None, extra: dict | None = None) -> EvalReport:
    """Aggregate per-sample metric records; None entries (e.g. undefined
    correlations) are excluded from the aggregates and counted via n."""
    if metric_keys is None:
        metric_keys = sorted({k for rec in per_sample for k, v in rec.items()
                              if (isinstance(v, (int, float)) or v is None)
                              and k != "sample"})
    aggregates = {}
    for key in metric_keys:
        vals = [rec.get(key) for rec in per_sample if key in rec]
        vals = [v for v in vals if v is not None]
        if vals:
            aggregates[key] = aggregate(vals)
    if extra:
        aggregates.update(extra)
    return EvalReport(per_sample, aggregates)


def report_to_json(report: EvalReport, path):
    payload = {"aggregates": report.aggregates, "n_samples": len(report.per_sample)}
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def report_to_csv(report: EvalReport, path):
    from .dataio import write_csv  # local import to keep module deps one-way

    keys = sorted({k for rec in report.per_sample for k in rec})
    rows = [[rec.get(k, "") if rec.get(k) is not None else "" for k in keys]
            for rec in report.per_sample]
    write_csv(path, keys, rows)
