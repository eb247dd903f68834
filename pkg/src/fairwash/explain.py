"""Explanation methods for the dense models: gradient, input-times-gradient,
integrated gradients, and layer-wise relevance propagation (LRP).

All methods attribute the pre-softmax output of the selected class k; the
softmax never takes part. Batched map computation is the workhorse here
(one tape per batch, one reverse pass for the whole batch); the single
sample ``explain_*`` functions wrap it and return ExplanationMap records.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tape as T
from .models import LogRegModel, MlpModel, logreg_forward, mlp_forward, predict, select_logits
from .tape import ContractError, Tape, as_array

METHODS = ("gradient", "xgrad", "intgrad", "lrp_eps", "lrp_zplus")


@dataclass
class ExplanationMap:
    values: np.ndarray  # flat, one entry per input feature
    method: str
    k: int
    normalization: str = "raw"  # raw | abs-sum-one
    shape: tuple = ()  # render shape; defaults to (D,)

    def __post_init__(self):
        self.values = as_array(self.values).ravel()
        if not self.shape:
            self.shape = (self.values.size,)
        if int(np.prod(self.shape)) != self.values.size:
            raise ContractError(
                f"map shape {self.shape} does not hold {self.values.size} values"
            )
        if self.normalization not in ("raw", "abs-sum-one"):
            raise ContractError(f"unknown normalization state {self.normalization!r}")
        if self.normalization == "abs-sum-one":
            total = np.abs(self.values).sum()
            if abs(total - 1.0) > 1e-9:
                raise ContractError("abs-sum-one map does not sum to one")

    def grid(self) -> np.ndarray:
        return self.values.reshape(self.shape)


@dataclass
class IntGradConfig:
    baseline: np.ndarray | None = None  # zero vector when None
    steps: int = 128

    def __post_init__(self):
        if self.steps < 1:
            raise ContractError("integrated gradients needs steps >= 1")


@dataclass
class LrpConfig:
    eps: float = 1e-6
    rule: str = "zplus"  # eps | zplus
    first_layer: str | None = None  # None (use rule) or "zB"
    bounds: tuple | None = None  # (low, high) per-feature arrays for zB
    seed_mode: str | None = None  # None -> "logit" for eps, "unit" for zplus

    def __post_init__(self):
        if self.rule not in ("eps", "zplus"):
            raise ContractError(f"unknown relevance rule {self.rule!r}")
        if self.first_layer not in (None, "zB"):
            raise ContractError("first_layer must be None or 'zB'")
        if self.eps < 0:
            raise ContractError("stabilizer must be non-negative")
        if self.first_layer == "zB":
            if self.bounds is None:
                raise ContractError("zB rule needs per-feature (low, high) bounds")
            low, high = (as_array(b) for b in self.bounds)
            if low.shape != high.shape or np.any(low > high):
                raise ContractError("zB bounds must satisfy low <= high elementwise")
            self.bounds = (low, high)
        if self.seed_mode not in (None, "unit", "logit"):
            raise ContractError("seed_mode must be None, 'unit', or 'logit'")

    def resolved_seed_mode(self) -> str:
        if self.seed_mode is not None:
            return self.seed_mode
        return "logit" if self.rule == "eps" else "unit"


# ---------------------------------------------------------------------------
# class selection helpers
# ---------------------------------------------------------------------------


def _prepare(model, x, ks):
    x2 = np.atleast_2d(as_array(x))
    if x2.shape[1] != model.in_dim:
        raise ContractError(f"input dimension {x2.shape[1]} does not match model {model.in_dim}")
    n_out = 1 if isinstance(model, LogRegModel) else model.out_dim
    if ks is None:
        out = predict(model, x2)
        ks = np.zeros(len(x2), dtype=np.int64) if isinstance(model, LogRegModel) \
            else np.argmax(out, axis=1).astype(np.int64)
    else:
        ks = np.broadcast_to(np.asarray(ks, dtype=np.int64), (len(x2),)).copy()
        if ks.min() < 0 or ks.max() >= n_out:
            raise ContractError(f"class index out of range for {n_out} outputs")
    return x2, ks


# ---------------------------------------------------------------------------
# gradient-family maps (batched cores)
# ---------------------------------------------------------------------------


def gradient_maps(model, x, ks=None, batch=512) -> np.ndarray:
    """d g_k / d x for each row; one reverse pass per batch."""
    x2, ks = _prepare(model, x, ks)
    out = np.empty_like(x2)
    for start in range(0, len(x2), batch):
        rows = slice(start, start + batch)
        tp = Tape()
        xv = tp.leaf(x2[rows], check_finite=False)
        if isinstance(model, LogRegModel):
            scores = logreg_forward(tp, model, xv)
            target = T.sum_all(scores)
        else:
            logits = mlp_forward(tp, model, xv)
            target = select_logits(tp, logits, ks[rows])
        (g,) = T.grad(target, [xv])
        out[rows] = g.value
    return out


def xgrad_maps(model, x, ks=None, batch=512) -> np.ndarray:
    x2, ks = _prepare(model, x, ks)
    return x2 * gradient_maps(model, x2, ks, batch=batch)


def intgrad_maps(model, x, ks=None, cfg: IntGradConfig | None = None, batch=512) -> np.ndarray:
    """Midpoint-rule integrated gradients along the straight path from the
    baseline: (x - xbar) * mean_j grad(xbar + (j - 1/2)/N (x - xbar))."""
    cfg = cfg or IntGradConfig()
    x2, ks = _prepare(model, x, ks)
    if cfg.baseline is None:
        base = np.zeros(model.in_dim)
    else:
        base = as_array(cfg.baseline).ravel()
        if base.shape != (model.in_dim,):
            raise ContractError(
                f"baseline shape {base.shape} does not match input dimension {model.in_dim}"
            )
    delta = x2 - base
    acc = np.zeros_like(x2)
    for j in range(1, cfg.steps + 1):
        t = (j - 0.5) / cfg.steps
        acc += gradient_maps(model, base + t * delta, ks, batch=batch)
    return delta * acc / cfg.steps


# ---------------------------------------------------------------------------
# layer-wise relevance propagation
# ---------------------------------------------------------------------------


def _lrp_activations(model: MlpModel, x2: np.ndarray) -> list:
    """Per-layer inputs a^0 .. a^{L-1}; relu and linear layers only."""
    acts = [x2]
    h = x2
    for layer in model.layers:
        if layer.activation not in ("relu", "none"):
            raise ContractError(
                f"unsupported activation {layer.activation!r} for relevance propagation"
            )
        z = h @ layer.W + layer.b
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
        acts.append(h)
    return acts


def _stabilized(denom: np.ndarray, eps: float, signed: bool):
    if eps == 0.0 and np.any(denom == 0.0):
        raise ContractError("zero denominator in relevance rule with eps = 0")
    if signed:
        return denom + np.where(denom >= 0.0, eps, -eps)
    return denom + eps


def lrp_maps(model, x, ks=None, cfg: LrpConfig | None = None) -> np.ndarray:
    """Relevance propagated from an output seed down to the input features.

    Seeding: 'unit' starts from the indicator of class k (the propagated
    relevance then sums to one under conserving rules); 'logit' starts from
    the indicator scaled by the class logit, which makes the eps rule agree
    with input-times-gradient on bias-free relu nets and makes the maps
    scale equivariantly with the model output. The default picks 'logit'
    for the eps rule and 'unit' for zplus.
    """
    cfg = cfg or LrpConfig()
    if isinstance(model, LogRegModel):
        raise ContractError("relevance propagation needs a layered model; "
                            "wrap logistic regression with logreg_as_mlp")
    x2, ks = _prepare(model, x, ks)
    acts = _lrp_activations(model, x2)
    logits = acts[-1]
    m = len(x2)

    rel = np.zeros_like(logits)
    rel[np.arange(m), ks] = 1.0
    if cfg.resolved_seed_mode() == "logit":
        rel[np.arange(m), ks] = logits[np.arange(m), ks]

    for li in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[li]
        a = acts[li]
        w = layer.W
        if li == 0 and cfg.first_layer == "zB":
            low, high = cfg.bounds
            if low.shape != (a.shape[1],):
                raise ContractError("zB bounds do not match the input dimension")
            wp = np.maximum(w, 0.0)
            wm = np.minimum(w, 0.0)
            denom = a @ w - low @ wp - high @ wm
            s = rel / _stabilized(denom, cfg.eps, signed=True)
            rel = a * (s @ w.T) - low * (s @ wp.T) - high * (s @ wm.T)
        elif cfg.rule == "eps":
            denom = a @ w
            s = rel / _stabilized(denom, cfg.eps, signed=False)
            rel = a * (s @ w.T)
        else:  # zplus
            wp = np.maximum(w, 0.0)
            denom = a @ wp
            s = rel / _stabilized(denom, cfg.eps, signed=False)
            rel = a * (s @ wp.T)
    return rel


# ---------------------------------------------------------------------------
# single-sample interface
# ---------------------------------------------------------------------------


def _single(model, x, k, core, method, shape=None, **kw) -> ExplanationMap:
    x1 = as_array(x).ravel()
    ks = None if k is None else np.asarray([int(k)])
    vals = core(model, x1[None, :], ks, **kw)[0]
    if k is None:
        k = int(_prepare(model, x1[None, :], None)[1][0])
    return ExplanationMap(vals, method, int(k), "raw", tuple(shape) if shape else ())


def explain_gradient(model, x, k=None, shape=None) -> ExplanationMap:
    return _single(model, x, k, gradient_maps, "gradient", shape)


def explain_xgrad(model, x, k=None, shape=None) -> ExplanationMap:
    return _single(model, x, k, xgrad_maps, "xgrad", shape)


def explain_intgrad(model, x, k=None, cfg: IntGradConfig | None = None, shape=None) -> ExplanationMap:
    return _single(model, x, k, intgrad_maps, "intgrad", shape, cfg=cfg)


def explain_lrp(model, x, k=None, cfg: LrpConfig | None = None, shape=None) -> ExplanationMap:
    cfg = cfg or LrpConfig()
    emap = _single(model, x, k, lrp_maps, f"lrp_{cfg.rule}", shape, cfg=cfg)
    return emap


def normalize_map(emap: ExplanationMap, signed: bool = False) -> ExplanationMap:
    """Rescale a map so its absolute values sum to one.

    signed=False (image convention) replaces values by their absolute value
    first; signed=True (tabular convention) keeps the signs and divides by
    the absolute sum. Both are idempotent. All-zero maps are refused.
    """
    total = float(np.abs(emap.values).sum())
    if total == 0.0:
        raise ContractError("cannot normalize an all-zero map")
    vals = (np.abs(emap.values) if not signed else emap.values) / total
    return replace(emap, values=vals, normalization="abs-sum-one")
