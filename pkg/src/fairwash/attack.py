"""Fairwashing attacks.

Two constructions: the exact analytic attack for logistic regression on
flat data manifolds (add multiples of the constraint normals to the weight
vector; predictions on constraint-satisfying points are unchanged while the
gradient explanation moves arbitrarily), and the general fine-tuning attack
that minimizes

    sum_i ||g(x_i) - gt(x_i)||^2 + gamma sum_i ||h_gt(x_i) - target||^2

over the parameters of gt with Adam, where h is the gradient (or
input-times-gradient) map of gt. The explanation term needs the derivative
of an input-gradient with respect to the parameters, which the tape provides
through double backprop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tape as T
from .models import (AdamOptimizer, LogRegModel, MlpModel, accuracy,
                     mlp_forward, mlp_param_leaves, predict, select_logits)
from .rng import RngState
from .tape import ContractError, Tape, as_array


class AttackDivergence(RuntimeError):
    """The fine-tuning loss left the finite range; nothing is returned."""


@dataclass
class FlatManifoldSpec:
    """Affine constraints (w_hat_i . x = b_i) that every data point satisfies."""

    normals: np.ndarray  # (m, D), one normal per row
    offsets: np.ndarray  # (m,)

    def __post_init__(self):
        self.normals = np.atleast_2d(as_array(self.normals))
        self.offsets = np.atleast_1d(as_array(self.offsets))
        if self.offsets.shape != (len(self.normals),):
            raise ContractError("one offset per normal required")
        rank = int(np.linalg.matrix_rank(self.normals))
        if rank < len(self.normals):
            raise ContractError(f"normals are linearly dependent (rank {rank})")

    @property
    def dim(self) -> int:
        return self.normals.shape[1]

    def violation(self, x) -> float:
        x = np.atleast_2d(as_array(x))
        return float(np.abs(x @ self.normals.T - self.offsets).max())

    def check(self, x, tol: float = 1e-9):
        v = self.violation(x)
        if v > tol:
            raise ContractError(
                f"constraint violated on supplied data: max |w_hat . x - b| = {v:.3e} > {tol:g}"
            )


def analytic_fairwash(model: LogRegModel, spec: FlatManifoldSpec, lam, x=None,
                      tol: float = 1e-9) -> LogRegModel:
    """w -> w + sum_i lam_i w_hat_i and c -> c - sum_i lam_i b_i.

    On every point satisfying the constraints the score is unchanged for any
    lam. When data is supplied it is checked first and the attack refuses if
    any constraint fails.
    """
    lam = np.atleast_1d(as_array(lam))
    if lam.shape != (len(spec.normals),):
        raise ContractError("one coefficient per normal required")
    if spec.dim != model.in_dim:
        raise ContractError("constraint dimension does not match the model")
    if x is not None:
        spec.check(x, tol)
    w = model.w + lam @ spec.normals
    c = model.c - float(lam @ spec.offsets)
    return LogRegModel(w, c)


def solve_lambda(method: str, w, normals, target, x=None) -> np.ndarray:
    """Coefficients that set the surrogate explanation's components along the
    normals to the requested target values.

    gradient: lam_i = t_i - w . w_hat_i, exact for orthonormal normals.
    xgrad: lam_i = (t_i - (x * w) . w_hat_i) / ((x * w_hat_i) . w_hat_i);
    cross terms between different normals are ignored, so this is exact when
    the normals have disjoint support (or there is only one). A vanishing
    denominator means the input has no mass along that normal and the target
    component is unreachable.
    """
    w = as_array(w).ravel()
    normals = np.atleast_2d(as_array(normals))
    target = np.atleast_1d(as_array(target))
    if target.shape != (len(normals),):
        raise ContractError("one target component per normal required")
    if method == "gradient":
        return target - normals @ w
    if method == "xgrad":
        if x is None:
            raise ContractError("the xgrad formula needs the input point x")
        x = as_array(x).ravel()
        denom = ((x * normals) * normals).sum(axis=1)
        if np.any(denom == 0.0):
            bad = int(np.flatnonzero(denom == 0.0)[0])
            raise ContractError(
                f"target component {bad} unreachable: x vanishes along that normal"
            )
        return (target - normals @ (x * w)) / denom
    raise ContractError(f"unknown surrogate {method!r}")


# ---------------------------------------------------------------------------
# fine-tuning attack
# ---------------------------------------------------------------------------


@dataclass
class AttackConfig:
    target: np.ndarray = None  # (D,) raw-scale target for the surrogate map
    gamma: float = 4.0
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 100
    max_epochs: int = 40
    rel_tol: float = 1e-3  # convergence: epoch loss improves less than this fraction
    patience: int = 3  # ... for this many consecutive epochs
    surrogate: str = "gradient"  # gradient | xgrad
    seed: int = 0
    accuracy_guard: float = 0.02  # warn when train accuracy drops more than this

    def __post_init__(self):
        if self.gamma < 0:
            raise ContractError("gamma must be non-negative")
        if self.surrogate not in ("gradient", "xgrad"):
            raise ContractError(f"unknown surrogate {self.surrogate!r}")
        if self.target is not None:
            self.target = as_array(self.target).ravel()
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ContractError("batch size must be >= 1 and max_epochs >= 0")


def _surrogate_batch(tp, model, pvars, x_np, ks, surrogate, bases):
    """Record logits and the surrogate explanation maps for one batch."""
    xv = tp.leaf(x_np, check_finite=False)
    logits = mlp_forward(tp, model, xv, pvars)
    sel = select_logits(tp, logits, ks)
    (gx,) = T.grad(sel, [xv])
    h = gx
    if bases is not None:
        h = T.project_rows(h, bases)
    if surrogate == "xgrad":
        h = T.mul(h, xv)
    return logits, h


def attack_loss(model: MlpModel, x, logits_ref, ks, cfg: AttackConfig,
                basis_source=None, batch=None) -> dict:
    """Both loss terms of the attack objective, evaluated without updates."""
    x = as_array(x)
    batch = batch or cfg.batch_size
    out_sum, expl_sum = 0.0, 0.0
    for start in range(0, len(x), batch):
        rows = slice(start, min(start + batch, len(x)))
        tp = Tape()
        bases = _bases_for(basis_source, np.arange(rows.start, rows.stop))
        logits, h = _surrogate_batch(tp, model, mlp_param_leaves(tp, model),
                                     x[rows], ks[rows], cfg.surrogate, bases)
        out_sum += float(((logits.value - logits_ref[rows]) ** 2).sum())
        expl_sum += float(((h.value - cfg.target) ** 2).sum())
    return {"loss_out": out_sum, "loss_expl": expl_sum,
            "loss": out_sum + cfg.gamma * expl_sum}


def _bases_for(basis_source, indices):
    if basis_source is None:
        return None
    if isinstance(basis_source, np.ndarray):
        return basis_source[indices]
    return basis_source.basis_batch(indices)


def _finetune(model: MlpModel, x, y, cfg: AttackConfig, basis_source):
    x = as_array(x)
    if cfg.target is None or cfg.target.shape != (x.shape[1],):
        raise ContractError("attack target must match the input dimension")
    n = len(x)
    logits_ref = predict(model, x)
    ks = np.argmax(logits_ref, axis=1).astype(np.int64)  # explained classes, frozen
    work = model.copy()
    params = work.param_arrays()
    opt = AdamOptimizer(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = RngState(cfg.seed)

    acc0 = accuracy(work, x, y) if y is not None else None
    records = [{"event": "init", **attack_loss(work, x, logits_ref, ks, cfg, basis_source)}]
    init_loss = records[0]["loss"]

    stall = 0
    prev_epoch_loss = None
    for epoch in range(cfg.max_epochs):
        order = rng.stream(f"attack/shuffle/{epoch}").permutation(n)
        epoch_out, epoch_expl = 0.0, 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            tp = Tape()
            pvars = mlp_param_leaves(tp, work)
            bases = _bases_for(basis_source, idx)
            logits, h = _surrogate_batch(tp, work, pvars, x[idx], ks[idx],
                                         cfg.surrogate, bases)
            diff = T.sub(logits, tp.leaf(logits_ref[idx], check_finite=False))
            out_term = T.sum_all(T.mul(diff, diff))
            err = T.sub(h, tp.leaf(np.broadcast_to(cfg.target, h.shape).copy(),
                                   check_finite=False))
            expl_term = T.sum_all(T.mul(err, err))
            loss = T.add(out_term, T.scale(expl_term, cfg.gamma))
            lval = float(loss.value)
            if not np.isfinite(lval):
                raise AttackDivergence(
                    f"non-finite loss at epoch {epoch}, batch starting {start} "
                    f"(out={float(out_term.value):.3e}, expl={float(expl_term.value):.3e})"
                )
            flat = [v for pair in pvars for v in pair]
            grads = T.grad(loss, flat)
            gvals = []
            for li in range(len(work.layers)):
                gvals.append(grads[2 * li].value)
                gvals.append(grads[2 * li + 1].value[0])
            opt.step(params, gvals)
            epoch_out += float(out_term.value)
            epoch_expl += float(expl_term.value)

        epoch_loss = epoch_out + cfg.gamma * epoch_expl
        rec = {"event": "epoch", "epoch": epoch, "loss_out": epoch_out,
               "loss_expl": epoch_expl, "loss": epoch_loss}
        if y is not None:
            rec["accuracy"] = accuracy(work, x, y)
        records.append(rec)

        if prev_epoch_loss is not None and np.isfinite(prev_epoch_loss):
            improved = (prev_epoch_loss - epoch_loss) / max(abs(prev_epoch_loss), 1e-300)
            stall = stall + 1 if improved < cfg.rel_tol else 0
            if stall >= cfg.patience:
                records.append({"event": "converged", "epoch": epoch})
                break
        prev_epoch_loss = epoch_loss

    final = attack_loss(work, x, logits_ref, ks, cfg, basis_source)
    records.append({"event": "final", **final})
    if final["loss"] > init_loss:
        records.append({"event": "warning", "kind": "loss_increased",
                        "init": init_loss, "final": final["loss"]})
    if y is not None:
        acc1 = accuracy(work, x, y)
        if acc0 - acc1 > cfg.accuracy_guard:
            records.append({"event": "warning", "kind": "accuracy_drop",
                            "before": acc0, "after": acc1})
    return work, records


def finetune_attack(model: MlpModel, x, cfg: AttackConfig, y=None):
    """Fine-tune a copy of the model toward the target explanation.

    Returns (attacked model, records); records are JSON-friendly dicts with
    per-epoch loss terms plus init/final evaluations of the full objective.
    y (labels) is optional and only feeds the accuracy log and the accuracy
    guard warning.
    """
    return _finetune(model, x, y, cfg, None)


def finetune_attack_tsp(model: MlpModel, x, cfg: AttackConfig, basis_source, y=None):
    """Same objective, but the surrogate map is projected per sample before
    entering the explanation term (defense-aware attacker).

    basis_source is either an (N, D, d) array aligned with x or a
    ProjectorCache keyed 0..N-1. The projection runs before the optional
    xgrad input weighting, matching the generalized-projector definition.
    """
    if basis_source is None:
        raise ContractError("tsp attack needs per-sample projector bases")
    return _finetune(model, x, y, cfg, basis_source)
