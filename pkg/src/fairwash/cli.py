"""Command-line pipeline driver.

Subcommands: train, attack, explain, project, evaluate, credit-demo,
tangent-sweep. Every run is described by a strict key = value config file
(unknown keys are rejected before any computation) plus optional --set
overrides, which win over the file. All outputs land under out_dir and are
byte-identical across re-runs with the same config and seed.

Exit codes: 0 success, 2 config error, 3 missing or malformed data/artifact,
4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import attack as A
from . import dataio as D
from . import evalmetrics as E
from . import explain as X
from . import manifold as M
from . import models as Mo
from .rng import RngState
from .tape import ContractError, as_array


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config grammar
# ---------------------------------------------------------------------------

_REQUIRED = object()


def _p_int(s):
    try:
        return int(s)
    except ValueError:
        raise ConfigError(f"expected an integer, got {s!r}") from None


def _p_float(s):
    try:
        return float(s)
    except ValueError:
        raise ConfigError(f"expected a number, got {s!r}") from None


def _p_bool(s):
    low = s.strip().lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ConfigError(f"expected true/false, got {s!r}")


def _p_str(s):
    return s.strip()


def _p_strlist(s):
    items = [part.strip() for part in s.split(",") if part.strip()]
    if not items:
        raise ConfigError("expected a comma-separated list")
    return items


def _p_intlist(s):
    return [_p_int(part) for part in _p_strlist(s)]


def _choice(*options):
    def parse(s):
        s = s.strip()
        if s not in options:
            raise ConfigError(f"expected one of {options}, got {s!r}")
        return s

    return parse


_SCHEMA = {
    "seed": (_p_int, _REQUIRED),
    "out_dir": (_p_str, _REQUIRED),
    "dataset.kind": (_choice("digits", "idx", "credit"), "digits"),
    "dataset.n_train": (_p_int, 5000),
    "dataset.n_test": (_p_int, 1000),
    "dataset.train_images": (_p_str, ""),
    "dataset.train_labels": (_p_str, ""),
    "dataset.test_images": (_p_str, ""),
    "dataset.test_labels": (_p_str, ""),
    "credit.n": (_p_int, 100000),
    "credit.lam": (_p_float, 1000.0),
    "model.hidden": (_p_intlist, [256]),
    "model.activation": (_choice("relu", "softplus"), "relu"),
    "model.softplus_beta": (_p_float, 10.0),
    "train.optimizer": (_choice("sgd", "adam"), "sgd"),
    "train.lr": (_p_float, 0.01),
    "train.momentum": (_p_float, 0.5),
    "train.batch_size": (_p_int, 128),
    "train.epochs": (_p_int, 10),
    "attack.gamma": (_p_float, 4.0),
    "attack.lr": (_p_float, 1e-5),
    "attack.batch_size": (_p_int, 100),
    "attack.epochs": (_p_int, 40),
    "attack.rel_tol": (_p_float, 1e-3),
    "attack.patience": (_p_int, 3),
    "attack.surrogate": (_choice("gradient", "xgrad"), "gradient"),
    "attack.target": (_p_str, "fourtwo"),
    "attack.target_scale": (_p_str, "auto"),
    "attack.tsp": (_p_bool, False),
    "attack.model_in": (_p_str, "model.fwmodel"),
    "attack.model_out": (_p_str, ""),
    "tangent.method": (_choice("hyperplane", "autoencoder"), "hyperplane"),
    "tangent.k": (_p_int, 200),
    "tangent.d": (_p_int, 30),
    "ae.hidden": (_p_int, 64),
    "ae.code": (_p_int, 16),
    "ae.epochs": (_p_int, 20),
    "ae.lr": (_p_float, 1e-3),
    "intgrad.steps": (_p_int, 128),
    "lrp.eps": (_p_float, 1e-6),
    "explain.model": (_p_str, "model.fwmodel"),
    "explain.methods": (_p_strlist, ["gradient"]),
    "explain.count": (_p_int, 20),
    "explain.split": (_choice("train", "test"), "test"),
    "project.model": (_p_str, "model.fwmodel"),
    "project.methods": (_p_strlist, ["gradient"]),
    "project.count": (_p_int, 20),
    "project.split": (_choice("train", "test"), "test"),
    "evaluate.model_a": (_p_str, "model.fwmodel"),
    "evaluate.model_b": (_p_str, "attacked.fwmodel"),
    "evaluate.methods": (_p_strlist, ["gradient"]),
    "evaluate.count": (_p_int, 100),
    "evaluate.target": (_p_str, "fourtwo"),
    "evaluate.tsp": (_p_bool, False),
    "evaluate.flipping": (_p_bool, False),
    "evaluate.flip_count": (_p_int, 20),
    "evaluate.flip_orders": (_p_int, 5),
    "sweep.count": (_p_int, 10),
    "sweep.k": (_p_int, 200),
    "sweep.d_max": (_p_int, 60),
    "sweep.split": (_choice("train", "test"), "test"),
}

_METHOD_NAMES = ("gradient", "xgrad", "intgrad", "lrp_eps", "lrp_zplus")


def _read_pairs(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    pairs = {}
    for lineno, raw in enumerate(p.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in pairs:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        pairs[key] = value.strip()
    return pairs


def parse_config(path, overrides=()) -> dict:
    """Parse and validate a config file plus --set overrides (which win)."""
    pairs = _read_pairs(path)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set needs KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        pairs[key.strip()] = value.strip()
    for key in pairs:
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key: {key}")
    cfg = {}
    for key, (parse, default) in _SCHEMA.items():
        if key in pairs:
            try:
                cfg[key] = parse(pairs[key])
            except ConfigError as exc:
                raise ConfigError(f"{key}: {exc}") from None
        else:
            if default is _REQUIRED:
                raise ConfigError(f"missing required config key: {key}")
            cfg[key] = default
    return cfg


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def _out_dir(cfg) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve(cfg, name) -> Path:
    p = Path(name)
    return p if p.is_absolute() else _out_dir(cfg) / p


def _require_artifact(path: Path) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"missing artifact: {path}")
    return path


def _map_shape(d: int) -> tuple:
    side = math.isqrt(d)
    return (side, side) if side * side == d else (d,)


def _image_datasets(cfg):
    """Normalized train/test splits for the image pipeline."""
    kind = cfg["dataset.kind"]
    if kind == "digits":
        train, test = D.gen_digits_split(cfg["dataset.n_train"], cfg["dataset.n_test"],
                                         cfg["seed"])
    elif kind == "idx":
        for key in ("dataset.train_images", "dataset.train_labels",
                    "dataset.test_images", "dataset.test_labels"):
            if not cfg[key]:
                raise ConfigError(f"dataset.kind = idx needs {key}")
        train = D.load_idx_dataset(cfg["dataset.train_images"], cfg["dataset.train_labels"])
        test = D.load_idx_dataset(cfg["dataset.test_images"], cfg["dataset.test_labels"])
        train = D.Dataset(train.inputs[:cfg["dataset.n_train"]],
                          train.labels[:cfg["dataset.n_train"]])
        test = D.Dataset(test.inputs[:cfg["dataset.n_test"]],
                         test.labels[:cfg["dataset.n_test"]])
    else:
        raise ConfigError(f"this command works on image data, not dataset.kind = {kind}")
    train = D.normalize(train)
    test = D.normalize_with(test, train.norm)
    return train, test


def _write_jsonl(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True))
            fh.write("\n")


def _target_map(cfg, key, dim) -> np.ndarray:
    name = cfg[key]
    if name == "fourtwo":
        t = D.target_fourtwo().ravel()
        if t.size != dim:
            raise ContractError(f"built-in target has {t.size} pixels, model expects {dim}")
        return t
    emap = D.load_map(_require_artifact(_resolve(cfg, name)))
    if emap.values.size != dim:
        raise ContractError(f"target map size {emap.values.size} does not match model {dim}")
    return emap.values.copy()


def _scaled_attack_target(cfg, model, train_inputs) -> np.ndarray:
    """Unit-normalize the target pattern, then scale it to a magnitude
    comparable with the model's own gradient maps (or a fixed scale)."""
    target = _target_map(cfg, "attack.target", model.in_dim)
    norm = np.linalg.norm(target)
    if norm == 0:
        raise ContractError("attack target is all zero")
    unit = target / norm
    spec = cfg["attack.target_scale"]
    if spec == "auto":
        probe = train_inputs[:1024]
        grads = X.gradient_maps(model, probe)
        scale = float(np.median(np.linalg.norm(grads, axis=1)))
    else:
        scale = _p_float(spec)
    return unit * scale


def _train_ae_per_class(cfg, train) -> dict:
    aes = {}
    classes = sorted(int(c) for c in np.unique(train.labels))
    d = train.dim
    for cls in classes:
        rows = train.inputs[train.labels == cls]
        enc = Mo.init_mlp([d, cfg["ae.hidden"], cfg["ae.code"]], "relu",
                          RngState(cfg["seed"]).child(f"ae/{cls}"), tag="enc")
        dec = Mo.init_mlp([cfg["ae.code"], cfg["ae.hidden"], d], "relu",
                          RngState(cfg["seed"]).child(f"ae/{cls}"), tag="dec")
        tc = Mo.TrainConfig(optimizer="adam", learning_rate=cfg["ae.lr"], epochs=cfg["ae.epochs"],
                            batch_size=128, seed=RngState(cfg["seed"]).child(f"ae/{cls}").seed)
        ae, _ = Mo.train_autoencoder(Mo.AutoencoderModel(enc, dec), rows, tc)
        aes[cls] = ae
    return aes


def _projector_cache(cfg, cache_path: Path, model, queries, base, sample_indices,
                     exclude_self: bool, train=None) -> M.ProjectorCache:
    if cache_path.is_file():
        return M.ProjectorCache(cache_path)
    if cfg["tangent.method"] == "hyperplane":
        return M.build_hyperplane_cache(cache_path, queries, base, cfg["tangent.k"],
                                        cfg["tangent.d"], sample_indices=sample_indices,
                                        exclude_self=exclude_self)
    aes = _train_ae_per_class(cfg, train)
    classes = Mo.predicted_class(model, queries)
    bases = {}
    for i, x in enumerate(queries):
        ae = aes[int(classes[i])]
        proj = M.decoder_tangent(ae, x, min(cfg["tangent.d"], ae.code_dim))
        bases[int(sample_indices[i])] = proj.basis
    return M.ProjectorCache(M.write_projector_cache(cache_path, bases))


def _compute_maps(model, inputs, ks, method, cfg) -> np.ndarray:
    if method == "gradient":
        return X.gradient_maps(model, inputs, ks)
    if method == "xgrad":
        return X.xgrad_maps(model, inputs, ks)
    if method == "intgrad":
        return X.intgrad_maps(model, inputs, ks, X.IntGradConfig(steps=cfg["intgrad.steps"]))
    if method in ("lrp_eps", "lrp_zplus"):
        rule = method.split("_", 1)[1]
        return X.lrp_maps(model, inputs, ks, X.LrpConfig(eps=cfg["lrp.eps"], rule=rule))
    raise ConfigError(f"unknown explanation method {method!r}")


def _check_methods(methods):
    for m in methods:
        if m not in _METHOD_NAMES:
            raise ConfigError(f"unknown explanation method {m!r}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(cfg) -> dict:
    train, test = _image_datasets(cfg)
    out = _out_dir(cfg)
    classes = int(max(train.labels.max(), test.labels.max())) + 1
    dims = [train.dim] + list(cfg["model.hidden"]) + [classes]
    model = Mo.init_mlp(dims, cfg["model.activation"], RngState(cfg["seed"]),
                        beta=cfg["model.softplus_beta"])
    tc = Mo.TrainConfig(optimizer=cfg["train.optimizer"], learning_rate=cfg["train.lr"],
                        momentum=cfg["train.momentum"], batch_size=cfg["train.batch_size"],
                        epochs=cfg["train.epochs"], seed=cfg["seed"])
    model, history = Mo.train_classifier(model, train.inputs, train.labels, tc)
    ckpt = out / "model.fwmodel"
    Mo.save_model(model, ckpt)
    _write_jsonl(out / "train_log.jsonl", history)
    return {
        "checkpoint": str(ckpt),
        "train_accuracy": Mo.accuracy(model, train.inputs, train.labels),
        "test_accuracy": Mo.accuracy(model, test.inputs, test.labels),
        "final_loss": history[-1]["loss"],
    }


def cmd_attack(cfg) -> dict:
    train, _ = _image_datasets(cfg)
    out = _out_dir(cfg)
    model = Mo.load_model(_require_artifact(_resolve(cfg, cfg["attack.model_in"])))
    target = _scaled_attack_target(cfg, model, train.inputs)
    acfg = A.AttackConfig(target=target, gamma=cfg["attack.gamma"], lr=cfg["attack.lr"],
                          batch_size=cfg["attack.batch_size"], max_epochs=cfg["attack.epochs"],
                          rel_tol=cfg["attack.rel_tol"], patience=cfg["attack.patience"],
                          surrogate=cfg["attack.surrogate"], seed=cfg["seed"])
    if cfg["attack.tsp"]:
        cache_path = out / (f"train_proj_{cfg['tangent.method']}"
                            f"_k{cfg['tangent.k']}_d{cfg['tangent.d']}.fwproj")
        cache = _projector_cache(cfg, cache_path, model, train.inputs, train.inputs,
                                 np.arange(train.n), exclude_self=True, train=train)
        attacked, records = A.finetune_attack_tsp(model, train.inputs, acfg, cache,
                                                  y=train.labels)
        default_out, log_name = "attacked_tsp.fwmodel", "attack_tsp_log.jsonl"
    else:
        attacked, records = A.finetune_attack(model, train.inputs, acfg, y=train.labels)
        default_out, log_name = "attacked.fwmodel", "attack_log.jsonl"
    model_out = cfg["attack.model_out"] or default_out
    ckpt = _resolve(cfg, model_out)
    Mo.save_model(attacked, ckpt)
    _write_jsonl(out / log_name, records)
    final = [r for r in records if r.get("event") == "final"][0]
    return {
        "checkpoint": str(ckpt),
        "loss": final["loss"],
        "loss_out": final["loss_out"],
        "loss_expl": final["loss_expl"],
        "train_accuracy": Mo.accuracy(attacked, train.inputs, train.labels),
        "epochs_run": sum(1 for r in records if r.get("event") == "epoch"),
    }


def cmd_explain(cfg) -> dict:
    train, test = _image_datasets(cfg)
    out = _out_dir(cfg)
    model = Mo.load_model(_require_artifact(_resolve(cfg, cfg["explain.model"])))
    split = train if cfg["explain.split"] == "train" else test
    count = min(cfg["explain.count"], split.n)
    inputs = split.inputs[:count]
    ks = Mo.predicted_class(model, inputs)
    _check_methods(cfg["explain.methods"])
    shape = _map_shape(split.dim)
    maps_dir = out / "maps"
    maps_dir.mkdir(exist_ok=True)
    stem = Path(cfg["explain.model"]).stem
    written = 0
    for method in cfg["explain.methods"]:
        maps = _compute_maps(model, inputs, ks, method, cfg)
        for i in range(count):
            emap = X.ExplanationMap(maps[i], method, int(ks[i]), "raw", shape)
            D.save_map(emap, maps_dir / f"{stem}_{method}_{i:04d}.fwmap")
            written += 1
    return {"maps_written": written, "maps_dir": str(maps_dir)}


def cmd_project(cfg) -> dict:
    train, test = _image_datasets(cfg)
    out = _out_dir(cfg)
    model = Mo.load_model(_require_artifact(_resolve(cfg, cfg["project.model"])))
    split_name = cfg["project.split"]
    split = train if split_name == "train" else test
    count = min(cfg["project.count"], split.n)
    inputs = split.inputs[:count]
    ks = Mo.predicted_class(model, inputs)
    _check_methods(cfg["project.methods"])
    cache_path = out / (f"proj_{split_name}_{cfg['tangent.method']}"
                        f"_k{cfg['tangent.k']}_d{cfg['tangent.d']}_{count}.fwproj")
    cache = _projector_cache(cfg, cache_path, model, inputs, train.inputs,
                             np.arange(count), exclude_self=(split_name == "train"),
                             train=train)
    shape = _map_shape(split.dim)
    maps_dir = out / "maps"
    maps_dir.mkdir(exist_ok=True)
    stem = Path(cfg["project.model"]).stem
    written = 0
    for method in cfg["project.methods"]:
        maps = _compute_maps(model, inputs, ks, method, cfg)
        for i in range(count):
            proj = cache.projector(i, anchor=inputs[i])
            emap = X.ExplanationMap(maps[i], method, int(ks[i]), "raw", shape)
            tsp = M.tsp_map(emap, proj, x=inputs[i], model=model,
                            intgrad_cfg=X.IntGradConfig(steps=cfg["intgrad.steps"]))
            D.save_map(tsp, maps_dir / f"{stem}_tsp-{method}_{i:04d}.fwmap")
            written += 1
    return {"maps_written": written, "maps_dir": str(maps_dir),
            "projector_cache": str(cache_path)}


def _normalized(vals) -> np.ndarray:
    total = np.abs(vals).sum()
    if total == 0:
        return None
    return np.abs(vals) / total


def cmd_evaluate(cfg) -> dict:
    train, test = _image_datasets(cfg)
    out = _out_dir(cfg)
    model_a = Mo.load_model(_require_artifact(_resolve(cfg, cfg["evaluate.model_a"])))
    model_b = Mo.load_model(_require_artifact(_resolve(cfg, cfg["evaluate.model_b"])))
    count = min(cfg["evaluate.count"], test.n)
    inputs = test.inputs[:count]
    labels = test.labels[:count]
    ks = Mo.predicted_class(model_a, inputs)
    _check_methods(cfg["evaluate.methods"])
    shape = _map_shape(test.dim)
    if len(shape) != 2:
        raise ContractError("evaluation needs image-shaped data")
    target = _target_map(cfg, "evaluate.target", test.dim)
    t_norm = _normalized(target).reshape(shape)

    cache = None
    if cfg["evaluate.tsp"]:
        cache_path = out / (f"proj_eval_{cfg['tangent.method']}"
                            f"_k{cfg['tangent.k']}_d{cfg['tangent.d']}_{count}.fwproj")
        cache = _projector_cache(cfg, cache_path, model_a, inputs, train.inputs,
                                 np.arange(count), exclude_self=False, train=train)

    per_sample = [{"sample": i} for i in range(count)]
    for method in cfg["evaluate.methods"]:
        maps_a = _compute_maps(model_a, inputs, ks, method, cfg)
        maps_b = _compute_maps(model_b, inputs, ks, method, cfg)
        if cache is not None:
            bases = cache.basis_batch(np.arange(count))
            proj_a = M.project_gradient_maps(X.gradient_maps(model_a, inputs, ks), bases)
            proj_b = M.project_gradient_maps(X.gradient_maps(model_b, inputs, ks), bases)
            if method == "gradient":
                tsp_a, tsp_b = proj_a, proj_b
            elif method == "xgrad":
                tsp_a, tsp_b = inputs * _ratio_proj(bases, inputs, maps_a), \
                    inputs * _ratio_proj(bases, inputs, maps_b)
            elif method == "intgrad":
                projs = [cache.projector(i, anchor=inputs[i]) for i in range(count)]
                icfg = X.IntGradConfig(steps=cfg["intgrad.steps"])
                tsp_a = M.tsp_intgrad_maps(model_a, inputs, ks, projs, icfg)
                tsp_b = M.tsp_intgrad_maps(model_b, inputs, ks, projs, icfg)
            else:
                tsp_a = M.project_gradient_maps(maps_a, bases)
                tsp_b = M.project_gradient_maps(maps_b, bases)
        for i in range(count):
            rec = per_sample[i]
            na = _normalized(maps_a[i])
            nb = _normalized(maps_b[i])
            if na is None or nb is None:
                continue
            ga, gb = na.reshape(shape), nb.reshape(shape)
            rec[f"ssim_ab_{method}"] = E.ssim(ga, gb)
            rec[f"ssim_target_a_{method}"] = E.ssim(ga, t_norm)
            rec[f"ssim_target_b_{method}"] = E.ssim(gb, t_norm)
            try:
                rec[f"pcc_ab_{method}"] = E.pcc(na, nb)
            except E.ConstantMapError:
                rec[f"pcc_ab_{method}"] = None
            rec[f"mse_ab_{method}"] = E.mse(na, nb)
            if cache is not None:
                pa, pb = _normalized(tsp_a[i]), _normalized(tsp_b[i])
                if pa is not None and pb is not None:
                    rec[f"ssim_tsp_ab_{method}"] = E.ssim(pa.reshape(shape), pb.reshape(shape))
                    rec[f"ssim_tsp_target_b_{method}"] = E.ssim(pb.reshape(shape), t_norm)

    logits_a = Mo.predict(model_a, inputs)
    logits_b = Mo.predict(model_b, inputs)
    probs_a = Mo.softmax_probs(logits_a)
    probs_b = Mo.softmax_probs(logits_b)
    extra = {
        "output_mse": float(((probs_a - probs_b) ** 2).mean()),
        "mean_kl": float(np.mean([E.kl(probs_a[i], probs_b[i]) for i in range(count)])),
        "accuracy_a": Mo.accuracy(model_a, inputs, labels),
        "accuracy_b": Mo.accuracy(model_b, inputs, labels),
    }

    flip_rows = []
    if cfg["evaluate.flipping"]:
        n_flip = min(cfg["evaluate.flip_count"], count)
        rng = RngState(cfg["seed"])
        rel_aucs, rand_aucs, tsp_aucs = [], [], []
        grad_a = X.gradient_maps(model_a, inputs[:n_flip], ks[:n_flip])
        for i in range(n_flip):
            emap = X.ExplanationMap(grad_a[i], "gradient", int(ks[i]), "raw", shape)
            nmap = X.normalize_map(emap)
            curve = E.pixel_flipping(model_a, inputs[i], nmap)
            rel_aucs.append(curve.auc)
            flip_rows.extend((i, "relevance", f, c)
                             for f, c in zip(curve.fractions, curve.confidences))
            randoms = []
            for r in range(cfg["evaluate.flip_orders"]):
                rc = E.pixel_flipping(model_a, inputs[i], nmap, order="random",
                                      rng=rng.stream(f"flip/{i}/{r}"))
                randoms.append(rc.auc)
            rand_aucs.append(float(np.mean(randoms)))
            if cache is not None:
                proj = cache.projector(i, anchor=inputs[i])
                tmap = M.tsp_map(X.ExplanationMap(grad_a[i], "gradient", int(ks[i]),
                                                  "raw", shape), proj)
                tn = X.normalize_map(tmap)
                tc = E.pixel_flipping(model_a, inputs[i], tn)
                tsp_aucs.append(tc.auc)
        extra["flip_auc_relevance"] = E.aggregate(rel_aucs)
        extra["flip_auc_random_mean"] = E.aggregate(rand_aucs)
        if tsp_aucs:
            extra["flip_auc_tsp"] = E.aggregate(tsp_aucs)
        D.write_csv(out / "flipcurves.csv", ["sample", "order", "fraction", "confidence"],
                    flip_rows)

    report = E.build_report(per_sample, extra=extra)
    E.report_to_json(report, out / "report.json")
    E.report_to_csv(report, out / "report.csv")
    summary = {"report": str(out / "report.json"), **{
        k: v["median"] if isinstance(v, dict) and "median" in v else v
        for k, v in report.aggregates.items()
    }}
    return summary


def _ratio_proj(bases, inputs, maps):
    ratio = np.divide(maps, inputs, out=np.zeros_like(maps), where=inputs != 0.0)
    return M.project_gradient_maps(ratio, bases)


def cmd_credit_demo(cfg) -> dict:
    out = _out_dir(cfg)
    ds = D.gen_credit(cfg["credit.n"], cfg["seed"])
    g = D.credit_model()
    spec = A.FlatManifoldSpec(D.CREDIT_NORMAL[None, :], [D.CREDIT_OFFSET])
    gt = A.analytic_fairwash(g, spec, [cfg["credit.lam"]], x=ds.inputs)
    score_diff = float(np.abs(Mo.predict(g, ds.inputs) - Mo.predict(gt, ds.inputs)).max())

    # exact tangent projector: the orthonormal complement of the constraint normal
    _, _, vh = np.linalg.svd(spec.normals, full_matrices=True)
    proj = M.Projector(np.ascontiguousarray(vh[1:].T))

    def signed_norm(maps):
        return maps / np.abs(maps).sum(axis=1, keepdims=True)

    maps = {}
    for name, mdl in (("g", g), ("gt", gt)):
        grad = X.gradient_maps(mdl, ds.inputs)
        xg = ds.inputs * grad
        maps[f"{name}_gradient"] = signed_norm(grad)
        maps[f"{name}_xgrad"] = signed_norm(xg)
        maps[f"{name}_tsp_gradient"] = signed_norm(proj.apply(grad))
        gen = ds.inputs * proj.apply(
            np.divide(xg, ds.inputs, out=np.zeros_like(xg), where=ds.inputs != 0.0))
        maps[f"{name}_tsp_xgrad"] = signed_norm(gen)

    table_rows = []
    medians = {}
    for col, arr in sorted(maps.items()):
        med = np.median(np.abs(arr), axis=0)
        medians[col] = med
        for fi, feat in enumerate(ds.feature_names):
            table_rows.append((col, feat, med[fi]))
    D.write_csv(out / "credit_table.csv", ["maps", "feature", "median_abs_relevance"],
                table_rows)

    export = min(ds.n, 1000)
    D.write_csv(out / "credit_data.csv", ds.feature_names + ["label"],
                [tuple(ds.inputs[i]) + (int(ds.labels[i]),) for i in range(export)])

    tsp_gap = float(np.abs(maps["g_tsp_gradient"] - maps["gt_tsp_gradient"]).max())
    summary = {
        "score_diff_max": score_diff,
        "gender_relevance_g": float(medians["g_gradient"][0]),
        "gender_relevance_gt": float(medians["gt_gradient"][0]),
        "tsp_gradient_gap": tsp_gap,
        "table": str(out / "credit_table.csv"),
    }
    with open(out / "credit_report.json", "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return summary


def cmd_tangent_sweep(cfg) -> dict:
    train, test = _image_datasets(cfg)
    out = _out_dir(cfg)
    split = train if cfg["sweep.split"] == "train" else test
    count = min(cfg["sweep.count"], split.n)
    d_max = min(cfg["sweep.d_max"], train.dim)
    curves = []
    for i in range(count):
        exclude = i if cfg["sweep.split"] == "train" else None
        curves.append(M.reconstruction_sweep(split.inputs[i], train.inputs,
                                             cfg["sweep.k"], d_max, exclude_index=exclude))
    mean_curve = np.mean(curves, axis=0)
    total = float(mean_curve[0]) if mean_curve[0] > 0 else 1.0
    rows = [(d + 1, mean_curve[d], mean_curve[d] / total) for d in range(d_max)]
    path = out / "sweep.csv"
    D.write_csv(path, ["d", "mean_residual", "relative_to_d1"], rows)
    return {"csv": str(path), "d_max": d_max, "residual_at_d_max": float(mean_curve[-1])}


_COMMANDS = {
    "train": cmd_train,
    "attack": cmd_attack,
    "explain": cmd_explain,
    "project": cmd_project,
    "evaluate": cmd_evaluate,
    "credit-demo": cmd_credit_demo,
    "tangent-sweep": cmd_tangent_sweep,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fairwash",
                                     description="explanation attack/defense pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="path to a key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable; wins over the file)")
        p.add_argument("--json", action="store_true", help="print a JSON summary")
    args = parser.parse_args(argv)

    try:
        cfg = parse_config(args.config, args.set)
        summary = _COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (D.IdxFormatError, D.MapFormatError, Mo.ModelFormatError,
            M.ProjFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (ContractError, A.AttackDivergence) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 4

    if args.json:
        print(json.dumps(summary, sort_keys=True))
    else:
        for key in sorted(summary):
            print(f"{key}: {summary[key]}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
