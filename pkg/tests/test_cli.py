"""Config parsing, exit codes, and an end-to-end pipeline run."""

import json

import numpy as np
import pytest

from fairwash.cli import ConfigError, main, parse_config
from fairwash.dataio import load_map
from fairwash.models import load_model, predict


def _cfg_file(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


# ---------------------------------------------------------------------------
# config grammar
# ---------------------------------------------------------------------------


def test_parse_config_defaults_comments_and_overrides(tmp_path):
    path = _cfg_file(tmp_path, "\n".join([
        "# training run",
        "seed = 3",
        f"out_dir = {tmp_path}",
        "# two hidden layers (comments live on their own lines)",
        "model.hidden = 64,32",
        "attack.tsp = true",
        "",
    ]))
    cfg = parse_config(path)
    assert cfg["seed"] == 3
    assert cfg["model.hidden"] == [64, 32]
    assert cfg["attack.tsp"] is True
    assert cfg["train.lr"] == 0.01  # untouched default
    assert cfg["explain.methods"] == ["gradient"]
    over = parse_config(path, ["seed=99", "train.lr=0.5", "attack.tsp=false"])
    assert over["seed"] == 99 and over["train.lr"] == 0.5 and over["attack.tsp"] is False


@pytest.mark.parametrize("body,fragment", [
    ("seed = 1\nout_dir = /tmp\nbogus.key = 2\n", "unknown config key"),
    ("seed = 1\nseed = 2\nout_dir = /tmp\n", "duplicate key"),
    ("seed = oops\nout_dir = /tmp\n", "expected an integer"),
    ("out_dir = /tmp\n", "missing required"),
    ("seed = 1\nout_dir = /tmp\ndataset.kind = cifar\n", "expected one of"),
    ("seed = 1\nout_dir = /tmp\nattack.tsp = maybe\n", "expected true/false"),
    ("just one token\n", "expected 'key = value'"),
])
def test_parse_config_rejections(tmp_path, body, fragment):
    path = _cfg_file(tmp_path, body)
    with pytest.raises(ConfigError, match=fragment):
        parse_config(path)


def test_parse_config_bad_override_and_missing_file(tmp_path):
    path = _cfg_file(tmp_path, f"seed = 1\nout_dir = {tmp_path}\n")
    with pytest.raises(ConfigError, match="KEY=VALUE"):
        parse_config(path, ["seed"])
    with pytest.raises(ConfigError, match="not found"):
        parse_config(str(tmp_path / "gone.cfg"))


# ---------------------------------------------------------------------------
# exit codes
# ---------------------------------------------------------------------------


def test_exit_codes(tmp_path, capsys):
    path = _cfg_file(tmp_path, "\n".join([
        "seed = 5",
        f"out_dir = {tmp_path}",
        "dataset.n_train = 80",
        "dataset.n_test = 20",
        "model.hidden = 16",
        "train.epochs = 1",
        "sweep.count = 2",
        "sweep.k = 5",
        "sweep.d_max = 4",
    ]) + "\n")
    assert main(["train", path, "--set", "nonsense=1"]) == 2
    assert "config error" in capsys.readouterr().err

    assert main(["explain", path, "--set", "explain.model=missing.fwmodel"]) == 3
    assert "data error" in capsys.readouterr().err

    # more neighbours than the corpus offers breaks the kNN contract
    assert main(["tangent-sweep", path, "--set", "sweep.k=500"]) == 4
    assert "runtime error" in capsys.readouterr().err

    assert main(["train", path]) == 0
    out = capsys.readouterr().out
    assert "train_accuracy:" in out and "checkpoint:" in out


# ---------------------------------------------------------------------------
# credit demo
# ---------------------------------------------------------------------------


def test_credit_demo_hides_the_gender_feature(tmp_path, capsys):
    path = _cfg_file(tmp_path, "\n".join([
        "seed = 1",
        f"out_dir = {tmp_path}",
        "dataset.kind = credit",
        "credit.n = 5000",
        "credit.lam = 1000",
    ]) + "\n")
    assert main(["credit-demo", path, "--json"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["score_diff_max"] <= 1e-9
    assert summary["gender_relevance_g"] >= 0.8
    assert summary["gender_relevance_gt"] < 0.01
    assert summary["tsp_gradient_gap"] <= 1e-6
    assert (tmp_path / "credit_table.csv").exists()
    assert (tmp_path / "credit_data.csv").exists()
    report = json.loads((tmp_path / "credit_report.json").read_text())
    assert report == summary


# ---------------------------------------------------------------------------
# full pipeline
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run train, attack, explain, project, and evaluate once on a small
    corpus; the tests below only inspect the artifacts."""
    root = tmp_path_factory.mktemp("pipeline")
    path = root / "run.cfg"
    path.write_text("\n".join([
        "seed = 11",
        f"out_dir = {root}",
        "dataset.n_train = 260",
        "dataset.n_test = 60",
        "model.hidden = 32",
        "train.epochs = 3",
        "attack.epochs = 2",
        "attack.batch_size = 64",
        "attack.lr = 0.0001",
        "intgrad.steps = 16",
        "explain.count = 5",
        "explain.methods = gradient,xgrad",
        "project.count = 3",
        "project.methods = gradient",
        "evaluate.count = 6",
        "evaluate.methods = gradient,xgrad",
        "evaluate.tsp = true",
        "evaluate.flipping = true",
        "evaluate.flip_count = 2",
        "evaluate.flip_orders = 2",
        "tangent.k = 40",
        "tangent.d = 8",
    ]) + "\n")
    cfgpath = str(path)
    for command in ("train", "attack", "explain", "project", "evaluate"):
        code = main([command, cfgpath])
        assert code == 0, f"{command} exited with {code}"
    return root, cfgpath


def test_pipeline_artifacts(pipeline):
    root, _ = pipeline
    assert (root / "model.fwmodel").exists()
    assert (root / "train_log.jsonl").exists()
    assert (root / "attacked.fwmodel").exists()
    assert (root / "attack_log.jsonl").exists()
    assert (root / "report.json").exists()
    assert (root / "report.csv").exists()
    assert (root / "flipcurves.csv").exists()
    grad_maps = sorted((root / "maps").glob("model_gradient_*.fwmap"))
    assert len(grad_maps) == 5
    assert len(sorted((root / "maps").glob("model_xgrad_*.fwmap"))) == 5
    assert len(sorted((root / "maps").glob("model_tsp-gradient_*.fwmap"))) == 3
    # every map ships with a rendered preview
    assert all(p.with_name(p.name + ".pgm").exists() for p in grad_maps)
    emap = load_map(grad_maps[0])
    assert emap.shape == (28, 28)
    assert emap.method == "gradient"
    assert emap.normalization == "raw"


def test_pipeline_train_log_and_models(pipeline):
    root, _ = pipeline
    records = [json.loads(line) for line in
               (root / "train_log.jsonl").read_text().splitlines()]
    events = [r["event"] for r in records]
    assert events[0] == "init" and events[-1] == "final"
    assert events.count("epoch") == 3
    model = load_model(root / "model.fwmodel")
    attacked = load_model(root / "attacked.fwmodel")
    x = np.zeros((1, 784))
    assert predict(model, x).shape == (1, 10)
    assert not np.array_equal(predict(model, x), predict(attacked, x))


def test_pipeline_report_content(pipeline):
    root, _ = pipeline
    report = json.loads((root / "report.json").read_text())
    agg = report["aggregates"]
    assert report["n_samples"] == 6
    for key in ("ssim_ab_gradient", "ssim_target_b_gradient", "ssim_tsp_ab_gradient",
                "mse_ab_xgrad", "output_mse", "accuracy_a", "flip_auc_relevance",
                "flip_auc_tsp"):
        assert key in agg, key
    assert 0.0 <= agg["accuracy_a"] <= 1.0
    assert -1.0 <= agg["ssim_ab_gradient"]["median"] <= 1.0


def test_pipeline_reruns_are_byte_identical(pipeline):
    root, cfgpath = pipeline
    before = (root / "report.json").read_bytes()
    model_before = (root / "model.fwmodel").read_bytes()
    assert main(["train", cfgpath]) == 0
    assert main(["evaluate", cfgpath]) == 0
    assert (root / "model.fwmodel").read_bytes() == model_before
    assert (root / "report.json").read_bytes() == before


def test_pipeline_json_summary(pipeline, capsys):
    _, cfgpath = pipeline
    assert main(["tangent-sweep", cfgpath, "--set", "sweep.count=2",
                 "--set", "sweep.d_max=6", "--json"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["d_max"] == 6
    assert summary["residual_at_d_max"] >= 0.0
    assert summary["csv"].endswith("sweep.csv")
