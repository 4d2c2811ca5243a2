import json

import numpy as np
import pytest

from psamsod.cli import main
from psamsod.dataio import load_dataset, read_netpbm, write_ppm
from psamsod.gradcheck_suite import corrupt_backward
from psamsod.metrics import EvalPair, evaluate
from psamsod.model import ModelConfig, build_model, save_checkpoint
from psamsod.trainer import TrainConfig, train


@pytest.fixture(scope="module")
def data200(tmp_path_factory):
    root = tmp_path_factory.mktemp("d200")
    assert main(["generate", "--out", str(root), "--n", "200", "--size", "64", "--seed", "1"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(data200, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(data200), "--out", str(out), "--profile", "desk", "--epochs", "1"]) == 0
    return out


def manifest(path):
    return json.loads(path.read_text())


def test_generate_deterministic_and_loadable(tmp_path, data200):
    for d in ("a", "b"):
        assert main(["generate", "--out", str(tmp_path / d), "--n", "5", "--seed", "1"]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.p?m"))
    assert len(files) == 10
    assert all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
    assert manifest(tmp_path / "a" / "manifest.json")["output_hash"] == manifest(tmp_path / "b" / "manifest.json")["output_hash"]
    assert len(load_dataset(data200 / "images", data200 / "masks")) == 200


def test_usage_errors(tmp_path, capsys):
    assert main(["generate", "--out", str(tmp_path), "--n", "0"]) == 1
    assert main(["train", "--data", str(tmp_path), "--out", str(tmp_path), "--variant", "ours"]) == 1
    err = capsys.readouterr().err
    assert "baseline" in err and "baseline-sa" in err and "full" in err
    assert main(["--threads", "0", "gradcheck"]) == 1
    assert main([]) == 1
    assert main(["--help"]) == 0


def test_data_errors(tmp_path):
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 2
    assert main(["infer", "--checkpoint", str(tmp_path / "none.ckpt"), str(tmp_path / "x.ppm")]) == 2


def test_train_one_epoch_outputs(trained):
    assert sorted(p.name for p in trained.glob("*.ckpt")) == ["epoch_000.ckpt", "final.ckpt"]
    m = manifest(trained / "manifest.json")
    assert m["command"] == "train" and m["seed"] == 0
    assert set(m["artifacts"]) == {"epoch_000.ckpt", "final.ckpt", "train_log.csv"}
    assert m["config"]["train"]["epochs"] == 1 and m["config"]["model"]["variant"] == "full"


def test_eval_untrained_range_and_two_path_agreement(trained, data200, tmp_path):
    out = tmp_path / "ev"
    assert main(["eval", "--checkpoint", str(trained / "final.ckpt"), "--data", str(data200),
                 "--out", str(out), "--dump-predictions"]) == 0
    summary = (out / "summary.txt").read_text().split()
    vals = {k: float(v) for k, v in (kv.split("=") for kv in summary[1:])}
    assert all(0 <= v <= 1 for v in vals.values())
    dumped = np.load(out / "predictions.npz")
    data = load_dataset(data200 / "images", data200 / "masks")
    assert list(dumped["ids"]) == [s.id for s in data]
    manual = evaluate([EvalPair(p, s.mask[0]) for p, s in zip(dumped["predictions"], data)])
    assert (out / "summary.txt").read_text().strip() == manual.summary_line()
    assert (out / "pr_curve.csv").read_text() == manual.pr_csv()


def test_eval_ground_truth_against_itself(data200, tmp_path):
    out = tmp_path / "gt"
    assert main(["eval", "--predictions", str(data200 / "masks"), "--data", str(data200), "--out", str(out)]) == 0
    assert "max_f=1.0 " in (out / "summary.txt").read_text()
    assert "mae=0.0" in (out / "summary.txt").read_text()


def test_eval_checkpoint_data_mismatch(trained, tmp_path):
    assert main(["generate", "--out", str(tmp_path / "big"), "--n", "2", "--size", "128"]) == 0
    assert main(["eval", "--checkpoint", str(trained / "final.ckpt"), "--data", str(tmp_path / "big"),
                 "--out", str(tmp_path / "o")]) == 2


def test_train_and_eval_rerun_identical(data200, tmp_path):
    hashes = []
    for run in ("r1", "r2"):
        out = tmp_path / run
        assert main(["--threads", "1", "train", "--data", str(data200), "--out", str(out), "--variant", "baseline",
                     "--profile", "desk", "--epochs", "1", "--seed", "3"]) == 0
        assert main(["eval", "--checkpoint", str(out / "final.ckpt"), "--data", str(data200),
                     "--out", str(out / "eval")]) == 0
        hashes.append((manifest(out / "manifest.json")["output_hash"], manifest(out / "eval" / "manifest.json")["output_hash"]))
    assert hashes[0] == hashes[1]
    assert (tmp_path / "r1" / "final.ckpt").read_bytes() == (tmp_path / "r2" / "final.ckpt").read_bytes()


def test_numeric_failure_exit_code(data200, tmp_path):
    code = main(["train", "--data", str(data200), "--out", str(tmp_path / "nan"), "--profile", "desk",
                 "--epochs", "1", "--lr-phase1", "1e300", "--weight-decay", "0"])
    assert code == 3
    assert (tmp_path / "nan" / "diagnostic.ckpt").exists()


def test_infer_dims_and_values(trained, tmp_path):
    rng = np.random.default_rng(0)
    paths = []
    for name, (h, w) in {"same": (64, 64), "odd": (48, 80)}.items():
        paths.append(str(write_ppm(tmp_path / f"{name}.ppm", rng.integers(0, 256, (h, w, 3), dtype=np.uint8))))
    assert main(["infer", "--checkpoint", str(trained / "final.ckpt")] + paths) == 0
    for name, shape in (("same", (64, 64)), ("odd", (48, 80))):
        out = read_netpbm(tmp_path / f"{name}_saliency.pgm")
        assert out.shape == shape and out.dtype == np.uint8
    assert (tmp_path / "infer_manifest.json").exists()


def test_infer_after_overfit_recovers_mask(data200, tmp_path):
    sample = load_dataset(data200 / "images", data200 / "masks")[0]
    model = build_model(ModelConfig(variant="baseline"), 0)
    train(model, [sample] * 30, TrainConfig.desk(epochs=5, batch_size=1, flip=False))
    ckpt = save_checkpoint(model, tmp_path / "overfit.ckpt")
    img = data200 / "images" / f"{sample.id}.ppm"
    assert main(["infer", "--checkpoint", str(ckpt), "--out", str(tmp_path / "o"), str(img)]) == 0
    pred = read_netpbm(tmp_path / "o" / f"{sample.id}_saliency.pgm") >= 128
    gt = sample.mask[0] > 0
    assert (pred & gt).sum() / (pred | gt).sum() > 0.8


def test_gradcheck_report_and_negative_control(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path)]) == 0
    report = (tmp_path / "gradcheck_report.txt").read_text()
    from psamsod.autodiff import OP_REGISTRY
    for op in OP_REGISTRY:
        assert f"op:{op} " in report
    assert "model:full" in report and "overall PASS" in report
    with corrupt_backward("window_logits"):
        assert main(["gradcheck", "--out", str(tmp_path / "bad")]) == 3
    assert "FAIL" in (tmp_path / "bad" / "gradcheck_report.txt").read_text()


def test_ablate_table_rows(tmp_path, capsys):
    assert main(["ablate", "--out", str(tmp_path), "--n-train", "8", "--n-test", "4", "--epochs", "1"]) == 0
    rows = (tmp_path / "ablation.csv").read_text().splitlines()
    assert rows[0] == "variant,max_f,mean_f,mae"
    assert [r.split(",")[0] for r in rows[1:]] == ["baseline", "baseline-sa", "full"]
    assert "full - baseline" in capsys.readouterr().out
    m = manifest(tmp_path / "manifest.json")
    assert m["config"]["reference_duts_te"]["full"] == [0.879, 0.040]
