import json
from pathlib import Path

import pytest

from gazerep import cli
from gazerep.attnmodel import load_checkpoint
from gazerep.gazetarget import read_salf
from gazerep.trainer import TrainingDiverged

SYNTH = ["--scans", "10", "--frames", "32", "--height", "32", "--width", "40", "--classes", "ellipse,cross"]
FAST = ["--epochs", "1", "--samples-per-epoch", "8", "--decay-epochs"]


def _tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert cli.main(["synth", "--out", str(out), "--seed", "1"] + SYNTH) == 0
    return out


@pytest.fixture(scope="module")
def sal_model(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "sal"
    assert cli.main(["train", "--task", "saliency", "--data", str(data), "--out", str(out), "--config", "mini",
                     "--seed", "0"] + FAST) == 0
    return out


def test_synth_is_byte_identical(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert cli.main(["synth", "--out", str(d), "--seed", "3"] + SYNTH) == 0
    assert _tree(a) == _tree(b)
    out = capsys.readouterr().out
    manifest = [json.loads(line) for line in (a / "manifest.jsonl").read_text().splitlines()]
    for cls in ("ellipse", "cross", "background"):
        n = sum(r["label"] == cls for r in manifest)
        assert f"{cls:12s} {n:6d}" in out


def test_synth_bad_classes_exit_2(tmp_path, capsys):
    assert cli.main(["synth", "--out", str(tmp_path), "--classes", "ellipse,hexagon"]) == 2
    assert "--classes" in capsys.readouterr().err


def test_missing_required_flag_exit_2():
    with pytest.raises(SystemExit) as info:
        cli.main(["train", "--task", "saliency"])
    assert info.value.code == 2


def test_rf_resnext_half_scales(capsys):
    assert cli.main(["rf", "--config", "resnext-half"]) == 0
    out = capsys.readouterr().out
    for scale in ("112x144", "56x72", "28x36", "14x18 (28x36)", "7x9 (28x36)"):
        assert scale in out
    rows = [line.split() for line in out.splitlines()[1:]]
    assert all(r[-2].split("/")[0] == r[-2].split("/")[1] for r in rows)


def test_rf_unknown_config_exit_2(capsys):
    assert cli.main(["rf", "--config", "no-such-net"]) == 2


def test_train_outputs_and_reproducibility(data, sal_model, tmp_path):
    for name in ("model.gazm", "log.jsonl", "config.json", "val_report.json", "baseline.salf"):
        assert (sal_model / name).exists()
    rep = json.loads((sal_model / "val_report.json").read_text())
    assert set(rep["model"]["metrics"]) == {"kld", "nss", "auc_judd", "cc", "sim"}
    again = tmp_path / "again"
    assert cli.main(["train", "--task", "saliency", "--data", str(data), "--out", str(again),
                     "--config", str(sal_model / "config.json")]) == 0
    assert (again / "model.gazm").read_bytes() == (sal_model / "model.gazm").read_bytes()
    assert (again / "val_report.json").read_bytes() == (sal_model / "val_report.json").read_bytes()


def test_full_size_preset_resolves(data, tmp_path):
    from gazerep.runs import resolve_run_config
    rc = resolve_run_config("paper-saliency", "saliency")
    cfg = rc.train_config()
    assert (cfg.lr, cfg.momentum, cfg.weight_decay, cfg.batch_size, cfg.epochs, cfg.decay_epochs) == \
        (0.1, 0.9, 1e-4, 32, 8, (6,))
    assert rc.network == "resnext-half"


def test_gaze_train(data, tmp_path):
    out = tmp_path / "gaze"
    assert cli.main(["train", "--task", "gaze", "--data", str(data), "--out", str(out), "--seed", "0"] + FAST) == 0
    _, meta = load_checkpoint(out / "model.gazm")
    assert meta["task"] == "gaze"
    assert "l2" in json.loads((out / "val_report.json").read_text())["model"]["metrics"]


def test_eval_model_twice_identical_and_dump(data, sal_model, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["eval", "--model", str(sal_model / "model.gazm"), "--data", str(data), "--out", str(a),
                     "--dump-saliency", "--stride", "8"]) == 0
    assert cli.main(["eval", "--model", str(sal_model / "model.gazm"), "--data", str(data), "--out", str(b),
                     "--stride", "8"]) == 0
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    rep = json.loads((a / "report.json").read_text())
    salf = sorted((a / "saliency").glob("*.salf"))
    assert len(salf) == rep["n_frames"]
    S = read_salf(salf[0])
    assert S.shape == (32, 40) and abs(S.sum() - 1) < 1e-4


def test_eval_static_baseline(data, tmp_path):
    assert cli.main(["eval", "--baseline", "static", "--baseline-data", str(data), "--data", str(data),
                     "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert set(rep["metrics"]) == {"kld", "nss", "auc_judd", "cc", "sim"}
    assert cli.main(["eval", "--data", str(data), "--out", str(tmp_path)]) == 2


@pytest.mark.parametrize("init", ["random", "checkpoint"])
def test_finetune(data, sal_model, tmp_path, capsys, init):
    spec = "random" if init == "random" else str(sal_model / "model.gazm")
    assert cli.main(["finetune", "--init", spec, "--data", str(data), "--out", str(tmp_path), "--seed", "0",
                     "--epochs", "1", "--samples-per-epoch", "16", "--decay-epochs"]) == 0
    rep = json.loads((tmp_path / "test_report.json").read_text())
    assert set(rep["per_class"]) == {"ellipse", "cross", "background"}
    assert set(rep["macro"]) == {"precision", "recall", "f1"}
    err = capsys.readouterr().err
    assert ("undilating" in err) == (init == "checkpoint")
    net, _ = load_checkpoint(tmp_path / "model.gazm")
    assert net.mode == "classification"
    lr = json.loads((tmp_path / "config.json").read_text())["train"]["lr"]
    assert lr == pytest.approx(0.3 if init == "random" else 0.12)


def test_finetune_unlabeled_exit_2(tmp_path):
    d = tmp_path / "d"
    assert cli.main(["synth", "--out", str(d)] + SYNTH) == 0
    lines = [json.loads(x) for x in (d / "manifest.jsonl").read_text().splitlines()]
    (d / "manifest.jsonl").write_text("".join(json.dumps({**r, "label": None}) + "\n" for r in lines))
    assert cli.main(["finetune", "--init", "random", "--data", str(d), "--out", str(tmp_path / "o")]) == 2


def test_probe_all_layers_and_unknown(data, tmp_path, capsys):
    assert cli.main(["probe", "--model", "random", "--config", "mini", "--data", str(data),
                     "--out", str(tmp_path), "--layers", "all"]) == 0
    res = json.loads((tmp_path / "probe.json").read_text())
    assert [r["layer"] for r in res] == ["stage1", "stage2", "stage3"]
    for r in res:
        assert set(r) >= {"layer", "selected_l2", "val_macro_f1", "test"} and len(r["val_macro_f1"]) == 16
    assert cli.main(["probe", "--model", "random", "--data", str(data), "--out", str(tmp_path),
                     "--layers", "stage7"]) == 2
    assert "stage1, stage2, stage3" in capsys.readouterr().err


def test_io_error_exit_3(tmp_path):
    assert cli.main(["train", "--task", "saliency", "--data", str(tmp_path / "nowhere"),
                     "--out", str(tmp_path / "o")]) == 3
    bad = tmp_path / "bad.gazm"
    bad.write_bytes(b"nope")
    assert cli.main(["eval", "--model", str(bad), "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 3


def test_numerical_abort_exit_4(data, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise TrainingDiverged(0, 3, 0.1, "loss nan")

    monkeypatch.setattr(cli, "train_attention", boom)
    assert cli.main(["train", "--task", "saliency", "--data", str(data), "--out", str(tmp_path)]) == 4


def test_threads_flag(data, tmp_path):
    assert cli.main(["rf", "--config", "mini", "--threads", "1"]) == 0
