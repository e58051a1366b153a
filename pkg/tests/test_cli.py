import csv
import json

import numpy as np
import pytest

from trajconv.cli import main
from trajconv.config import load_run_config
from trajconv.data import ConfigurationError
from trajconv.models import init_params
from trajconv.train import load_checkpoint


def scene_flags(files):
    out = []
    for sid, path in files.items():
        out += ["--scene", f"{sid}={path}"]
    return out


def write_ini(tmp_path, files, extra=""):
    body = "[data]\nscenes = " + ", ".join(files) + "\n"
    body += "".join(f"{sid} = {p.name}\n" for sid, p in files.items())
    body += "alpha.frame_step = 10\n"
    body += "\n[prep]\nnorm_mode = rel\naugment = rotate, noise\n\n[model]\nfamily = lstm\n\n[train]\nepochs = 3\n"
    body += extra
    path = tmp_path / "run.ini"
    path.write_text(body)
    return path


def test_config_file_and_overrides(tmp_path, scene_files):
    ini = write_ini(tmp_path, scene_files)
    cfg = load_run_config(ini)
    assert [s.scene_id for s in cfg.data.scenes] == ["alpha", "beta", "gamma"]
    assert cfg.data.scenes[0].frame_step == 10 and cfg.data.scenes[0].path == scene_files["alpha"]
    assert cfg.train.norm_mode == "rel" and cfg.train.augment == ("noise", "rotate")
    assert cfg.train.model.family == "lstm" and cfg.train.epochs == 3
    assert cfg.train.step_size == 17
    cfg2 = load_run_config(ini, {"train.epochs": "7", "model.family": "conv2d", "social.kind": "square_grid"})
    assert cfg2.train.epochs == 7 and cfg2.train.model.family == "conv2d"
    assert cfg2.train.model.social.size == 100


@pytest.mark.parametrize("extra", ["[model]\nflavour = x\n", "[bogus]\na = 1\n", "[prep]\nnorm_mode = polar\n"])
def test_config_rejects_unknown_keys(tmp_path, extra):
    p = tmp_path / "bad.ini"
    p.write_text(extra)
    with pytest.raises((ConfigurationError, ValueError)):
        load_run_config(p)


def test_trajnet_preset_from_config(tmp_path):
    p = tmp_path / "t.ini"
    p.write_text("[train]\npreset = trajnet\n")
    cfg = load_run_config(p)
    assert (cfg.train.epochs, cfg.train.gamma, cfg.train.step_size) == (250, 0.75, 35)


def test_ingest_writes_cache_and_manifest(tmp_path, scene_files):
    out = tmp_path / "ing"
    assert main(["ingest", *scene_flags(scene_files), "--out", str(out)]) == 0
    assert sorted(p.name for p in (out / "samples").iterdir()) == ["alpha.npz", "beta.npz", "gamma.npz"]
    man = json.loads((out / "manifest.json").read_text())
    assert set(man["datasets"]) == {"alpha", "beta", "gamma"}
    assert man["config"]["train"]["epochs"] == 60 and man["finished"]


def test_train_zero_epochs_equals_init(tmp_path, scene_files):
    out = tmp_path / "t0"
    assert main(["train", *scene_flags(scene_files), "--epochs", "0", "--model", "conv2d", "--out", str(out)]) == 0
    ckpt = load_checkpoint(out / "model.ckpt")
    assert ckpt.params.equals(init_params(ckpt.spec, ckpt.seed))


def test_train_is_reproducible(tmp_path, scene_files):
    args = ["train", *scene_flags(scene_files), "--epochs", "2", "--model", "lstm", "--augment", "rotate,noise"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()
    assert (tmp_path / "a" / "model_loss.csv").read_text() == (tmp_path / "b" / "model_loss.csv").read_text()


def test_xval_eval_report_pipeline(tmp_path, scene_files):
    ini = write_ini(tmp_path, scene_files)
    xv = tmp_path / "xv"
    assert main(["xval", "--config", str(ini), "--epochs", "1", "--out", str(xv)]) == 0
    assert len(list(xv.glob("fold_*.ckpt"))) == 3
    with open(xv / "table.csv") as fh:
        header, row = list(csv.reader(fh))
    assert header == ["alpha", "beta", "gamma", "average"] and all(" / " in c for c in row)
    with open(xv / "folds.csv") as fh:
        folds = list(csv.DictReader(fh))
    avg = np.mean([float(r["ade"]) for r in folds[:-1]])
    assert abs(float(folds[-1]["ade"]) - avg) <= 1e-12

    ev = tmp_path / "ev"
    assert main(["eval", "--config", str(ini), "--checkpoint", str(xv / "fold_beta.ckpt"), "--scenes", "beta",
                 "--out", str(ev)]) == 0
    with open(ev / "eval_eval.csv") as fh:
        assert float(list(csv.DictReader(fh))[0]["ade"]) == pytest.approx(float(folds[1]["ade"]), abs=1e-12)

    rep = tmp_path / "rep"
    assert main(["report", str(xv), "--out", str(rep)]) == 0
    with open(rep / "report.csv") as fh:
        merged = list(csv.DictReader(fh))
    assert float(merged[0]["average_ade"]) == pytest.approx(avg, abs=1e-12)
    assert (rep / "distribution.csv").exists()


def test_eval_refuses_unlabeled_split(tmp_path, scene_files):
    ini = write_ini(tmp_path, scene_files, "")
    text = ini.read_text().replace("[prep]", "gamma.labeled = false\n\n[prep]")
    ini.write_text(text)
    tr = tmp_path / "tr"
    assert main(["train", "--config", str(ini), "--scenes", "alpha", "--epochs", "1", "--out", str(tr)]) == 0
    code = main(["eval", "--config", str(ini), "--checkpoint", str(tr / "model.ckpt"), "--scenes", "gamma",
                 "--out", str(tmp_path / "ev")])
    assert code == 3


def test_question_mark_files_are_unlabeled(tmp_path, scene_files):
    text = scene_files["beta"].read_text().splitlines()
    masked = [ln if i % 3 else "\t".join(ln.split("\t")[:2] + ["?", "?"]) for i, ln in enumerate(text)]
    scene_files["beta"].write_text("\n".join(masked) + "\n")
    out = tmp_path / "ing"
    assert main(["ingest", *scene_flags(scene_files), "--out", str(out)]) == 0
    with open(out / "ingest.csv") as fh:
        labeled = {r["scene"]: r["labeled"] for r in csv.DictReader(fh)}
    assert labeled["beta"] == "False" and labeled["alpha"] == "True"


def test_bench_writes_six_rows(tmp_path, monkeypatch):
    import trajconv.cli as cli
    real = cli.latency_benchmark
    monkeypatch.setattr(cli, "latency_benchmark", lambda m, b, r, w: real(m, b, r, 1))
    out = tmp_path / "bench"
    assert main(["bench", "--models", "conv2d,lstm,encdec", "--batch", "1,2", "--out", str(out)]) == 0
    with open(out / "timing.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6 and {r["model"] for r in rows} == {"conv2d", "lstm", "encdec"}


def test_exit_codes(tmp_path, scene_files, capsys):
    assert main(["frobnicate"]) == 2
    assert main(["train", "--no-such-flag"]) == 2
    assert main(["train", "--scene", "x=/does/not/exist.txt", "--out", str(tmp_path / "x")]) == 3
    assert "/does/not/exist.txt" in capsys.readouterr().err
    bad = tmp_path / "bad.txt"
    bad.write_text("1 1 0 0\n2 one 0 0\n")
    assert main(["ingest", "--scene", f"b={bad}", "--out", str(tmp_path / "y")]) == 3
    assert "line 2" in capsys.readouterr().err


def test_run_root_env(tmp_path, scene_files, monkeypatch):
    monkeypatch.setenv("TRAJCONV_RUNS", str(tmp_path / "root"))
    assert main(["ingest", *scene_flags(scene_files)]) == 0
    (run,) = list((tmp_path / "root").iterdir())
    assert run.name.startswith("ingest-") and (run / "manifest.json").exists()
