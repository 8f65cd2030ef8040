import json
import subprocess
import sys
from dataclasses import asdict

import numpy as np
import pytest
import yaml

from darkadapt.cli import main, parse_bins
from darkadapt.pipeline import load_checkpoint

from conftest import tiny_bench, tiny_train


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    bench = asdict(tiny_bench(unlabeled_pool_size=6))
    bench = {k: list(v) if isinstance(v, tuple) else v for k, v in bench.items()}
    (root / "bench.yaml").write_text(yaml.safe_dump({"bench": bench}))
    (root / "train.yaml").write_text(yaml.safe_dump({"train": tiny_train(epochs_stage1=1, epochs_stage2=1).to_dict()}))
    assert main(["gen-data", "--config", str(root / "bench.yaml"), "--out", str(root / "data")]) == 0
    return root


def test_parse_bins():
    assert parse_bins("0,10,20").tolist() == [0, 10, 20]
    edges = parse_bins("step:20")
    assert edges[0] == 0 and np.all(np.diff(edges) == 20)


def test_dataset_layout(workdir):
    data = workdir / "data"
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest
    clip = next((data / "train").iterdir())
    assert {p.name for p in clip.iterdir()} == {"frames.npy", "audio.raw", "meta.json"}


def test_audit(workdir, capsys):
    assert main(["audit", "--data", str(workdir / "data"), "--out", str(workdir / "audit")]) == 0
    assert "dark" in capsys.readouterr().out
    rows = (workdir / "audit" / "audit.csv").read_text().splitlines()
    assert rows[0] == "clip_id,clip_Y,split" and len(rows) > 1


def test_train_eval_plot(workdir):
    args = ["--config", str(workdir / "train.yaml"), "--data", str(workdir / "data"), "--out", str(workdir / "run")]
    assert main(["train", "--stage", "1", *args]) == 0
    assert main(["train", "--stage", "2", *args]) == 0
    run = workdir / "run"
    for name in ("stage1.pt", "stage2.pt", "stage1_log.csv", "stage2_log.csv", "pseudo_labels.npz",
                 "pseudo_labels.json"):
        assert (run / name).exists(), name
    assert (run / "stage1_log.csv").read_text().startswith("stage,epoch,total,ce,pseudo,mix,lr,steps")
    ck = load_checkpoint(run / "stage2.pt")
    assert ck.stage == "stage2"

    rep = workdir / "report"
    assert main(["eval", "--ckpt", str(run / "stage2.pt"), "--data", str(workdir / "data"), "--bins", "0,20,40,80,256",
                 "--out", str(rep), "--profile-channels", "8"]) == 0
    report = json.loads((rep / "report.json").read_text())
    assert report["fingerprints"]["model"] == ck.fingerprint
    assert set(report["extra"]["visual_only"]) == {"day", "dark", "gap"}
    (rep / "curve.png").unlink()
    assert main(["plot", "--report", str(rep)]) == 0
    assert (rep / "curve.png").exists()


def test_resume_via_cli(workdir):
    args = ["--config", str(workdir / "train.yaml"), "--data", str(workdir / "data")]
    assert main(["train", "--stage", "e2e", *args, "--out", str(workdir / "e2e"), "--epochs", "1"]) == 0
    assert main(["train", "--stage", "e2e", *args, "--out", str(workdir / "e2e"), "--epochs", "2",
                 "--resume", str(workdir / "e2e" / "e2e.pt")]) == 0
    assert load_checkpoint(workdir / "e2e" / "e2e.pt").epoch == 2


def test_ablate(workdir):
    out = workdir / "ablate"
    assert main(["ablate", "--config", str(workdir / "train.yaml"), "--data", str(workdir / "data"),
                 "--out", str(out), "--K", "1,3", "--lam", "0,0.01"]) == 0
    assert len((out / "ablation.csv").read_text().strip().splitlines()) >= 1 + 4


def test_errors_return_2(workdir, capsys):
    assert main(["eval", "--ckpt", str(workdir / "missing.pt"), "--data", str(workdir / "data"),
                 "--out", str(workdir / "x")]) == 2
    assert "error" in capsys.readouterr().err


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "darkadapt", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("audit", "gen-data", "train", "eval", "plot"):
        assert cmd in out.stdout
