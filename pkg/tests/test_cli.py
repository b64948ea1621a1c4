import json

import pytest

from omnilv.cli import main
from omnilv.io import load_olvt, save_olvt, sha256_hex

CONFIG = {
    "model": {"image_size": 16, "patch_size": 4, "hidden_dim": 16, "num_heads": 2, "num_blocks": 2,
              "max_icl_pairs": 1, "adapter_depth": 1},
    "train": {"steps": 2, "batch_size": 2, "tasks": ["denoise_gaussian"], "train_pool": 4,
              "eval_n_per_task": 1, "eval_steps": 2},
}


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "cfg.json").write_text(json.dumps(CONFIG))
    return tmp_path


@pytest.fixture
def trained(workdir):
    assert main(["train", "--config", "cfg.json", "--out", "run"]) == 0
    assert main(["degrade", "--task", "denoise_gaussian", "--n", "2", "--size", "16", "--out", "corpus"]) == 0
    return workdir


def test_degrade_empty_manifest(workdir):
    assert main(["degrade", "--task", "denoise_gaussian", "--n", "0", "--out", "empty"]) == 0
    doc = json.loads((workdir / "empty" / "manifest.json").read_text())
    assert doc["entries"] == [] and doc["tool_version"] and doc["config_sha256"]
    assert not (workdir / "empty.failed").exists()


def test_degrade_is_reproducible(workdir):
    for out in ("a", "b"):
        assert main(["degrade", "--task", "deblur_gaussian", "--task", "canny", "--n", "2", "--seed", "4",
                     "--out", out]) == 0
    for f in sorted((workdir / "a" / "images").iterdir()):
        assert f.read_bytes() == (workdir / "b" / "images" / f.name).read_bytes()
    assert (workdir / "a" / "manifest.json").read_bytes() == (workdir / "b" / "manifest.json").read_bytes()


def test_train_writes_checkpoint_and_reports(trained):
    run = trained / "run"
    for name in ("provenance.json", "loss.csv", "report.json", "checkpoint/manifest.json"):
        assert (run / name).exists(), name


def test_sample_twice_gives_identical_hash(trained, caplog):
    argv = ["sample", "--checkpoint", "run/checkpoint", "--input", "corpus/images/denoise_gaussian_00000_lq.ppm",
            "--instruction", "remove gaussian noise", "--steps", "3", "--seed", "1"]
    assert main(argv + ["--out", "s1/x"]) == 0
    assert main(argv + ["--out", "s2/x"]) == 0
    a, b = (json.loads((trained / d / "x.json").read_text()) for d in ("s1", "s2"))
    assert a["output_sha256"] == b["output_sha256"]
    assert sha256_hex((trained / "s1" / "x.ppm").read_bytes()) == sha256_hex((trained / "s2" / "x.ppm").read_bytes())
    assert load_olvt(trained / "s1" / "x.olvt").shape == (3, 16, 16)


def test_sample_warns_on_unknown_instruction(trained, caplog):
    argv = ["sample", "--checkpoint", "run/checkpoint", "--input", "corpus/images/denoise_gaussian_00000_lq.olvt",
            "--instruction", "frobnicate quux", "--steps", "1", "--out", "s/x"]
    with caplog.at_level("WARNING"):
        assert main(argv) == 0
    assert "no known words" in caplog.text


def test_eval_identity_predictions_reach_cap(trained):
    manifest = json.loads((trained / "corpus" / "manifest.json").read_text())
    (trained / "preds").mkdir()
    for e in manifest["entries"]:
        save_olvt(trained / "preds" / f"{e['stem']}.olvt", load_olvt(trained / "corpus" / e["hq"]))
    assert main(["eval", "--checkpoint", "run/checkpoint", "--manifest", "corpus/manifest.json",
                 "--predictions", "preds", "--out", "ev.json"]) == 0
    rep = json.loads((trained / "ev.json").read_text())
    assert rep["tasks"]["denoise_gaussian"]["psnr_mean"] == 99.0


def test_eval_samples_when_no_predictions(trained):
    assert main(["eval", "--checkpoint", "run/checkpoint", "--manifest", "corpus/manifest.json",
                 "--out", "ev.json"]) == 0
    rep = json.loads((trained / "ev.json").read_text())
    assert rep["tasks"]["denoise_gaussian"]["n"] == 2


def test_ablate_writes_csv(workdir):
    cfg = dict(CONFIG, train=dict(CONFIG["train"], steps=1, prior_steps=1, batch_size=1))
    (workdir / "abl.json").write_text(json.dumps(cfg))
    assert main(["ablate", "--axis", "fusion", "--config", "abl.json", "--out", "abl"]) == 0
    assert len((workdir / "abl" / "ablation_fusion.csv").read_text().strip().splitlines()) == 3


# -- failures -------------------------------------------------------------------------------------
def test_invalid_flags_exit_nonzero_with_usage(workdir, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code != 0
    assert "usage" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["train", "--config", "cfg.json", "--inject", "middle"])


def test_config_error_exit_code_and_marker(workdir):
    (workdir / "bad.json").write_text(json.dumps({"train": {"stepz": 1}}))
    assert main(["train", "--config", "bad.json", "--out", "r"]) == 2
    assert (workdir / "r.failed").exists()
    assert main(["degrade", "--task", "no_such_task", "--n", "1", "--out", "d"]) == 2
    assert (workdir / "d.failed").exists()
    (workdir / "junk.json").write_text("{not json")
    assert main(["train", "--config", "junk.json", "--out", "j"]) == 2


def test_io_error_exit_code(workdir):
    assert main(["sample", "--checkpoint", "missing", "--input", "x.ppm", "--out", "s/x"]) == 4
    assert (workdir / "s" / "x.failed").exists()


def test_numeric_failure_exit_code(workdir):
    cfg = dict(CONFIG, train=dict(CONFIG["train"], learning_rate=1e300, steps=6))
    (workdir / "nan.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", "nan.json", "--out", "n"]) == 3
    assert (workdir / "n.failed").exists()


def test_success_clears_stale_marker(workdir):
    (workdir / "empty.failed").write_text("old")
    assert main(["degrade", "--task", "denoise_gaussian", "--n", "0", "--out", "empty"]) == 0
    assert not (workdir / "empty.failed").exists()
