import json

import numpy as np
import pytest

from gesturegen import cli
from gesturegen import motion_io as mio

TINY = ["--set", "hidden=8", "--set", "epochs=2", "--set", "dae_epochs=2", "--set", "C=5",
        "--set", "bottleneck=4", "--set", "batch_size=32", "--set", "chunk_len=20"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("fixture")
    assert cli.main(["gen-fixture", "--out", str(out), "--joints", "8", "--seconds", "4",
                     "--train-clips", "2", "--val-clips", "1", "--test-clips", "1"]) == 0
    return out / "manifest.json"


def train(run, manifest, *extra):
    return cli.main(["train", "--manifest", str(manifest), "--out", str(run), *TINY, *extra])


def test_parse_overrides():
    assert cli.parse_overrides(["epochs=3", "feature_kind=mfcc", "dropout=0.25", "predict_velocity=false"]) == {
        "epochs": 3, "feature_kind": "mfcc", "dropout": 0.25, "predict_velocity": False}
    with pytest.raises(cli.ConfigError):
        cli.parse_overrides(["epochs"])


def test_resolve_config_precedence(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"epochs": 5, "hidden": 12, "preset": "full-japanese"}))
    cfg = cli.resolve_config(path, {"hidden": 20}, seed=9)
    assert (cfg.model.epochs, cfg.model.hidden, cfg.model.seed) == (5, 20, 9)
    assert cfg.model.batch_size == 2056
    with pytest.raises(cli.ConfigError, match="bogus"):
        cli.resolve_config(overrides={"bogus": 1})
    with pytest.raises(cli.ConfigError):
        cli.resolve_config(overrides={"window": 4})
    with pytest.raises(cli.ConfigError):
        cli.resolve_config(overrides={"preset": "laptop"})


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_exit_codes(tmp_path, corpus):
    assert cli.main(["train", "--out", str(tmp_path / "r"), "--set", "hidden=-1",
                     "--manifest", str(corpus)]) == cli.EXIT_CONFIG
    # config is rejected before the run directory is created
    assert not (tmp_path / "r").exists()
    assert cli.main(["train", "--out", str(tmp_path / "r")]) == cli.EXIT_CONFIG
    assert cli.main(["no-such-command"]) == cli.EXIT_CONFIG
    assert cli.main(["train", "--manifest", str(tmp_path / "none.json"), "--out", str(tmp_path / "r")]) == cli.EXIT_DATA
    assert train(tmp_path / "short", corpus, "--model", "aud2motion", "--set", "chunk_len=1000") == cli.EXIT_DATA
    assert cli.main(["generate", "--run", str(tmp_path / "missing"), "--split", "val",
                     "--out", str(tmp_path / "g")]) == cli.EXIT_DATA
    assert train(tmp_path / "nan", corpus, "--model", "aud2pose", "--set", "lr=1e30") == cli.EXIT_NUMERIC


def test_extract_and_postprocess(tmp_path, corpus):
    wav = next(corpus.parent.rglob("*.wav"))
    assert cli.main(["extract-features", "--audio", str(wav), "--features", "mfcc+pros",
                     "--out", str(tmp_path / "f.csv")]) == 0
    rows = (tmp_path / "f.csv").read_text().splitlines()
    assert len(rows) > 1
    bvh = next(corpus.parent.rglob("*.bvh"))
    assert cli.main(["postprocess", "--input", str(bvh), "--out", str(tmp_path / "s.csv"), "--window", "5",
                     "--one-euro", "--hip-center", "--hip-joint", "0"]) == 0
    m = mio.read_motion_csv(tmp_path / "s.csv")
    assert not m.joints3()[:, 0].any()
    assert cli.main(["postprocess", "--input", str(bvh), "--out", str(tmp_path / "x.csv"), "--window", "4"]) == 1
    assert cli.main(["postprocess", "--input", str(bvh), "--out", str(tmp_path / "x.csv"), "--hip-center",
                     "--hip-joint", "nope"]) == 1


def test_self_evaluation_is_zero(tmp_path, corpus):
    bvh = str(next(corpus.parent.rglob("*.bvh")))
    out = tmp_path / "e.json"
    assert cli.main(["evaluate", "--truth", bvh, "--pred", bvh, "--out", str(out)]) == 0
    row = json.loads(out.read_text())["sequences"]["pred"]
    assert row["ape"] == 0.0
    assert all(v == 0.0 for v in row["hellinger"].values())


@pytest.mark.parametrize("kind", ["aud2pose", "aud2motion", "aud2repr2pose"])
def test_pipeline_is_byte_deterministic(tmp_path, corpus, kind):
    outputs = []
    for rep in ("a", "b"):
        run = tmp_path / rep
        assert train(run, corpus, "--model", kind, "--set", "window=5") == 0
        assert cli.main(["generate", "--run", str(run), "--split", "test", "--out", str(run / "gen")]) == 0
        assert cli.main(["evaluate", "--run", str(run), "--split", "val", "--out", str(run / "eval.json")]) == 0
        files = sorted(p for p in run.rglob("*") if p.is_file())
        outputs.append({p.relative_to(run): p.read_bytes() for p in files})
    assert outputs[0] == outputs[1]
    report = json.loads(outputs[0][next(k for k in outputs[0] if k.name == "eval.json")])
    assert report["config"]["model_kind"] == kind and report["config"]["window"] == 5
    assert {"ape", "jerk"} <= set(report["summary"]) and "ape" in report["static_mean_pose"]
    run_doc = json.loads((tmp_path / "a" / "run.json").read_text())
    assert set(run_doc["checkpoints"].values()) <= {p.name for p in (tmp_path / "a").iterdir()}
    csv = next((tmp_path / "a" / "gen").glob("*.csv"))
    assert np.all(np.isfinite(mio.read_motion_csv(csv).positions))


def test_generate_from_audio(tmp_path, corpus):
    run = tmp_path / "run"
    assert train(run, corpus, "--model", "aud2pose") == 0
    wav = next(corpus.parent.rglob("*.wav"))
    assert cli.main(["generate", "--run", str(run), "--audio", str(wav), "--out", str(tmp_path / "g.csv")]) == 0
    assert mio.read_motion_csv(tmp_path / "g.csv").n_frames > 0


def test_sweep_rows(tmp_path, corpus):
    out = tmp_path / "sweep.json"
    assert cli.main(["sweep", "--manifest", str(corpus), "--dims", "8,16,32", "--out", str(out), *TINY]) == 0
    rows = json.loads(out.read_text())["rows"]
    assert [r["d"] for r in rows] == [8, 16, 32]
    assert all({"ape", "jerk", "dae_val_mse"} <= set(r) for r in rows)
    assert cli.main(["sweep", "--manifest", str(corpus), "--dims", "8,x", "--out", str(out)]) == 1
