"""CLI subcommands end to end, including exit codes."""

import json

import numpy as np
import pytest

from oodnoise import tensorio
from oodnoise.cli import main

from test_harness import tiny_config, tiny_mixture_json


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """gen-data -> inject-noise -> train -> extract, shared by the tests."""
    root = tmp_path_factory.mktemp("cli")
    spec_path = root / "spec.json"
    spec_path.write_text(json.dumps(tiny_mixture_json()))
    data = root / "data"
    assert main(["gen-data", "--spec", str(spec_path), "--out", str(data)]) == 0

    assert main(["inject-noise", "--bundle", str(data / "train"),
                 "--model", "su", "--rate", "0.2", "--seed", "3",
                 "--tag", "su20"]) == 0

    models = root / "models"
    assert main(["train", "--data", str(data), "--out", str(models),
                 "--hidden", "8", "--epochs", "15", "--lr", "0.1",
                 "--batch", "32", "--seed", "0"]) == 0

    traces = root / "traces"
    for split in ("train", "val", "test", "ood_origin", "ood_val"):
        assert main(["extract", "--model", str(models / "last"),
                     "--bundle", str(data / split),
                     "--out", str(traces / split)]) == 0
    return root


def test_gen_data_writes_valid_split(workspace):
    split = tensorio.read_split_set(workspace / "data")
    split.validate()
    assert list(split.ood_sets) == ["origin"]


def test_inject_noise_wrote_tensor(workspace):
    bundle = tensorio.read_bundle(workspace / "data" / "train", validate=False)
    noisy = bundle.tensors["label.noisy.su20"]
    clean = bundle.tensors["label"]
    assert int((noisy != clean).sum()) == round(0.2 * len(clean))
    assert bundle.meta["noise.su20"]["model"] == "su"


def test_extracted_trace_is_consumable(workspace):
    trace = tensorio.read_bundle(workspace / "traces" / "test")
    assert trace.features.shape[1] == 8  # penultimate width
    assert trace.logits.shape[1] == 2


def test_fit_score_evaluate(workspace, capsys):
    state_dir = workspace / "state-knn"
    assert main(["fit", "--detector", "knn",
                 "--train", str(workspace / "traces" / "train"),
                 "--val", str(workspace / "traces" / "val"),
                 "--out", str(state_dir), "--set", "k=10"]) == 0
    scores_path = workspace / "scores.csv"
    assert main(["score", "--state", str(state_dir),
                 "--bundle", str(workspace / "traces" / "test"),
                 "--out", str(scores_path)]) == 0
    lines = scores_path.read_text().strip().splitlines()
    assert lines[0] == "index,score"
    values = [float(line.split(",")[1]) for line in lines[1:]]
    assert len(values) == 100 and all(np.isfinite(values))

    capsys.readouterr()  # drain prints from fit/score
    assert main(["evaluate", "--state", str(state_dir),
                 "--id", str(workspace / "traces" / "test"),
                 "--ood", str(workspace / "traces" / "ood_origin")]) == 0
    triple = json.loads(capsys.readouterr().out)
    assert triple["id_vs_ood"] > 0.9
    assert triple["n_ood"] == 60


def test_fit_with_model_and_label_source(workspace):
    state_dir = workspace / "state-react"
    assert main(["fit", "--detector", "react",
                 "--train", str(workspace / "traces" / "train"),
                 "--val", str(workspace / "traces" / "val"),
                 "--model", str(workspace / "models" / "last"),
                 "--out", str(state_dir)]) == 0
    out = workspace / "react-scores.csv"
    assert main(["score", "--state", str(state_dir),
                 "--bundle", str(workspace / "traces" / "test"),
                 "--model", str(workspace / "models" / "last"),
                 "--out", str(out)]) == 0


def test_benchmark_and_report(tmp_path):
    cfg = tiny_config(detectors=("msp", "knn"))
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg.to_dict()))
    out = tmp_path / "run"
    assert main(["benchmark", "--config", str(cfg_path), "--out", str(out),
                 "--no-figures"]) == 0
    assert (out / "rows.csv").is_file()
    first = (out / "rows.csv").read_bytes()
    assert main(["report", "--run", str(out), "--no-figures"]) == 0
    assert (out / "rows.csv").read_bytes() == first


def test_benchmark_partial_failure_exit_code(tmp_path):
    cfg = tiny_config(detectors=("msp",), with_ood_val=False)
    cfg.detectors.append({"name": "odin", "overrides": {"tune": "require"}})
    cfg_dict = cfg.to_dict()
    cfg_dict["detectors"][1] = {"name": "odin", "overrides": {"tune": "require"}}
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg_dict))
    code = main(["benchmark", "--config", str(cfg_path),
                 "--out", str(tmp_path / "run"), "--no-figures"])
    assert code == 3


def test_config_error_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["benchmark", "--config", str(bad),
                 "--out", str(tmp_path / "x")]) == 2
    empty = tmp_path / "empty.json"
    empty.write_text(json.dumps({"name": "x", "datasets": [], "noise": [],
                                 "archs": [], "seeds": [], "checkpoints": [],
                                 "label_sources": [], "detectors": []}))
    assert main(["benchmark", "--config", str(empty),
                 "--out", str(tmp_path / "y")]) == 2


def test_seed_flag_narrows_axis(tmp_path):
    cfg = tiny_config(detectors=("msp",), seeds=(0, 1, 2))
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg.to_dict()))
    out = tmp_path / "run"
    assert main(["benchmark", "--config", str(cfg_path), "--out", str(out),
                 "--seed", "1", "--no-figures"]) == 0
    rows = (out / "rows.csv").read_text().strip().splitlines()[1:]
    assert rows and all(line.split(",")[3] == "1" for line in rows)
