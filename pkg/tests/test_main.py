import json

from src.data.datasets import limit_dataset, load_dataset
from src.main import build_parser, main
from src.managers.pipeline_manager import DOWNSTREAM_LIMIT_KEY
from src.utils.artifacts import read_json

GLOBAL = ["--image-shape", "8", "8", "3", "--log-level", "WARNING"]


def _run(data_root, *argv):
    return main(["--data-root", str(data_root), *GLOBAL, *argv])


def test_parser_reads_defense_and_lambda():
    args = build_parser().parse_args(["steal", "--target", "t.ckpt", "--lambda", "0", "--defense", "round:m=1", "--out", "s.ckpt"])
    assert args.lam == 0.0
    assert args.defense == "round:m=1"
    assert args.variant == "stolen_encoder"


def test_pretrain_steal_eval_report(tmp_path, data_root, capsys):
    target = tmp_path / "target.ckpt"
    stolen = tmp_path / "stolen.ckpt"
    assert _run(
        data_root, "pretrain", "--dataset", "CIFAR10", "--feature-dim", "8",
        "--epochs", "1", "--batch", "8", "--out", str(target),
    ) == 0
    assert target.is_file()
    assert (tmp_path / "target.losses.csv").is_file()

    assert _run(
        data_root, "steal", "--target", str(target), "--surrogate", "STL10", "--surrogate-size", "12",
        "--epochs", "1", "--batch", "4", "--stolen-arch", "small-conv", "--out", str(stolen),
    ) == 0
    assert read_json(tmp_path / "stolen.ledger.json")["queries"] == 12
    capsys.readouterr()

    out = tmp_path / "eval.json"
    assert _run(
        data_root, "eval", "--encoder", str(stolen), "--target", str(target), "--downstream", "GTSRB",
        "--hidden", "8", "--epochs", "1", "--batch", "8", "--label", "cli", "--out", str(out),
    ) == 0
    saved = read_json(out)
    assert saved["label"] == "cli"
    task = saved["tasks"][0]
    assert task["task"] == "GTSRB"
    assert task["queries_downstream"] == 24 + 12
    assert task["ta"] is not None and task["sa"] is not None
    capsys.readouterr()

    assert _run(data_root, "report", "--compare", str(out), "--out", str(tmp_path / "compare.csv")) == 0
    assert "GTSRB" in capsys.readouterr().out
    assert (tmp_path / "compare.csv").is_file()

    assert _run(data_root, "report", str(out)) == 0
    assert json.loads(capsys.readouterr().out)["label"] == "cli"


def test_steal_without_an_api_is_refused(tmp_path, data_root):
    assert _run(data_root, "steal", "--out", str(tmp_path / "s.ckpt")) == 2


def test_workbench_errors_exit_with_one(tmp_path, data_root):
    assert _run(
        data_root, "pretrain", "--dataset", "SVHN", "--out", str(tmp_path / "t.ckpt"),
    ) == 1


def test_eval_limits_match_manifest_runs(tmp_path, data_root, monkeypatch):
    target = tmp_path / "target.ckpt"
    assert _run(
        data_root, "pretrain", "--dataset", "CIFAR10", "--feature-dim", "8",
        "--epochs", "0", "--batch", "8", "--out", str(target),
    ) == 0

    chosen = []

    def recording_limit(image_set, limit, seed, key="limit"):
        subset = limit_dataset(image_set, limit, seed, key)
        chosen.append((image_set.split, subset.provenance.get("indices")))
        return subset

    monkeypatch.setattr("src.main.limit_dataset", recording_limit)
    out = tmp_path / "eval.json"
    assert _run(
        data_root, "eval", "--target", str(target), "--downstream", "GTSRB", "--hidden", "8",
        "--epochs", "1", "--batch", "8", "--train-limit", "6", "--test-limit", "4", "--out", str(out),
    ) == 0
    assert read_json(out)["tasks"][0]["queries_downstream"] == 10

    for split, limit in (("train", 6), ("test", 4)):
        full = load_dataset("GTSRB", split, data_root, (8, 8, 3))
        expected = limit_dataset(full, limit, 0, DOWNSTREAM_LIMIT_KEY).provenance["indices"]
        assert (split, expected) in chosen
