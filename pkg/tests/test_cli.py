import json

import pytest

from oshp.cli import main
from oshp.evaluation import EvalReport

TINY_TOML = """
[train]
max_epoch = 2
warmup_epochs = 1
initial_lr = 0.01
alpha = 0.1
episodes_per_epoch = 4
[encoder]
input_size = [32, 32]
feature_dim = 8
width = 4
skip_dim = 4
cgs_dim = 8
fgs_dim = 8
"""


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-synthetic", "--out", str(root / "raw"), "--image-size", "32", "--seed", "3",
                 "--meta-train-support", "4", "--meta-train-query", "4", "--meta-test-support", "4",
                 "--meta-test-query", "4", "--novel", "hat,skirt"]) == 0
    fold = root / "raw" / "fold.json"
    for phase in ("meta_train", "meta_test"):
        assert main(["tailor", "--manifest", str(root / "raw" / "manifest.jsonl"), "--fold", str(fold),
                     "--phase", phase, "--out", str(root / phase)]) == 0
    assert main(["make-testlist", "--manifest", str(root / "meta_test" / "manifest.jsonl"), "--fold", str(fold),
                 "--min-evals", "2", "--out", str(root / "tl.jsonl")]) == 0
    (root / "c.toml").write_text(TINY_TOML)
    return root


def eval_args(root, *extra):
    return ["eval", "--manifest", str(root / "meta_test" / "manifest.jsonl"), "--fold", str(root / "raw" / "fold.json"),
            "--test-list", str(root / "tl.jsonl"), *extra]


def test_oracle_eval_is_perfect(bench, capsys):
    assert main(eval_args(bench, "--oracle", "--out", str(bench / "oracle" / "report.json"))) == 0
    rep = EvalReport.load(bench / "oracle" / "report.json")
    for protocol in ("k_way", "one_way"):
        res = rep.folds["fold1"][protocol]
        assert res["novel_miou"] == res["human_miou"] == 100.0
    assert "100.0" in capsys.readouterr().out


def test_train_twice_gives_the_same_checkpoint(bench, capsys):
    digests = []
    for name in ("a", "b"):
        assert main(["train", "--manifest", str(bench / "meta_train" / "manifest.jsonl"), "--config",
                     str(bench / "c.toml"), "--seed", "7", "--out", str(bench / name)]) == 0
        digests.append(capsys.readouterr().out.split("sha256")[-1].strip())
    assert digests[0] == digests[1]
    run = json.loads((bench / "a" / "run.json").read_text())
    assert run["seed"] == 7 and run["config"]["max_epoch"] == 2
    assert main(eval_args(bench, "--checkpoint", str(bench / "a" / "checkpoint.pt"), "--protocol", "k_way",
                          "--out", str(bench / "a" / "report.json"))) == 0


def test_report_averages_folds(tmp_path, capsys):
    paths = []
    for i, (n, h) in enumerate([(10.0, 30.0), (20.0, 50.0), (60.0, 70.0)]):
        rep = EvalReport()
        rep.add(f"fold{i}", "k_way", {"novel_miou": n, "human_miou": h, "accuracy": 90.0})
        rep.save(tmp_path / f"r{i}.json")
        paths.append(str(tmp_path / f"r{i}.json"))
    assert main(["report", *paths, "--out", str(tmp_path / "all.json")]) == 0
    out = capsys.readouterr().out
    novel_row = next(line for line in out.splitlines() if "C_novel" in line)
    assert novel_row.split()[-1] == "30.0"
    assert EvalReport.load(tmp_path / "all.json").average("k_way", "human_miou") == 50.0


def test_output_root_prefixes_relative_paths(bench, tmp_path, monkeypatch):
    monkeypatch.setenv("OSHP_OUTPUT_ROOT", str(tmp_path))
    assert main(eval_args(bench, "--oracle", "--protocol", "k_way", "--out", "rel/report.json")) == 0
    assert (tmp_path / "rel" / "report.json").exists()


@pytest.mark.parametrize("argv", [
    ["train", "--bogus"],
    ["frobnicate"],
    ["make-testlist", "--manifest", "x"],
])
def test_bad_usage_exits_nonzero(argv, capsys):
    assert main(argv) != 0
    assert "usage" in capsys.readouterr().err


def test_invalid_config_exits_nonzero(bench, capsys):
    code = main(["train", "--manifest", str(bench / "meta_train" / "manifest.jsonl"), "--set", "alpha=2",
                 "--out", str(bench / "bad")])
    assert code == 2
    err = capsys.readouterr().err
    assert "usage" in err and "alpha" in err
