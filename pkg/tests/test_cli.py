import json
from importlib import resources

import pytest

from dualprobe import cli
from dualprobe.dualset import NATIVE_LANGUAGE, read_dataset


@pytest.fixture
def workdir(tmp_path):
    src = resources.files("dualprobe") / "fixtures"
    dst = tmp_path / "cfg"
    dst.mkdir()
    for name in ["run.json", "templates.jsonl", "answers.jsonl", "adaptation.json", "responses.jsonl"]:
        (dst / name).write_bytes((src / name).read_bytes())
    return dst


def edit_config(workdir, fn):
    path = workdir / "run.json"
    doc = json.loads(path.read_text())
    fn(doc)
    path.write_text(json.dumps(doc))
    return str(path)


def run(workdir, *cmd):
    return cli.main(["--config", str(workdir / "run.json"), *cmd])


def test_full_pipeline(workdir):
    assert run(workdir, "all") == 0
    out = workdir / "out"
    for rel in [
        "dataset/dataset.jsonl", "dataset/pairs.jsonl", "traces/manifest.tsv", "traces/model.nwts",
        "neurons/index.json", "proportions/proportions.json", "eval/quadrant.json", "eval/gaps.json",
        "ablation/ablation.csv", "report/report.json", "report/neurons_vs_score.csv",
    ]:
        assert (out / rel).exists(), rel
    summary = json.loads((out / "dataset" / "summary.json").read_text())
    assert summary["records"] == summary["expected_total"] == 60


def test_steps_one_by_one(workdir):
    for name in cli.COMMANDS:
        assert run(workdir, name) == 0, name


def test_fault_injected_translator_is_partial(workdir):
    def fn(doc):
        doc["dataset"]["translator"] = {"kind": "mock", "fail_texts": ["sports team"]}
    edit_config(workdir, fn)
    assert run(workdir, "build-dataset") == 2
    out = workdir / "out" / "dataset"
    quarantined = [json.loads(l) for l in (out / "quarantine.jsonl").read_text().splitlines()]
    summary = json.loads((out / "summary.json").read_text())
    assert quarantined
    assert summary["records"] + summary["quarantined"] == summary["expected_total"]


def test_missing_template_file(workdir, capsys):
    (workdir / "templates.jsonl").unlink()
    assert run(workdir, "build-dataset") == 1
    assert "config error" in capsys.readouterr().err


def test_missing_config_and_bad_json(workdir, tmp_path):
    assert cli.main(["--config", str(tmp_path / "nope.json"), "eval"]) == 1
    (workdir / "run.json").write_text("{not json")
    assert run(workdir, "eval") == 1


def test_bad_threshold_is_config_error(workdir):
    edit_config(workdir, lambda d: d["probe"].update(threshold="median:3"))
    assert run(workdir, "build-dataset") == 0
    assert run(workdir, "gen-traces") == 0
    assert run(workdir, "extract-neurons") == 1


def test_step_without_prerequisites_is_data_error(workdir):
    assert run(workdir, "gen-traces") == 3
    assert run(workdir, "report") == 3


def test_corrupted_trace_is_data_error(workdir):
    assert run(workdir, "build-dataset") == 0
    assert run(workdir, "gen-traces") == 0
    victim = sorted((workdir / "out" / "traces" / "files").iterdir())[0]
    data = bytearray(victim.read_bytes())
    data[-1] ^= 0xFF
    victim.write_bytes(bytes(data))
    assert run(workdir, "extract-neurons") == 3


def test_out_flag_overrides_config(workdir, tmp_path):
    other = tmp_path / "elsewhere"
    assert cli.main(["--config", str(workdir / "run.json"), "--out", str(other), "build-dataset"]) == 0
    assert (other / "dataset" / "dataset.jsonl").exists()
    assert not (workdir / "out").exists() or not any((workdir / "out").iterdir())


def test_seed_flag_changes_random_model(workdir, tmp_path):
    def fn(doc):
        del doc["model"]["planted"]
    edit_config(workdir, fn)
    a, b = tmp_path / "a", tmp_path / "b"
    for out, seed in [(a, "1"), (b, "2")]:
        assert cli.main(["--config", str(workdir / "run.json"), "--seed", seed, "--out", str(out), "build-dataset"]) == 0
        assert cli.main(["--config", str(workdir / "run.json"), "--seed", seed, "--out", str(out), "gen-traces"]) == 0
    assert (a / "traces" / "model.nwts").read_bytes() != (b / "traces" / "model.nwts").read_bytes()


def test_benchmark_build_via_cli(tmp_path):
    n = 500
    with open(tmp_path / "templates.jsonl", "w") as fh:
        for i in range(n):
            fh.write(json.dumps({"template_id": f"t{i:04d}", "text": f"Q{i}: what do people in «REGION» eat?"}) + "\n")
    with open(tmp_path / "answers.jsonl", "w") as fh:
        for i in range(n):
            for c in NATIVE_LANGUAGE:
                fh.write(json.dumps({"template_id": f"t{i:04d}", "culture": c, "answers": [f"a{i}{c}"]}) + "\n")
    (tmp_path / "adaptation.json").write_text(json.dumps({
        "entries": [{"culture": c, "language": l, "display_name": c} for c, l in NATIVE_LANGUAGE.items()]
    }))
    (tmp_path / "run.json").write_text(json.dumps({
        "seed": 1,
        "dataset": {"templates": "templates.jsonl", "answers": "answers.jsonl", "adaptation": "adaptation.json", "benchmark_samples": 500},
    }))
    assert cli.main(["--config", str(tmp_path / "run.json"), "build-dataset"]) == 0
    records = read_dataset(tmp_path / "out" / "dataset" / "dataset.jsonl")
    assert len(records) == 9500


def test_jobs_flag_gives_same_dataset(workdir, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["--config", str(workdir / "run.json"), "--out", str(a), "build-dataset"]) == 0
    assert cli.main(["--config", str(workdir / "run.json"), "--out", str(b), "--jobs", "4", "build-dataset"]) == 0
    assert (a / "dataset" / "dataset.jsonl").read_bytes() == (b / "dataset" / "dataset.jsonl").read_bytes()


def test_translator_credentials_never_on_command_line():
    flags = {a.dest for a in cli.build_parser()._actions}
    assert not any("token" in f or "key" in f for f in flags)
