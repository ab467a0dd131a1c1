import json
from pathlib import Path

import jsonschema
import pytest

from contlearn.cli import compare_rows, format_table, main
from contlearn.config import apply_overrides, config_from_dict, config_schema, config_to_dict, load_config
from contlearn.errors import ConfigError
from contlearn.metrics import ScoreMatrix

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

MINIMAL = {
    "method": "vanilla",
    "stream": {"num_tasks": 3, "num_families": 2, "input_dim": 6, "num_labels": 3,
               "n_train": 40, "n_dev": 20, "n_test": 40},
    "model": {"hidden_dims": [8]},
    "optim": {"max_epochs": 3, "patience": 2},
    "seeds": [42],
}


@pytest.fixture
def cfg_path(tmp_path):
    def write(data=MINIMAL, name="cfg.json"):
        p = tmp_path / name
        p.write_text(json.dumps(data))
        return p
    return write


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


# ---- config ----

@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.json")), ids=lambda p: p.name)
def test_shipped_configs_validate(path):
    data = json.loads(path.read_text())
    jsonschema.validate(data, config_schema())
    load_config(path)


def test_config_roundtrip():
    cfg = config_from_dict(MINIMAL)
    again = config_from_dict(config_to_dict(cfg))
    assert again == cfg
    jsonschema.validate(config_to_dict(cfg), config_schema())


def test_method_alias_sets_strategy():
    assert config_from_dict({**MINIMAL, "method": "agem"}).strategy.kind == "agem"
    explicit = config_from_dict({**MINIMAL, "method": "agem", "strategy": {"kind": "ewc"}})
    assert explicit.strategy.kind == "ewc"


@pytest.mark.parametrize("patch", [
    {"strategy": {"gamma": 1.5}},
    {"strategy": {"kind": "gem"}},
    {"method": "mixed"},
    {"unknown_key": 1},
    {"stream": {"num_tasks": "ten"}},
    {"seeds": []},
    {"warm_start_k": 3},
])
def test_config_errors(patch):
    with pytest.raises(ConfigError):
        config_from_dict({**MINIMAL, **patch})


def test_overrides():
    data = apply_overrides(MINIMAL, ["strategy.kind=ewc", "optim.lr=0.05", "seeds=[1,2]",
                                     "stream.head_kind=token_labeling", "stream.num_labels=5"])
    cfg = config_from_dict(data)
    assert cfg.strategy.kind == "ewc" and cfg.optim.lr == 0.05 and cfg.seeds == (1, 2)
    assert cfg.stream.head_kind == "token_labeling"
    assert MINIMAL["seeds"] == [42]
    with pytest.raises(ConfigError):
        apply_overrides(MINIMAL, ["strategy.bogus=1"])
    with pytest.raises(ConfigError):
        apply_overrides(MINIMAL, ["novalue"])


def test_data_source_replaces_stream():
    cfg = config_from_dict({"data": {"path": "x.jsonl"}, "seeds": [1]})
    assert cfg.stream is None and cfg.data.path == "x.jsonl"


# ---- cli run ----

def test_run_minimal(tmp_path, cfg_path, capsys):
    out_dir = tmp_path / "out"
    code, out, _ = run(["run", "--config", cfg_path(), "--out", out_dir], capsys)
    assert code == 0
    assert (out_dir / "result.json").exists() and (out_dir / "R_seed42.csv").exists()
    summary = json.loads(out)
    assert summary["method"] == "vanilla" and "cbt" in summary


def test_run_override_kind(tmp_path, cfg_path, capsys):
    out_dir = tmp_path / "out"
    code, _, _ = run(["run", "--config", cfg_path(), "--set", "strategy.kind=ewc", "--out", out_dir], capsys)
    assert code == 0
    meta = json.loads((out_dir / "result.json").read_text())["metadata"]
    assert meta["strategy_kind"] == "ewc" and meta["config"]["strategy"]["kind"] == "ewc"


def test_run_default_out_dir(tmp_path, cfg_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    code, _, _ = run(["run", "--config", cfg_path()], capsys)
    assert code == 0 and (tmp_path / "results" / "vanilla" / "result.json").exists()


def test_run_gamma_out_of_range(cfg_path, capsys):
    bad = {**MINIMAL, "strategy": {"gamma": 1.5}}
    code, _, err = run(["run", "--config", cfg_path(bad)], capsys)
    assert code == 2 and "gamma" in err


def test_run_missing_config(tmp_path, capsys):
    code, _, err = run(["run", "--config", tmp_path / "none.json"], capsys)
    assert code == 2 and "cannot read" in err


def test_run_invalid_json(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text("{oops")
    assert run(["run", "--config", p], capsys)[0] == 2


def test_run_missing_dataset(tmp_path, cfg_path, capsys):
    cfg = {"data": {"path": str(tmp_path / "missing.jsonl")}, "seeds": [1]}
    assert run(["run", "--config", cfg_path(cfg), "--out", tmp_path / "o"], capsys)[0] == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_run_numeric_abort(tmp_path, cfg_path, capsys):
    # relu does not saturate, so a huge step overflows
    cfg = {**MINIMAL, "model": {"hidden_dims": [8], "activation": "relu"}, "optim": {"lr": 1e300, "max_epochs": 2}}
    code, _, err = run(["run", "--config", cfg_path(cfg), "--out", tmp_path / "o"], capsys)
    assert code == 4 and "NumericError" in err and "seed 42" in err


def test_generate_data_roundtrip(tmp_path, cfg_path, capsys):
    data = tmp_path / "stream.jsonl"
    code, out, _ = run(["generate-data", "--config", cfg_path(), "--out", data], capsys)
    assert code == 0 and Path(json.loads(out)["label_vocab"]).exists()
    from_file = {"data": {"path": str(data), "label_vocab": str(data) + ".labels"},
                 "model": MINIMAL["model"], "optim": MINIMAL["optim"], "seeds": [42]}
    for name, cfg in (("synthetic", MINIMAL), ("file", from_file)):
        assert run(["run", "--config", cfg_path(cfg, f"{name}.json"), "--out", tmp_path / name], capsys)[0] == 0
    a = json.loads((tmp_path / "synthetic" / "result.json").read_text())
    b = json.loads((tmp_path / "file" / "result.json").read_text())
    assert a["per_seed"][0]["R"] == b["per_seed"][0]["R"]


def test_generate_data_needs_stream(tmp_path, cfg_path, capsys):
    cfg = cfg_path({"data": {"path": "x.jsonl"}, "seeds": [1]})
    assert run(["generate-data", "--config", cfg, "--out", tmp_path / "o.jsonl"], capsys)[0] == 2


# ---- metrics ----

def _csv(tmp_path, rows, name="R.csv"):
    R = ScoreMatrix([f"t{i}" for i in range(len(rows))])
    for i, r in enumerate(rows):
        R.set_row(i, r)
    p = tmp_path / name
    p.write_text(R.to_csv())
    return p


def test_metrics_worked_examples(tmp_path, capsys):
    code, out, _ = run(["metrics", "--r", _csv(tmp_path, [[0, 80], [0, 0]])], capsys)
    assert code == 0 and json.loads(out)["cft"] == 80
    _, out, _ = run(["metrics", "--r", _csv(tmp_path, [[0, 60, 80], [0, 0, 90], [0, 0, 0]])], capsys)
    assert json.loads(out)["cft"] == 80
    _, out, _ = run(["metrics", "--r", _csv(tmp_path, [[90, 0, 0], [0, 85, 0], [70, 80, 0]])], capsys)
    assert json.loads(out) == {"T": 3, "cft": 0.0, "cbt": -12.5}
    _, out, _ = run(["metrics", "--r", _csv(tmp_path, [[90, 0, 0], [75, 85, 0], [70, 80, 0]]),
                     "--cbt-row", "T_minus_1"], capsys)
    assert json.loads(out)["cbt"] == -7.5


def test_metrics_errors(tmp_path, capsys):
    assert run(["metrics", "--r", tmp_path / "none.csv"], capsys)[0] == 3
    bad = tmp_path / "bad.csv"
    bad.write_text("stage,a,b\n1,x,y\n")
    assert run(["metrics", "--r", bad], capsys)[0] == 3
    partial = tmp_path / "partial.csv"
    partial.write_text("stage,a,b\n1,1.0,2.0\n2,,\n")
    code, _, err = run(["metrics", "--r", partial], capsys)
    assert code == 1 and "StateError" in err


def test_run_then_metrics_roundtrip(tmp_path, cfg_path, capsys):
    out_dir = tmp_path / "out"
    run(["run", "--config", cfg_path(), "--out", out_dir], capsys)
    stored = json.loads((out_dir / "result.json").read_text())["per_seed"][0]["report"]
    _, out, _ = run(["metrics", "--r", out_dir / "R_seed42.csv"], capsys)
    got = json.loads(out)
    assert abs(got["cft"] - stored["cft"]) < 1e-9 and abs(got["cbt"] - stored["cbt"]) < 1e-9


# ---- compare ----

def _result(tmp_path, name, cft, cbt):
    p = tmp_path / f"{name}.json"
    summary = {"cft": None if cft is None else {"mean": cft, "std": 0.0},
               "cbt": None if cbt is None else {"mean": cbt, "std": 0.0}}
    p.write_text(json.dumps({"method": name, "summary": summary}))
    return p


def test_compare_table(tmp_path, capsys):
    paths = [_result(tmp_path, "vanilla", 40.0, -20.0), _result(tmp_path, "replay", 38.5, -8.25),
             _result(tmp_path, "multi", None, None)]
    code, out, _ = run(["compare", *paths], capsys)
    lines = out.splitlines()
    assert code == 0 and lines[0].split() == ["method", "CFT", "CBT"]
    assert [line.split()[0] for line in lines[1:]] == ["vanilla", "replay", "multi"]
    assert lines[1].split()[1:] == ["40.00*", "-20.00"]
    assert lines[2].split()[1:] == ["38.50", "-8.25*"]
    assert lines[3].split()[1:] == ["-", "-"]


def test_compare_single_and_identical(tmp_path, capsys):
    p = _result(tmp_path, "agem", 1.0, -2.0)
    _, out, _ = run(["compare", p], capsys)
    assert len(out.splitlines()) == 2
    _, out, _ = run(["compare", p, p, "--csv"], capsys)
    lines = out.splitlines()
    assert lines == ["method,CFT,CBT", "agem,1.00*,-2.00*", "agem,1.00*,-2.00*"]


def test_compare_bad_input(tmp_path, capsys):
    bad = tmp_path / "x.json"
    bad.write_text("[]")
    assert run(["compare", bad], capsys)[0] == 3
    assert run(["compare", tmp_path / "missing.json"], capsys)[0] == 3


def test_compare_helpers(tmp_path):
    rows = compare_rows([_result(tmp_path, "a", 1.0, None)])
    assert rows == [{"method": "a", "cft": 1.0, "cbt": None}]
    assert format_table(rows).splitlines()[1].split() == ["a", "1.00*", "-"]


def test_help_documents_exit_codes(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--help"])
    assert e.value.code == 0
    out = capsys.readouterr().out
    for code in ("0", "2", "3", "4"):
        assert f"  {code}  " in out
