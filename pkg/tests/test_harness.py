import dataclasses
import json

import numpy as np
import pytest

from contlearn.errors import ConfigError
from contlearn.harness import (
    DataSource,
    ExperimentConfig,
    ModelSection,
    OptimConfig,
    aggregate,
    build_stream,
    run_experiment,
    run_mono,
    run_multi,
    run_sequential,
    run_warm_start,
    write_outputs,
)
from contlearn.strategies import StrategyConfig
from contlearn.tasks import SyntheticStreamConfig, write_stream

STREAM = SyntheticStreamConfig(num_tasks=3, num_families=2, input_dim=6, num_labels=3,
                               n_train=60, n_dev=30, n_test=60, between_families=0.9)
FAST = OptimConfig(lr=0.1, batch_size=16, max_epochs=4, patience=2)


def make(method="sequential", kind="vanilla", seeds=(1, 2), stream=STREAM, **kw):
    strategy = kw.pop("strategy", None) or StrategyConfig(kind=kind, retrieve_num_samples=20)
    return ExperimentConfig(method=method, stream=stream, model=ModelSection((8,)), strategy=strategy,
                            optim=kw.pop("optim", FAST), seeds=seeds, **kw)


def dumps(result):
    return json.dumps(result.to_json(), sort_keys=True)


def per_seed_json(result):
    return {r.seed: json.dumps(r.to_json(), sort_keys=True) for r in result.per_seed}


def test_sequential_fills_every_row():
    res = run_sequential(make())
    for r in res.per_seed:
        assert r.R.filled_rows == 3 and not np.isnan(r.R.scores).any()
        assert r.report.cft is not None and r.report.cbt is not None
        assert sorted(r.order) == ["task00", "task01", "task02"]
    assert [s for s, _, _ in res.aggregate] == [1, 2, 3]


def test_same_config_same_bytes():
    assert dumps(run_experiment(make(kind="agem"))) == dumps(run_experiment(make(kind="agem")))


def test_seed_isolation():
    a = per_seed_json(run_sequential(make(seeds=(1, 2, 3))))
    b = per_seed_json(run_sequential(make(seeds=(3, 1, 2))))
    assert a == b
    c = per_seed_json(run_sequential(make(seeds=(2,))))
    assert c[2] == a[2]


def test_aggregate_examples():
    assert aggregate({1: {1: 5.0, 2: 5.0}, 2: {1: 5.0, 2: 5.0}}) == [(1, 5.0, 0.0), (2, 5.0, 0.0)]
    (stage, mean, std), = aggregate({7: {3: 10.0}, 9: {3: 30.0}})
    assert (stage, mean, std) == (3, 20.0, 10.0)


def test_aggregate_matches_oracle():
    rng = np.random.default_rng(0)
    curves = {int(s): {k: float(rng.uniform(0, 100)) for k in range(1, 6)} for s in rng.permutation(50)[:7]}
    for stage, mean, std in aggregate(curves):
        vals = [curves[s][stage] for s in sorted(curves)]
        m = sum(vals) / len(vals)
        sd = (sum((v - m) ** 2 for v in vals) / len(vals)) ** 0.5
        assert abs(mean - m) < 1e-12 and abs(std - sd) < 1e-12


def test_aggregate_independent_of_seed_listing():
    curves = {3: {1: 0.1}, 1: {1: 0.7}, 2: {1: 0.2}}
    assert aggregate(curves) == aggregate(dict(reversed(list(curves.items()))))


def test_multi_pools_all_tasks():
    res = run_multi(make(method="multi", seeds=(5,)))
    r = res.per_seed[0]
    stream = build_stream(make())
    assert r.stats["train_size"] == sum(len(t.train) for t in stream)
    assert r.R.recorded == [2] and not np.isnan(r.R.scores[2]).any()
    assert r.report.cft is None and r.report.cbt is None
    assert res.to_json()["summary"]["cbt"] is None
    assert dumps(run_multi(make(method="multi", seeds=(5,)))) == dumps(res)


def test_mono_diagonal_only():
    res = run_mono(make(method="mono", seeds=(5,)))
    R = res.per_seed[0].R
    assert not np.isnan(np.diag(R.scores)).any()
    assert np.isnan(R.scores[~np.eye(3, dtype=bool)]).all()
    assert res.per_seed[0].report.average == pytest.approx(np.mean(np.diag(R.scores)))


def test_mono_tasks_are_isolated():
    res = run_mono(make(method="mono", seeds=(5,), ordering_policy="explicit",
                        explicit_order=("task00", "task01", "task02")))
    res2 = run_mono(make(method="mono", seeds=(5,), ordering_policy="explicit",
                         explicit_order=("task02", "task01", "task00")))
    a, b = res.per_seed[0].report.per_task, res2.per_seed[0].report.per_task
    assert a == b


IDENTICAL = dataclasses.replace(STREAM, between_families=0.0, rotation_angle_within_family=0.0,
                                n_test=400)


def test_multi_matches_mono_on_identical_tasks():
    seeds = (1, 2, 3, 4, 5)
    stream = dataclasses.replace(IDENTICAL, n_train=200, n_dev=100)
    # MULTI takes 3x the steps per epoch; both need to converge for a fair comparison
    optim = OptimConfig(max_epochs=60, patience=10)
    multi = run_multi(make(method="multi", seeds=seeds, stream=stream, optim=optim)).final_average()
    mono = run_mono(make(method="mono", seeds=seeds, stream=stream, optim=optim)).final_average()
    assert abs(multi - mono) <= 2.0


def test_vanilla_identical_tasks_no_forgetting():
    two = dataclasses.replace(IDENTICAL, num_tasks=2)
    res = run_sequential(make(seeds=(1, 2, 3, 4, 5), stream=two))
    assert res.mean_metric("cbt") >= -2.0


def test_warm_start_k1_equals_sequential():
    seq = per_seed_json(run_sequential(make()))
    warm = run_warm_start(make(warm_start_k=1))
    assert warm.method == "multi1+vanilla"
    for seed, text in per_seed_json(warm).items():
        data, ref = json.loads(text), json.loads(seq[seed])
        for key in ("order", "R", "curve", "stats"):
            assert data[key] == ref[key]
        # only the method label differs
        data["report"].pop("method"), ref["report"].pop("method")
        assert data["report"] == ref["report"]


def test_warm_start_last_block():
    res = run_warm_start(make(warm_start_k=2))
    for r in res.per_seed:
        assert r.R.recorded == [1, 2]
        assert sorted(r.curve) == [2, 3]
        assert r.report.cbt is None


def test_warm_start_bounds():
    with pytest.raises(ConfigError):
        make(warm_start_k=3)
    with pytest.raises(ConfigError):
        run_warm_start(make(warm_start_k=0))


@pytest.mark.parametrize("variant", [
    StrategyConfig(kind="replay", run_per_step=10**9, retrieve_num_samples=20),
    StrategyConfig(kind="ewc", ewc_lambda=0.0),
    StrategyConfig(kind="agem", store_memory_prob=0.0, retrieve_num_samples=20),
])
def test_degenerate_strategies_match_vanilla(variant):
    ref = run_sequential(make(seeds=(1, 2, 3)))
    out = run_sequential(make(seeds=(1, 2, 3), strategy=variant))
    for a, b in zip(ref.per_seed, out.per_seed):
        assert np.array_equal(a.R.scores, b.R.scores)
        assert a.report.cbt == b.report.cbt and a.report.cft == b.report.cft


def test_lr_adjust_changes_run_and_name():
    cfg = make(strategy=StrategyConfig(use_lr_adjust=True, gamma=0.5))
    res = run_sequential(cfg)
    assert res.method == "vanilla+lr_adjust"
    for r in res.per_seed:
        assert r.stats["final_lr"] == pytest.approx(0.1 * 0.25)


def test_family_grouped_order():
    cfg = make(ordering_policy="family_grouped", stream=dataclasses.replace(STREAM, num_tasks=4))
    res = run_sequential(cfg)
    fam = {"task00": 0, "task01": 1, "task02": 0, "task03": 1}
    for r in res.per_seed:
        f = [fam[t] for t in r.order]
        assert f[0] == f[1] and f[2] == f[3]


def test_run_sequential_rejects_multi():
    with pytest.raises(ConfigError):
        run_sequential(make(method="multi"))


def test_config_validation():
    with pytest.raises(ConfigError):
        make(method="gem")
    with pytest.raises(ConfigError):
        make(seeds=())
    with pytest.raises(ConfigError):
        make(seeds=(1, 1))
    with pytest.raises(ConfigError):
        ExperimentConfig(stream=None)


def test_write_outputs(tmp_path):
    res = run_sequential(make())
    out = write_outputs(res, tmp_path / "out")
    names = sorted(p.name for p in out.iterdir())
    assert names == ["R_seed1.csv", "R_seed2.csv", "curve.csv", "result.json", "timing.json"]
    data = json.loads((out / "result.json").read_text())
    assert data["metadata"]["std"] == "population"
    assert data["summary"]["cbt"]["mean"] == pytest.approx(res.mean_metric("cbt"))
    assert (out / "curve.csv").read_text().splitlines()[0] == "stage,mean,std"
    assert "wall_clock" not in (out / "result.json").read_text()


def test_token_stream_end_to_end():
    stream = dataclasses.replace(STREAM, num_labels=5, head_kind="token_labeling", n_train=40)
    res = run_sequential(make(kind="replay", stream=stream, seeds=(3,)))
    R = res.per_seed[0].R
    assert R.filled_rows == 3 and ((R.scores >= 0) & (R.scores <= 100)).all()


def test_dataset_source(tmp_path):
    from contlearn.tasks import generate_stream
    vocab = write_stream(generate_stream(STREAM), tmp_path / "s.jsonl")
    from_file = ExperimentConfig(stream=None, data=DataSource(str(tmp_path / "s.jsonl"), str(vocab)),
                                 model=ModelSection((8,)), optim=FAST, seeds=(1,))
    a = run_sequential(from_file)
    b = run_sequential(make(seeds=(1,)))
    assert np.array_equal(a.per_seed[0].R.scores, b.per_seed[0].R.scores)
