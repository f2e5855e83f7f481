import numpy as np
import pytest

from jointsampler import harness
from jointsampler.errors import InvalidArgumentError, ParseError
from jointsampler.harness import (
    METRICS_HEADER,
    ExperimentConfig,
    load_config,
    load_run,
    parse_config_text,
    persist_run,
    run_sampling_error,
    run_training,
)
from jointsampler.metrics import MetricsRow


def tiny(**kw):
    base = dict(game="g1", total_steps=200, eval_interval=40, eval_episodes=20, seed=3)
    base.update(kw)
    return ExperimentConfig(**base)


def test_training_record_structure():
    rec = run_training(tiny(), persist=False)
    steps = [r.step for r in rec.rows]
    assert steps == sorted(set(steps)) and steps[-1] == 200
    evals = [r for r in rec.rows if r.step % 40 == 0]
    assert len(evals) == 5 and all(0 <= r.success_rate <= 1 for r in evals)
    assert rec.failed_step is None and rec.duration > 0


@pytest.mark.parametrize("sampler", ["on_policy", "ma_props"])
def test_runs_are_byte_identical(tmp_path, sampler):
    cfg = tiny(sampler=sampler, metric_cadence=2)
    run_training(ExperimentConfig(**{**vars(cfg), "out_dir": str(tmp_path / "a")}))
    run_training(ExperimentConfig(**{**vars(cfg), "out_dir": str(tmp_path / "b")}))
    names = ["metrics.csv", "final_params"] + (["shadow_metrics.csv"] if sampler != "on_policy" else [])
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_config_snapshot_reruns_identically(tmp_path):
    first = run_training(tiny(sampler="props", game="climbing", out_dir=str(tmp_path / "x")))
    again = run_training(load_config(tmp_path / "x" / "config"), persist=False)
    assert again.rows == first.rows
    assert all(np.array_equal(a, b) for a, b in zip(again.final_params, first.final_params))


def test_interleave_schedule():
    stats = {}
    run_training(tiny(game="gridworld", sampler="ma_props", total_steps=300, batch_size=100, behavior_batch=20,
                      eval_episodes=2, eval_interval=300), persist=False, stats=stats)
    assert stats["behavior_updates"] == [5, 5, 5]


def test_metrics_do_not_perturb_training():
    quiet = run_training(tiny(sampler="ma_props", metric_cadence=0), persist=False)
    loud = run_training(tiny(sampler="ma_props", metric_cadence=1), persist=False)
    assert all(np.array_equal(a, b) for a, b in zip(quiet.final_params, loud.final_params))
    assert [r.success_rate for r in quiet.rows if r.success_rate is not None] == \
        [r.success_rate for r in loud.rows if r.success_rate is not None]
    assert loud.shadow_rows and all(r.tv_joint is not None for r in loud.shadow_rows)


def test_failure_records_step(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("boom")

    monkeypatch.setattr(harness, "ppo_update", boom)
    with pytest.raises(RuntimeError):
        run_training(tiny(out_dir=str(tmp_path)))
    rec = load_run(tmp_path)
    assert rec.failed_step == 20 and "boom" in rec.error


# -- sampling-error protocol ------------------------------------------------------------


def test_on_policy_tv_decreases():
    early, late = [], []
    for seed in range(10):
        rec = run_sampling_error(tiny(seed=seed), 4096, [64, 4096], persist=False)
        early.append(rec.rows[0].tv_joint)
        late.append(rec.rows[1].tv_joint)
    assert np.mean(late) < np.mean(early)


def test_sampling_error_rows():
    rec = run_sampling_error(tiny(sampler="ma_props"), 64, [16, 64, 32], persist=False)
    assert [r.step for r in rec.rows] == [16, 32, 64]
    assert all(r.tv_joint is not None and r.kl_joint is not None and None not in r.kl_agent for r in rec.rows)
    assert all(r.success_rate is None for r in rec.rows)


def test_sampling_error_bad_checkpoints():
    with pytest.raises(InvalidArgumentError):
        run_sampling_error(tiny(), 64, [128], persist=False)
    with pytest.raises(InvalidArgumentError):
        run_sampling_error(tiny(), 64, [], persist=False)


# -- persistence ---------------------------------------------------------------------------


def test_persist_load_round_trip(tmp_path):
    rec = run_training(tiny(sampler="ma_props", metric_cadence=1), persist=False)
    persist_run(rec, tmp_path)
    back = load_run(tmp_path)
    assert back.rows == rec.rows and back.shadow_rows == rec.shadow_rows
    assert back.config == rec.config.resolved()
    assert all(np.array_equal(a, b) for a, b in zip(back.final_params, rec.final_params))


def test_csv_header_and_empty_fields(tmp_path):
    rec = harness.RunRecord(tiny().resolved(), 3, [MetricsRow(5, 3, 0.5, None, None, [None, 0.25])])
    persist_run(rec, tmp_path)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,seed,success_rate,tv_joint,kl_joint,kl_agent_1,kl_agent_2"
    assert lines[0].split(",") == METRICS_HEADER
    assert lines[1] == "5,3,0.5,,,,0.25"


def test_malformed_metrics_names_file_and_line(tmp_path):
    persist_run(harness.RunRecord(tiny().resolved(), 3, [MetricsRow(5, 3, 0.5)]), tmp_path)
    (tmp_path / "metrics.csv").write_text(",".join(METRICS_HEADER) + "\n5,3,0.5,,,,\n6,3,oops,,,,\n")
    with pytest.raises(ParseError) as info:
        load_run(tmp_path)
    assert "metrics.csv" in str(info.value) and ":3" in str(info.value)


def test_corrupt_params(tmp_path):
    persist_run(harness.RunRecord(tiny().resolved(), 3, []), tmp_path)
    (tmp_path / "final_params").write_bytes(b"garbage")
    with pytest.raises(ParseError):
        load_run(tmp_path)


def test_config_text_errors():
    with pytest.raises(ParseError) as info:
        parse_config_text("game = g1\nflavour = mint\n", "cfg")
    assert info.value.line == 2
    with pytest.raises(ParseError):
        parse_config_text("seed 4\n")
    with pytest.raises(ParseError):
        parse_config_text("seed = four\n")
    with pytest.raises(ParseError):
        parse_config_text("norm_adv = maybe\n")


def test_config_text_round_trip():
    cfg = tiny(sampler="ma_props", behavior_lr=0.25).resolved()
    assert parse_config_text(harness.format_config(cfg)) == cfg


def test_config_validation():
    with pytest.raises(InvalidArgumentError):
        tiny(batch_size=20, behavior_batch=3).resolved()
    with pytest.raises(InvalidArgumentError):
        tiny(game="chess").resolved()
    with pytest.raises(InvalidArgumentError):
        tiny(sampler="greedy").resolved()


def test_table_defaults():
    cfg = ExperimentConfig(game="g19").resolved()
    assert (cfg.batch_size, cfg.lr, cfg.behavior_batch, cfg.total_steps) == (20, 0.1, 1, 20_000)
    cfg = ExperimentConfig(game="gridworld").resolved()
    assert cfg.total_steps == 50_000
