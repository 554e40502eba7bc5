import math

import numpy as np
import pytest

from metricmm.corrupt import CorruptionDuringTraining, CorruptionKind, CorruptionSpec
from metricmm.envs.gridworld import GridWorldEnv
from metricmm.errors import ConfigurationError
from metricmm.harness import train as train_mod
from metricmm.harness.cli import main
from metricmm.harness.config import (
    EvalSpec,
    TrainConfig,
    format_config,
    parse_config_text,
    parse_corruption,
    read_config_file,
)
from metricmm.harness.csvio import (
    CURVE_COLUMNS,
    EVAL_COLUMNS,
    METRIC_COLUMNS,
    read_csv,
    rows_equal,
    write_csv,
)
from metricmm.harness.evaluate import (
    evaluate_policy,
    load_policy,
    relative_drop,
    run_eval,
)
from metricmm.harness.models import build_representation, load_run
from metricmm.harness.report import metric_report
from metricmm.harness.train import TAG_MODEL, int_seed, run_train
from metricmm.sac import SacConfig

TINY_PENDULUM = """
[run]
env = pendulum
estimator = {est}
seeds = {seeds}
total_steps = 120
warmup_steps = 60
eval_every = 60
eval_episodes = 1
episode_length = 40
out = {out}

[model]
d_z = 4
hidden = 8
transition_hidden = 8

[sac]
batch_size = 16
buffer_capacity = 500
hidden = 8
"""

TINY_GRID = """
[run]
env = gridworld
estimator = metricmm
seeds = 0
eval_every = 5
out = {out}

[model]
d_z = 4
hidden = 8
transition_hidden = 8

[gridworld]
dataset_transitions = 200
gradient_steps = {steps}
repr_batch_size = 16
walk_length = 20
"""


def tiny_pendulum(tmp_path, est="metricmm", seeds="0", sub="run"):
    return parse_config_text(TINY_PENDULUM.format(est=est, seeds=seeds, out=tmp_path / sub))[0]


def tiny_grid(tmp_path, steps=10, sub="grid"):
    return parse_config_text(TINY_GRID.format(steps=steps, out=tmp_path / sub))[0]


# ---------------------------------------------------------------- config


def test_config_parsing_and_round_trip(tmp_path):
    cfg, cor = parse_config_text(
        "[run]\nseeds = 3, 4\nout = x\njoint_gradients = yes\n[sac]\nbatch_size = 64\nhidden = 32 32\n"
        "[eval]\ncorruptions = failure:0.9:1:1, gaussian:0.5:3:0+1\n"
    )
    assert cfg.seeds == (3, 4) and cfg.out_dir == "x" and cfg.joint_gradients
    assert cfg.sac.batch_size == 64 and cfg.sac.hidden == (32, 32)
    assert cor[1] == CorruptionSpec(CorruptionKind.GAUSSIAN, 0.5, 3, (0, 1))
    again, cor2 = parse_config_text(format_config(cfg, cor))
    assert again.to_dict() == cfg.to_dict() and cor2 == cor


@pytest.mark.parametrize(
    "text, field",
    [
        ("[run]\nbogus = 1\n", "bogus"),
        ("[nope]\nx = 1\n", "nope"),
        ("[run]\ntotal_steps = many\n", "total_steps"),
        ("[run]\nestimator = transformer\n", "estimator"),
        ("[run]\nenv = gridworld\nestimator = concat\n", "estimator"),
        ("[sac]\ngamma = 1.5\n", "gamma"),
        ("[eval]\ncorruptions = fog:0.5\n", "fog"),
    ],
)
def test_config_errors_name_the_field(text, field):
    with pytest.raises(ConfigurationError, match=field):
        parse_config_text(text)


def test_missing_config_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_config_file(tmp_path / "absent.ini")


def test_corruption_strings():
    assert parse_corruption("failure:0.9") == CorruptionSpec("failure", 0.9, 1, (0,))
    assert parse_corruption("puzzle:0.3:10").K == 10
    with pytest.raises(ConfigurationError):
        parse_corruption("failure")


def test_ablation_variants_change_only_their_weights():
    base = TrainConfig(lambda_positive=2.0, lambda_negative=3.0, lambda_invariance=4.0)
    w = base.replace(estimator="metricmm_no_metric").loss_weights()
    assert (w.positive, w.negative, w.invariance) == (0.0, 0.0, 4.0)
    w = base.replace(estimator="metricmm_no_inv").loss_weights()
    assert (w.positive, w.negative, w.invariance) == (2.0, 3.0, 0.0)
    w = base.loss_weights()
    assert (w.positive, w.negative, w.invariance) == (2.0, 3.0, 4.0)


def test_eval_spec_validation():
    with pytest.raises(ConfigurationError):
        EvalSpec(())
    with pytest.raises(ConfigurationError):
        EvalSpec(("a",), episodes=0)


# ---------------------------------------------------------------- csv


def test_csv_round_trip_is_lossless(tmp_path):
    rows = [
        {c: v for c, v in zip(CURVE_COLUMNS, [1, 100, 0.1 + 0.2, -1e-300, math.nan] + [k / 3 for k in range(8)])},
        {c: float(k) * math.pi for k, c in enumerate(CURVE_COLUMNS)},
    ]
    path = tmp_path / "c.csv"
    write_csv(path, CURVE_COLUMNS, rows)
    back = read_csv(path, CURVE_COLUMNS)
    assert rows_equal(rows, back)
    assert back[0]["train_return"] == 0.1 + 0.2
    with pytest.raises(ConfigurationError):
        read_csv(path, EVAL_COLUMNS)


# ---------------------------------------------------------------- training


def test_gridworld_zero_steps_is_initialisation(tmp_path):
    cfg = tiny_grid(tmp_path, steps=0)
    (res,) = run_train(cfg)
    assert read_csv(res.curve) == []
    saved = load_run(res.checkpoint).representation
    env = GridWorldEnv()
    fresh = build_representation(cfg, env.modality_dims, env.action_dim, int_seed(0, TAG_MODEL))
    for a, b in zip(saved.tensors(), fresh.tensors()):
        assert a.tobytes() == b.tobytes()


def test_gridworld_training_moves_weights_and_logs(tmp_path):
    cfg = tiny_grid(tmp_path, steps=10)
    (res,) = run_train(cfg)
    rows = read_csv(res.curve, CURVE_COLUMNS)
    assert [r["epoch"] for r in rows] == [1, 2]
    assert all(np.isfinite(r["repr_loss_total"]) for r in rows)
    assert load_run(res.checkpoint).meta["gradient_steps"] == 10


def test_pendulum_training_is_bitwise_deterministic(tmp_path):
    a = run_train(tiny_pendulum(tmp_path, sub="a"))[0]
    b = run_train(tiny_pendulum(tmp_path, sub="b"))[0]
    assert a.curve.read_bytes() == b.curve.read_bytes()
    ra, rb = load_run(a.checkpoint), load_run(b.checkpoint)
    for x, y in zip(ra.representation.tensors() + ra.agent.actor.tensors(),
                    rb.representation.tensors() + rb.agent.actor.tensors()):
        assert x.tobytes() == y.tobytes()
    rows = read_csv(a.curve, CURVE_COLUMNS)
    assert [r["env_steps"] for r in rows] == [60, 120]
    # updates begin after half the warmup, so both epochs carry losses
    assert all(np.isfinite(r["critic_loss"]) and np.isfinite(r["L_T"]) for r in rows)


@pytest.mark.parametrize("est", ["concat", "linearcomb", "metricmm_no_inv"])
def test_every_estimator_trains(tmp_path, est):
    (res,) = run_train(tiny_pendulum(tmp_path, est=est))
    rows = read_csv(res.curve, CURVE_COLUMNS)
    assert np.isfinite(rows[-1]["critic_loss"])
    assert load_policy(res.checkpoint).estimator_kind == est


@pytest.mark.parametrize("est", ["concat", "linearcomb"])
def test_baseline_target_encoder_tracks_online(tmp_path, est):
    tr = train_mod.PendulumTrainer(tiny_pendulum(tmp_path, est=est), 0)
    while tr.updates_owed == 0:
        tr.env_step()
    before = [t.copy() for t in tr.rep_target.tensors()]
    tr.train_step()
    tau = tr.cfg.sac.encoder_tau
    for old, t, o in zip(before, tr.rep_target.tensors(), tr.rep.tensors()):
        np.testing.assert_allclose(t, (1 - tau) * old + tau * o, rtol=1e-12, atol=1e-15)
    assert any(not np.array_equal(t, o) for t, o in zip(tr.rep_target.tensors(), tr.rep.tensors()))
    assert train_mod.PendulumTrainer(tiny_pendulum(tmp_path), 0).rep_target is None


def test_training_refuses_corruption(tmp_path, monkeypatch):
    from metricmm.corrupt import apply_corruption

    real_step = train_mod.PendulumTrainer.env_step

    def tampered(self):
        self.obs = tuple(apply_corruption(self.obs[0], "failure", CorruptionSpec("failure", 1.0), None),) + self.obs[1:]
        real_step(self)

    monkeypatch.setattr(train_mod.PendulumTrainer, "env_step", tampered)
    with pytest.raises(CorruptionDuringTraining):
        run_train(tiny_pendulum(tmp_path))


# ---------------------------------------------------------------- evaluation


@pytest.fixture(scope="module")
def two_seed_checkpoints(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("ev")
    return [str(r.checkpoint) for r in run_train(tiny_pendulum(tmp, seeds="0, 1"))]


def test_run_eval_rows(tmp_path, two_seed_checkpoints):
    specs = (CorruptionSpec("failure", 0.9, 1, (1,)), CorruptionSpec("gaussian", 0.0), CorruptionSpec("hallucination", 0.5))
    out = tmp_path / "eval.csv"
    rows = run_eval(EvalSpec(tuple(two_seed_checkpoints), specs, episodes=2, out_path=str(out), bank_size=50))
    assert [(r["kind"], r["p"]) for r in rows] == [("none", 0.0), ("failure", 0.9), ("hallucination", 0.5)]
    assert all(r["episodes"] == 4 and r["seeds"] == "0;1" for r in rows)
    back = read_csv(out, EVAL_COLUMNS)
    for r, b in zip(rows, back):
        assert str(b.pop("targets")) == r["targets"]
        assert rows_equal([b], [{k: r[k] for k in EVAL_COLUMNS if k != "targets"}])


def test_run_eval_validates_before_running(tmp_path, two_seed_checkpoints, monkeypatch):
    calls = []
    monkeypatch.setattr("metricmm.harness.evaluate.evaluate_policy", lambda *a, **k: calls.append(1))
    bad = (CorruptionSpec("failure", 0.5), CorruptionSpec("patches", 0.5, targets=(1,)))
    with pytest.raises(ConfigurationError):
        run_eval(EvalSpec(tuple(two_seed_checkpoints), bad, episodes=1, out_path=str(tmp_path / "e.csv")))
    assert calls == []
    assert not (tmp_path / "e.csv").exists()


def test_common_random_numbers(two_seed_checkpoints):
    pol = load_policy(two_seed_checkpoints[0])
    clean = evaluate_policy(pol, None, 3, seed=0)
    zero_p = evaluate_policy(pol, CorruptionSpec("failure", 0.0), 3, seed=0)
    np.testing.assert_array_equal(clean, zero_p)
    np.testing.assert_array_equal(clean, evaluate_policy(pol, None, 3, seed=0))
    # a corruption that fires changes returns, a different eval seed changes start states
    assert not np.array_equal(clean, evaluate_policy(pol, CorruptionSpec("failure", 1.0, targets=(0, 1)), 3, seed=0))
    assert not np.array_equal(clean, evaluate_policy(pol, None, 3, seed=1))


def test_relative_drop():
    assert relative_drop(-200.0, -300.0) == pytest.approx(0.5)
    assert relative_drop(-200.0, -200.0) == 0.0


# ---------------------------------------------------------------- metric report


def test_metric_report_exact_coordinates_correlate():
    walls = np.zeros((6, 6), dtype=bool)
    env = GridWorldEnv(walls)
    rep = metric_report(env, lambda cell: np.array(cell, dtype=float), np.random.default_rng(0), pairs=300)
    assert rep["spearman"] >= 0.95 and not rep["degenerate"]
    # unit moves on an open grid are unit distances
    assert rep["adjacent_dev_max"] == pytest.approx(0.0, abs=1e-12)


def test_metric_report_constant_encoder_is_degenerate():
    rep = metric_report(GridWorldEnv(), lambda cell: np.zeros(3), np.random.default_rng(0), pairs=100)
    assert rep["degenerate"] and math.isnan(rep["spearman"])


# ---------------------------------------------------------------- cli


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.ini")]) == 2
    assert main(["eval", "--out", str(tmp_path)]) == 2
    assert main(["teleport"]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "nope.ckpt")]) == 2
    bad = tmp_path / "bad.ini"
    bad.write_text("[run]\nwhatever = 1\n")
    assert main(["train", "--config", str(bad)]) == 2
    assert "whatever" in capsys.readouterr().err


def test_cli_train_and_metric_report(tmp_path):
    ini = tmp_path / "g.ini"
    ini.write_text(TINY_GRID.format(steps=5, out=tmp_path / "g"))
    assert main(["train", "--config", str(ini)]) == 0
    ckpt = tmp_path / "g" / "metricmm_gridworld_seed0.ckpt"
    assert ckpt.is_file()
    assert main(["metric-report", "--checkpoint", str(ckpt), "--out", str(tmp_path / "m"), "--pairs", "50"]) == 0
    (row,) = read_csv(tmp_path / "m" / "metric_report.csv", METRIC_COLUMNS)
    assert row["pairs"] > 0


def test_cli_eval_writes_csv(tmp_path, two_seed_checkpoints):
    code = main(["eval", "--checkpoint", *two_seed_checkpoints, "--corruption", "failure:0.9:1:1",
                 "--episodes", "1", "--out", str(tmp_path)])
    assert code == 0
    rows = read_csv(tmp_path / "eval.csv", EVAL_COLUMNS)
    assert [r["kind"] for r in rows] == ["none", "failure"]


def test_sac_config_defaults_survive_checkpoint(two_seed_checkpoints):
    pol = load_policy(two_seed_checkpoints[0])
    assert pol.agent.config.hidden == (8,)
    assert isinstance(pol.agent.config, SacConfig)


def test_two_worker_mode(tmp_path):
    threaded = tiny_pendulum(tmp_path, sub="t")
    threaded = threaded.replace(deterministic=False, sac=SacConfig(**{**threaded.to_dict()["sac"], "workers": 2}))
    (res,) = run_train(threaded)
    assert load_run(res.checkpoint).meta["workers"] == 2
    rows = read_csv(res.curve, CURVE_COLUMNS)
    assert [r["env_steps"] for r in rows] == [60, 120]
    assert all(np.isfinite(r["critic_loss"]) for r in rows)


def test_deterministic_mode_overrides_workers(tmp_path):
    base = tiny_pendulum(tmp_path, sub="one")
    two = base.replace(out_dir=str(tmp_path / "two"), sac=SacConfig(**{**base.to_dict()["sac"], "workers": 2}))
    a, b = run_train(base)[0], run_train(two)[0]
    assert load_run(b.checkpoint).meta["workers"] == 1
    assert a.curve.read_bytes() == b.curve.read_bytes()


def test_readme_config_example_parses():
    from pathlib import Path

    text = (Path(__file__).resolve().parents[1] / "README.md").read_text()
    block = text.split("```ini\n", 1)[1].split("```", 1)[0]
    cfg, cor = parse_config_text(block)
    assert cfg.joint_gradients and cfg.sac.workers == 1 and cfg.map_path == "maps/room.txt"
    assert [c.kind.value for c in cor] == ["failure", "gaussian"]
