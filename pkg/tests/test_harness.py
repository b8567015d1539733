import os

import numpy as np
import pytest

from clothrl import harness
from clothrl import neuralnet as nn
from clothrl.cli import main
from clothrl.clothsim import load_tasks
from clothrl.config import ConfigError, RunConfig, load_config

from conftest import TEST_SETS

NET_SETS = [s for s in TEST_SETS]


# ---------------------------------------------------------------------------
# config


def test_config_defaults_and_types():
    cfg = RunConfig()
    assert cfg["ppo.gamma"] == 0.99
    assert isinstance(cfg["ppo.minibatch"], int)
    assert isinstance(cfg["net.channels"], list)
    assert cfg["eval.mode"] == "greedy"


def test_config_unknown_key_rejected():
    cfg = RunConfig()
    with pytest.raises(ConfigError, match="unknown config key"):
        cfg.set("ppo.gama", "0.9")
    with pytest.raises(ConfigError):
        cfg["nope.nope"]


def test_config_typed_parsing():
    cfg = RunConfig()
    cfg.set("ppo.gamma", "0.5")
    assert cfg["ppo.gamma"] == 0.5
    cfg.set("ppo.minibatch", "16")
    assert cfg["ppo.minibatch"] == 16
    cfg.set("ppo.scale_rewards", "false")
    assert cfg["ppo.scale_rewards"] is False
    cfg.set("net.channels", "[4, 8, 4]")
    assert cfg["net.channels"] == [4, 8, 4]
    cfg.set("eval.mode", "sample")
    assert cfg["eval.mode"] == "sample"
    with pytest.raises(ConfigError):
        cfg.set("ppo.minibatch", "not-a-number")
    with pytest.raises(ConfigError):
        cfg.set("net.channels", "4, 8")


def test_config_file_roundtrip(tmp_path):
    cfg = load_config(sets=["ppo.gamma=0.9", "net.channels=[2, 4]",
                            "eval.mode=sample"])
    path = tmp_path / "r.cfg"
    cfg.write(path)
    cfg2 = load_config(path=path)
    assert cfg2.values == cfg.values
    # comments and blank lines parse
    path2 = tmp_path / "c.cfg"
    path2.write_text("# comment\n\nppo.gamma = 0.8  # inline\n")
    cfg3 = load_config(path=path2)
    assert cfg3["ppo.gamma"] == 0.8


def test_config_bad_line(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("this is not a config\n")
    with pytest.raises(ConfigError, match="bad.cfg:1"):
        load_config(path=path)


# ---------------------------------------------------------------------------
# task generation


def test_gen_tasks_deterministic_bytes(tmp_path, sim_cfg, geom):
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    harness.gen_tasks(5, 3, 55.0, p1, sim_cfg, geom)
    harness.gen_tasks(5, 3, 55.0, p2, sim_cfg, geom)
    assert p1.read_bytes() == p2.read_bytes()
    assert (tmp_path / "a.bin.manifest.csv").exists()


def test_gen_tasks_manifest_matches_recomputation(tmp_path, sim_cfg, geom):
    from clothrl.clothsim import coverage, flat_reference_area

    path = tmp_path / "t.bin"
    tasks = harness.gen_tasks(2, 4, 55.0, path, sim_cfg, geom)
    manifest = (tmp_path / "t.bin.manifest.csv").read_text().splitlines()[1:]
    for line, task in zip(manifest, tasks):
        idx, seed, cov, flagged = line.split(",")
        state = task.state()
        a_flat = flat_reference_area(state.mesh, geom)
        again = coverage(state, geom, a_flat).c_pct
        assert float(cov) == pytest.approx(again, abs=0.75)
        assert bool(int(flagged)) == task.flagged
        assert task.flagged or float(cov) <= 55.0


def test_gen_tasks_count_zero(tmp_path, sim_cfg, geom):
    with pytest.raises(harness.HarnessError):
        harness.gen_tasks(0, 0, 55.0, tmp_path / "x.bin", sim_cfg, geom)


# ---------------------------------------------------------------------------
# evaluation


@pytest.fixture(scope="module")
def eval_setup(tmp_path_factory, run_cfg, sim_cfg, geom):
    tmp = tmp_path_factory.mktemp("eval")
    tasks_path = tmp / "tasks.bin"
    harness.gen_tasks(9, 2, 55.0, tasks_path, sim_cfg, geom)
    rng = np.random.default_rng(0)
    net_cfg = nn.NetConfig.from_run(run_cfg)
    actor = nn.init_policy_params(net_cfg, rng)
    ckpt = tmp / "actor.ckpt"
    nn.save_checkpoint(actor, ckpt)
    return tmp, tasks_path, ckpt


def test_eval_greedy_writes_consistent_csv(eval_setup, run_cfg, sim_cfg, geom):
    tmp, tasks_path, ckpt = eval_setup
    actor = nn.load_checkpoint(ckpt)
    tasks = load_tasks(tasks_path)
    steps_csv = tmp / "steps.csv"
    summary = harness.evaluate(actor, tasks, run_cfg, sim_cfg, geom,
                               steps_csv=steps_csv, mode="greedy")
    rows = harness.read_steps_csv(steps_csv)
    assert rows
    # percent positive recomputed from the emitted CSV equals the summary
    positives = sum(r["positive"] for r in rows)
    assert summary.percent_positive == pytest.approx(
        positives / len(rows) * 100.0
    )
    # delta column is after - before
    for r in rows:
        assert r["delta"] == pytest.approx(
            r["coverage_after"] - r["coverage_before"]
        )
    # summary row serializes and parses back
    out = tmp / "summary.csv"
    harness.write_summary(summary, out)
    header, row = out.read_text().splitlines()
    assert header == harness.SUMMARY_HEADER
    vals = row.split(",")
    assert int(vals[0]) == len(tasks)
    assert float(vals[1]) == pytest.approx(summary.final_coverage_mean)


def test_eval_deterministic_bytes(eval_setup, run_cfg, sim_cfg, geom):
    tmp, tasks_path, ckpt = eval_setup
    actor = nn.load_checkpoint(ckpt)
    tasks = load_tasks(tasks_path)
    a, b = tmp / "e1.csv", tmp / "e2.csv"
    harness.evaluate(actor, tasks, run_cfg, sim_cfg, geom, steps_csv=a,
                     mode="greedy")
    harness.evaluate(actor, tasks, run_cfg, sim_cfg, geom, steps_csv=b,
                     mode="greedy")
    assert a.read_bytes() == b.read_bytes()


def test_eval_random_mode_needs_no_checkpoint(eval_setup, run_cfg, sim_cfg, geom):
    tmp, tasks_path, _ = eval_setup
    tasks = load_tasks(tasks_path)
    summary = harness.evaluate(None, tasks, run_cfg, sim_cfg, geom, mode="random")
    assert len(summary.final_coverage) == len(tasks)
    with pytest.raises(harness.HarnessError):
        harness.evaluate(None, tasks, run_cfg, sim_cfg, geom, mode="greedy")


def test_eval_checkpoint_mismatch_fails_early(eval_setup, run_cfg, sim_cfg, geom):
    tmp, tasks_path, _ = eval_setup
    tasks = load_tasks(tasks_path)
    wrong = nn.init_policy_params(
        nn.NetConfig(channels=(2,), dtype="f4"), np.random.default_rng(0)
    )
    with pytest.raises(harness.HarnessError, match="checkpoint"):
        harness.evaluate(wrong, tasks, run_cfg, sim_cfg, geom, mode="greedy")


def test_eval_task_mismatch_fails_early(eval_setup, run_cfg, geom):
    from clothrl.clothsim import SimConfig

    tmp, tasks_path, ckpt = eval_setup
    actor = nn.load_checkpoint(ckpt)
    tasks = load_tasks(tasks_path)
    wrong_sim = SimConfig(rows=9, cols=9, spacing=0.025)
    with pytest.raises(harness.HarnessError, match="mesh"):
        harness.evaluate(actor, tasks, run_cfg, wrong_sim, geom, mode="greedy")


def test_flat_task_terminates_immediately(run_cfg, sim_cfg, geom, tmp_path):
    # a task that starts essentially flat ends via the threshold rule
    from clothrl.clothsim import Task, new_flat_cloth

    flat = new_flat_cloth(12, 12, 0.025)
    task = Task(0, 12, 12, 0.025, (0.0, 0.0),
                flat.positions.astype(np.float32), 100.0, False)
    summary = harness.evaluate(None, [task], run_cfg, sim_cfg, geom,
                               mode="random")
    assert summary.steps[0] == 0  # solved before any action
    assert summary.final_coverage[0] == 100.0
    assert summary.delta_coverage[0] == 0.0


def test_replay_reproduces_coverage(eval_setup, run_cfg, sim_cfg, geom):
    tmp, tasks_path, ckpt = eval_setup
    actor = nn.load_checkpoint(ckpt)
    tasks = load_tasks(tasks_path)
    steps_csv = tmp / "rp.csv"
    harness.evaluate(actor, tasks, run_cfg, sim_cfg, geom, steps_csv=steps_csv,
                     mode="greedy")
    frames = tmp / "frames"
    n = harness.replay(steps_csv, tasks, run_cfg, sim_cfg, geom, out_dir=frames)
    assert n == len(harness.read_steps_csv(steps_csv))
    dumped = sorted(os.listdir(frames))
    assert any(f.endswith("occupancy.pgm") for f in dumped)
    assert any(f.endswith("height.pgm") for f in dumped)
    # frames regenerate bit-identically
    frames2 = tmp / "frames2"
    harness.replay(steps_csv, tasks, run_cfg, sim_cfg, geom, out_dir=frames2)
    for f in dumped:
        assert (frames / f).read_bytes() == (frames2 / f).read_bytes()


def test_replay_detects_mismatch(eval_setup, run_cfg, sim_cfg, geom):
    tmp, tasks_path, ckpt = eval_setup
    actor = nn.load_checkpoint(ckpt)
    tasks = load_tasks(tasks_path)
    steps_csv = tmp / "tamper.csv"
    harness.evaluate(actor, tasks, run_cfg, sim_cfg, geom, steps_csv=steps_csv,
                     mode="greedy")
    lines = steps_csv.read_text().splitlines()
    parts = lines[1].split(",")
    parts[4] = repr(float(parts[4]) + 1.0)
    lines[1] = ",".join(parts)
    steps_csv.write_text("\n".join(lines) + "\n")
    with pytest.raises(harness.HarnessError, match="mismatch"):
        harness.replay(steps_csv, tasks, run_cfg, sim_cfg, geom)


# ---------------------------------------------------------------------------
# CLI


def _cli_sets(extra=()):
    out = []
    for s in TEST_SETS + list(extra):
        out += ["--set", s]
    return out


def test_cli_gen_tasks_and_eval_random(tmp_path, capsys):
    tasks = str(tmp_path / "tasks.bin")
    rc = main(["gen-tasks", "--count", "2", "--out", tasks,
               "--out-dir", str(tmp_path), "--seed", "3"] + _cli_sets())
    assert rc == 0
    assert os.path.exists(tasks)
    assert (tmp_path / "resolved-config.cfg").exists()
    rc = main(["eval", "--tasks", tasks, "--mode", "random",
               "--out-dir", str(tmp_path)] + _cli_sets())
    assert rc == 0
    assert (tmp_path / "eval_steps.csv").exists()
    assert (tmp_path / "eval_summary.csv").exists()


def test_cli_usage_errors(tmp_path):
    assert main(["gen-tasks"]) == 1  # missing required args
    assert main(["no-such-command"]) == 1
    assert main(["train", "--out-dir", str(tmp_path)]) == 1  # needs source


def test_cli_unknown_config_key(tmp_path):
    rc = main(["gen-tasks", "--count", "1", "--out", str(tmp_path / "t.bin"),
               "--out-dir", str(tmp_path), "--set", "definitely.not.a.key=1"])
    assert rc == 2


def test_cli_eval_missing_checkpoint(tmp_path):
    tasks = str(tmp_path / "tasks.bin")
    assert main(["gen-tasks", "--count", "1", "--out", tasks,
                 "--out-dir", str(tmp_path)] + _cli_sets()) == 0
    rc = main(["eval", "--tasks", tasks, "--mode", "greedy",
               "--out-dir", str(tmp_path)] + _cli_sets())
    assert rc == 2


def test_cli_count_zero(tmp_path):
    rc = main(["gen-tasks", "--count", "0", "--out", str(tmp_path / "t.bin"),
               "--out-dir", str(tmp_path)] + _cli_sets())
    assert rc == 2


def test_cli_resolved_config_reruns_identically(tmp_path):
    tasks1 = str(tmp_path / "t1.bin")
    assert main(["gen-tasks", "--count", "2", "--out", tasks1,
                 "--out-dir", str(tmp_path / "r1"), "--seed", "5"]
                + _cli_sets()) == 0
    resolved = str(tmp_path / "r1" / "resolved-config.cfg")
    tasks2 = str(tmp_path / "t2.bin")
    assert main(["gen-tasks", "--count", "2", "--out", tasks2,
                 "--out-dir", str(tmp_path / "r2"), "--config", resolved]) == 0
    assert open(tasks1, "rb").read() == open(tasks2, "rb").read()
