import json
import os
import subprocess
import sys

import numpy as np
import pytest

from mvica import cli, pipeline, tables

SUBCOMMANDS = ("run", "generate", "train", "evaluate", "sdv-check", "aggregate", "low-noise-sweep",
               "darmois-demo")

TINY = """\
# tiny two-view experiment for the driver tests
[experiment]
name = tiny
output_dir = out
seed = 3

[data]
dim = 2
views = 2
source_dist = uniform(-1.7320508075688772, 1.7320508075688772)
corrupter = additive
noise = logistic
noise_scale = 0.3
mixing_layers = 2
n_samples = 1000

[train]
form = FORM_C
h_widths = 16,16
psi_widths = 8
steps = 40
holdout = 0.2

[eval]
n_perm = 20
max_rows = 100
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


def _files(directory):
    out = {}
    for root, _, names in os.walk(directory):
        for name in names:
            if name.endswith(".csv") or name.endswith(".params"):
                p = os.path.join(root, name)
                out[os.path.relpath(p, directory)] = open(p, "rb").read()
    return out


# -- parser ------------------------------------------------------------------


@pytest.mark.parametrize("command", SUBCOMMANDS)
def test_every_subcommand_has_help(command, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main([command, "--help"])
    assert exc.value.code == 0
    assert "usage" in capsys.readouterr().out


def test_module_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "mvica.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("mvica ")


# -- config handling -----------------------------------------------------------


def test_unknown_key_is_a_usage_error(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text(TINY.replace("steps = 40", "steps = 40\nfoo = 1"))
    assert cli.main(["generate", "--config", str(path)]) == cli.EXIT_USAGE
    assert "unknown key [train].foo" in capsys.readouterr().err


def test_missing_master_seed_and_sections():
    with pytest.raises(ValueError, match=r"\[experiment\]\.seed"):
        pipeline.ExperimentConfig.from_text(TINY.replace("seed = 3\n", ""))
    with pytest.raises(ValueError, match=r"unknown section \[model\]"):
        pipeline.ExperimentConfig.from_text(TINY + "[model]\nx = 1\n")


def test_missing_config_file(tmp_path, capsys):
    assert cli.main(["run", "--config", str(tmp_path / "nope.cfg")]) == cli.EXIT_USAGE
    assert "not found" in capsys.readouterr().err


def test_config_hash_ignores_layout_but_not_values():
    base = pipeline.ExperimentConfig.from_text(TINY)
    shuffled = TINY.replace("# tiny two-view experiment for the driver tests\n", "").replace("steps = 40", "steps   =   40")
    assert pipeline.ExperimentConfig.from_text(shuffled).config_hash() == base.config_hash()
    assert pipeline.ExperimentConfig.from_text(TINY.replace("steps = 40", "steps = 41")).config_hash() != \
        base.config_hash()


def test_stage_seeds_fan_out_and_explicit_seeds_win():
    cfg = pipeline.ExperimentConfig.from_text(TINY)
    seeds = cfg.seeds()
    assert set(seeds) == set(pipeline.STAGES) and len(set(seeds.values())) == 4
    expected = np.random.SeedSequence(3, spawn_key=(pipeline.STAGES.index("train"),)).generate_state(1)[0]
    assert seeds["train"] == pipeline.stage_seed(3, "train") == int(expected)
    over = pipeline.ExperimentConfig.from_text(TINY.replace("steps = 40", "steps = 40\nseed = 11"))
    assert over.seeds()["train"] == 11 and over.seeds()["generate"] == seeds["generate"]


def test_bad_values_fail_before_any_work(tmp_path):
    for old, new in (("form = FORM_C", "form = FORM_Z"), ("holdout = 0.2", "holdout = 1.5"),
                     ("n_perm = 20", "n_perm = many")):
        with pytest.raises(ValueError):
            pipeline.ExperimentConfig.from_text(TINY.replace(old, new))


# -- pipeline ------------------------------------------------------------------


def test_stage_commands_compose_to_run(tiny_cfg, tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["run", "--config", str(tiny_cfg), "--out", str(a)]) == 0
    for cmd in ("generate", "train", "evaluate"):
        assert cli.main([cmd, "--config", str(tiny_cfg), "--out", str(b)]) == 0
    fa, fb = _files(a), _files(b)
    assert {"mcc.csv", "mcc_view2.csv", "alignment.csv", "loss.csv", "model.params"} <= set(fa)
    assert fa == fb
    man = pipeline.RunManifest.read(a / "manifest.json")
    assert man.status == "ok" and man.config_hash == pipeline.ExperimentConfig.load(tiny_cfg).config_hash()
    status = json.loads(capsys.readouterr().out.splitlines()[0])
    assert status["status"] == "ok"


def test_csv_reports_carry_seed_and_header(tiny_cfg, tmp_path):
    out = tmp_path / "r"
    pipeline.run_experiment(str(tiny_cfg), str(out))
    seed, header, rows = tables.read_table(out / "loss.csv")
    assert header == ["step", "loss", "acc"] and len(rows) == 40 and seed is not None
    _, header, rows = tables.read_table(out / "alignment.csv")
    assert header == ["h1_component", "h2_component", "dcor", "p_value", "matched"] and len(rows) == 4


def test_failed_stage_is_recorded_in_the_manifest(tmp_path, capsys):
    path = tmp_path / "agg.cfg"
    path.write_text(TINY + "\n[aggregate]\nn_views = 3\nperm_tests = 20\n")
    out = tmp_path / "o"
    assert cli.main(["run", "--config", str(path), "--out", str(out)]) == cli.EXIT_FAILED
    man = pipeline.RunManifest.read(out / "manifest.json")
    assert man.status == "failed" and man.failure.startswith("aggregate: ValueError")
    assert "stage aggregate failed" in capsys.readouterr().err


def test_aggregate_command_on_feature_files(tmp_path, capsys):
    rng = np.random.default_rng(0)
    s = rng.uniform(-1.7, 1.7, (300, 2))
    paths = []
    for i in range(2):
        paths.append(tables.write_matrix(str(tmp_path / f"f{i}.csv"), s + 0.1 * rng.standard_normal((300, 2)), 0))
    truth = tables.write_matrix(str(tmp_path / "s.csv"), s, 0)
    cfg = tmp_path / "a.cfg"
    cfg.write_text(TINY + "\n[aggregate]\nn_views = 2\nperm_tests = 20\nK = 2.0\n")
    code = cli.main(["aggregate", "--config", str(cfg), "--out", str(tmp_path / "agg"), "--features", *paths,
                     "--truth", truth, "--gauges", "identity"])
    assert code == 0
    out = capsys.readouterr().out
    assert "variance_bound,True" in out and "omega_finite,True" in out
    _, header, rows = tables.read_table(tmp_path / "agg" / "affine_fit.csv")
    assert header == ["component", "alpha", "beta", "r2"] and abs(float(rows[0][1]) - 1.0) < 0.05


# -- stand-alone commands ------------------------------------------------------


def test_sdv_check_verdicts(tmp_path, capsys):
    assert cli.main(["sdv-check", "--family", "gaussian", "--dim", "2", "--out", str(tmp_path / "g.json")]) == 0
    assert json.loads((tmp_path / "g.json").read_text())["verdict"] is False
    capsys.readouterr()
    assert cli.main(["sdv-check", "--family", "quartic", "--dim", "2", "--y", "0.9,1.4"]) == 0
    assert '"verdict": true' in capsys.readouterr().out
    assert cli.main(["sdv-check", "--family", "quartic", "--dim", "2", "--budget", "2"]) == cli.EXIT_USAGE


def test_darmois_demo_writes_reports(tmp_path, capsys):
    out = tmp_path / "dm"
    assert cli.main(["darmois-demo", "--n", "1000", "--n-perm", "50", "--max-rows", "500", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "mean_mcc=" in text
    _, header, rows = tables.read_table(out / "darmois.csv")
    assert header == ["test", "columns", "statistic", "p_value"]
    assert [r[0] for r in rows] == ["ks_uniformity", "ks_uniformity", "dcor_independence"]
    assert (out / "mcc.csv").exists()


def test_low_noise_sweep_command(tiny_cfg, tmp_path, capsys):
    out = tmp_path / "sw"
    assert cli.main(["low-noise-sweep", "--config", str(tiny_cfg), "--out", str(out), "--scales", "1,0"]) == 0
    _, header, rows = tables.read_table(out / "sweep.csv")
    assert header == ["scale", "mcc", "status"] and [r[2] for r in rows] == ["ok", "ok"]
    assert "trend_ok=" in capsys.readouterr().out
