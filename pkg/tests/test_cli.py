import json
from pathlib import Path

import numpy as np
import pytest

from rangeloc import cli
from rangeloc.config import DEFAULTS, config_hash, load_config


def micro_config():
    return load_config("desk", overrides=[
        "trajectory.max_duration_s=15",
        "dataset.n_trials=4", "dataset.n_train=3", "dataset.S=10",
        "train.epochs=1", "train.repeats=1",
        "model.mamba.d_model=12", "model.mamba.d_state=4", "model.mamba.n_blocks=2",
        "model.bilstm.hidden_size=12", "model.bilstm.n_layers=1",
        "go.window_frames=10",
        "ablate.epochs=1",
    ])


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*")) if p.is_file()
    }


class TestConfig:
    def test_profiles_resolve(self):
        desk = load_config("desk")
        paper = load_config("paper")
        assert desk["dataset"]["S"] == 20
        assert paper["dataset"]["S"] == 100
        assert paper["train"]["epochs"] == 150

    def test_unknown_key_rejected(self):
        with pytest.raises(KeyError, match="noise.bogus"):
            load_config("desk", overrides=["noise.bogus=1"])

    def test_unknown_profile_rejected(self):
        with pytest.raises(KeyError):
            load_config("enormous")

    def test_hash_stable_under_key_reordering(self):
        cfg = load_config("desk")
        reordered = json.loads(json.dumps(cfg))
        reordered = dict(reversed(list(reordered.items())))
        assert config_hash(cfg) == config_hash(reordered)

    def test_override_json_values(self):
        cfg = load_config("desk", overrides=["train.epochs=7", "noise.sigma_range=0.5"])
        assert cfg["train"]["epochs"] == 7
        assert cfg["noise"]["sigma_range"] == 0.5

    def test_file_merge(self, tmp_path):
        f = tmp_path / "c.json"
        f.write_text(json.dumps({"train": {"batch": 16}}))
        cfg = load_config("desk", config_path=f)
        assert cfg["train"]["batch"] == 16

    def test_defaults_not_mutated(self):
        load_config("desk", overrides=["train.epochs=1"])
        assert DEFAULTS["train"]["epochs"] == 150

    def test_every_field_has_documented_default(self):
        # sections exist and are non-empty
        for section in ("environment", "rig", "noise", "trajectory", "dataset",
                        "model", "train", "go", "ablate"):
            assert section in DEFAULTS and DEFAULTS[section]


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    """One micro pipeline shared by the read-only CLI assertions."""
    wd = tmp_path_factory.mktemp("pipe")
    cfg = micro_config()
    cli.cmd_simulate(cfg, wd, seed=3)
    cli.cmd_prepare(cfg, wd, seed=3)
    cli.cmd_train(cfg, wd, seed=3, model_kind="mamba")
    cli.cmd_baseline(cfg, wd, seed=3)
    return wd, cfg


class TestSimulate:
    def test_manifest_and_split(self, pipeline_dir):
        wd, cfg = pipeline_dir
        manifest = cli.read_manifest(wd)
        assert len(manifest["trials"]) == 4
        assert len(manifest["train_ids"]) == 3
        assert len(manifest["test_ids"]) == 1
        assert manifest["config_hash"] == config_hash(cfg)
        for tid in manifest["trials"]:
            d = Path(wd) / "trials" / tid
            for name in ("meas.csv", "gt.csv", "osl.csv", "env.json"):
                assert (d / name).exists()

    def test_existing_dir_requires_force(self, pipeline_dir):
        wd, cfg = pipeline_dir
        with pytest.raises(FileExistsError, match="--force"):
            cli.cmd_simulate(cfg, wd, seed=3)

    def test_same_seed_bit_identical_tree(self, tmp_path):
        cfg = micro_config()
        cli.cmd_simulate(cfg, tmp_path / "a", seed=9, n_trials=2)
        cli.cmd_simulate(cfg, tmp_path / "b", seed=9, n_trials=2)
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_single_trial_warns_empty_test(self, tmp_path, capsys):
        cfg = micro_config()
        cli.cmd_simulate(cfg, tmp_path / "one", seed=5, n_trials=1)
        assert "empty test split" in capsys.readouterr().err

    def test_outputs_stamped_with_hash_and_seed(self, pipeline_dir):
        wd, cfg = pipeline_dir
        head = (Path(wd) / "trials" / "trial_000" / "meas.csv").read_text().splitlines()[0]
        assert config_hash(cfg) in head
        assert "seed=3" in head


class TestPrepare:
    def test_dataset_file_exists_with_split_meta(self, pipeline_dir):
        wd, cfg = pipeline_dir
        from rangeloc.dataset import load_prepared

        trials, layout, S, scaler, meta = load_prepared(Path(wd) / "dataset" / "dataset.npz")
        assert S == 10
        assert len(trials) == 4
        assert len(meta["train_ids"]) == 3
        assert layout.input_dim == 20
        assert scaler.range_scale > 0

    def test_window_count_printed(self, tmp_path, capsys):
        cfg = micro_config()
        cli.cmd_simulate(cfg, tmp_path, seed=4, n_trials=2)
        cli.cmd_prepare(cfg, tmp_path, seed=4)
        out = capsys.readouterr().out
        assert "M=" in out and "K=" in out

    def test_rerun_idempotent_bytes(self, tmp_path):
        cfg = micro_config()
        cli.cmd_simulate(cfg, tmp_path, seed=6, n_trials=2)
        cli.cmd_prepare(cfg, tmp_path, seed=6)
        first = tree_bytes(tmp_path / "dataset")
        cli.cmd_prepare(cfg, tmp_path, seed=6)
        assert tree_bytes(tmp_path / "dataset") == first

    def test_wrong_seed_rejected(self, pipeline_dir):
        wd, cfg = pipeline_dir
        with pytest.raises(ValueError, match="do not match"):
            cli.cmd_prepare(cfg, wd, seed=999)


class TestTrainAndEvaluate:
    def test_run_artifacts(self, pipeline_dir):
        wd, _ = pipeline_dir
        run = Path(wd) / "runs" / "mamba"
        assert (run / "train_log.csv").exists()
        assert (run / "ckpt_r1.npz").exists()
        meta = json.loads((run / "metadata.json").read_text())
        assert meta["model"] == "mamba"
        preds = list((run / "preds_r1").glob("*.csv"))
        assert len(preds) == 1  # one test trial

    def test_evaluate_writes_reports(self, pipeline_dir):
        wd, cfg = pipeline_dir
        table = cli.cmd_evaluate(cfg, wd, seed=3, methods=["mamba", "go"])
        rep_dir = Path(wd) / "reports"
        assert (rep_dir / "comparison.csv").exists()
        assert (rep_dir / "comparison.txt").exists()
        assert (rep_dir / "metrics_mamba.json").exists()
        assert (rep_dir / "errors_long.csv").exists()
        assert table.values.shape == (1, 2)

    def test_perfect_predictions_zero_rmse(self, pipeline_dir):
        # overwrite a copy of the go predictions with ground truth: RMSE 0
        wd, cfg = pipeline_dir
        import shutil

        from rangeloc.sim import read_trial

        run = Path(wd) / "runs"
        shutil.rmtree(run / "oracle", ignore_errors=True)
        shutil.copytree(run / "go", run / "oracle")
        meta = json.loads((run / "oracle" / "metadata.json").read_text())
        meta["method"] = "oracle"
        (run / "oracle" / "metadata.json").write_text(json.dumps(meta))
        for tid in meta["test_ids"]:
            path = run / "oracle" / "preds_r1" / f"{tid}.csv"
            stamps, _ = cli._read_pred_csv(path)
            trial = read_trial(Path(wd) / "trials" / tid)
            gt = trial.gt.sample(stamps)[:, :3]
            with open(path, "w") as f:
                f.write("stamp,x,y,z\n")
                for t, p in zip(stamps, gt):
                    f.write(f"{float(t)!r},{float(p[0])!r},{float(p[1])!r},{float(p[2])!r}\n")
        rep = cli.evaluate_run(cfg, wd, "oracle")
        assert rep.overall_rmse == pytest.approx(0.0, abs=1e-9)

    def test_evaluation_reference_is_ground_truth(self, pipeline_dir):
        wd, cfg = pipeline_dir
        rep = cli.evaluate_run(cfg, wd, "mamba")
        assert rep.reference == "ground_truth"


class TestAblate:
    def test_grid_runs_and_reports(self, tmp_path):
        cfg = micro_config()
        cli.cmd_simulate(cfg, tmp_path, seed=8)
        cli.cmd_prepare(cfg, tmp_path, seed=8)
        report = cli.cmd_ablate(cfg, tmp_path, seed=8, models=["mamba", "bilstm"])
        assert len(report["rows"]) == 8  # 2 labels x 2 tags x 2 models
        assert report["missing"] == []
        assert (tmp_path / "reports" / "ablation.json").exists()
        assert (tmp_path / "reports" / "ablation.csv").exists()
        # every cell was evaluated against true ground truth
        for row in report["rows"]:
            assert {"model", "labels", "tags", "rmse_mean", "runs"} <= set(row)


class TestMainEntry:
    def test_cli_error_exit_code(self, tmp_path):
        rc = cli.main(["prepare", "--workdir", str(tmp_path / "nope")])
        assert rc == 1

    def test_cli_simulate_smoke(self, tmp_path):
        rc = cli.main([
            "simulate", "--workdir", str(tmp_path), "--seed", "2",
            "--set", "trajectory.max_duration_s=10",
            "--set", "dataset.n_trials=1", "--n-trials", "1",
        ])
        assert rc == 0
        assert (tmp_path / "manifest.json").exists()
