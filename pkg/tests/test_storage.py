import json

import joblib
import pytest
import torch
import yaml
from numpy.testing import assert_array_equal

from gatedsr import storage
from gatedsr.benchmarks import get_benchmark, make_datasets
from gatedsr.config import apply_overrides, dump_config, load_config, parse_override, validate_config
from gatedsr.errors import ConfigError
from gatedsr.numerics import POLICY_INIT_STREAM, RngStream
from gatedsr.policy import PolicyNetwork
from gatedsr.schemas import GateVector, IterationRecord, RunReport, Toggles


# ===================== datasets =====================

def test_dataset_round_trip_is_exact(nguyen1_splits, tmp_path):
    path = tmp_path / "ngm.csv"
    storage.write_dataset(nguyen1_splits.ngm, path)
    back = storage.read_dataset(path, nguyen1_splits.ngm.noise_column_mask)
    assert_array_equal(back.X, nguyen1_splits.ngm.X)
    assert_array_equal(back.y, nguyen1_splits.ngm.y)

    again = tmp_path / "again.csv"
    storage.write_dataset(back, again)
    assert again.read_bytes() == path.read_bytes()


def test_write_splits_refuses_existing_files(nguyen1_splits, tmp_path):
    storage.write_splits(nguyen1_splits, tmp_path)
    with pytest.raises(ConfigError, match="already exists"):
        storage.write_splits(nguyen1_splits, tmp_path)
    storage.write_splits(nguyen1_splits, tmp_path, force=True)


def test_read_splits_restores_noise_mask(tmp_path):
    splits = make_datasets(get_benchmark("Nguyen-9", 2), (20, 20, 20))
    storage.write_splits(splits, tmp_path)
    back = storage.read_splits(tmp_path)
    assert_array_equal(back.eval.noise_column_mask, [False, False, True, True])
    assert json.loads((tmp_path / storage.COLUMNS_FILE).read_text()) == {
        "noise_column_mask": [False, False, True, True]
    }


def test_read_splits_missing_files(tmp_path):
    assert storage.read_splits(tmp_path) is None


def test_atomic_write_leaves_no_temp_files(tmp_path):
    storage.atomic_write_text(tmp_path / "a" / "out.txt", "hello\n")
    assert [p.name for p in (tmp_path / "a").iterdir()] == ["out.txt"]


# ===================== gates, reports, logs =====================

def test_gates_round_trip(tmp_path):
    gates = GateVector(
        probabilities=[0.91, 0.02, 0.4],
        binary=[True, False, False],
        threshold_used=0.55,
        fallback_applied=False,
        seed=3,
        epoch_probabilities=[[0.9, 0.1, 0.5], [0.92, 0.0, 0.3]],
    )
    storage.write_gates(gates, tmp_path / storage.GATES_FILE)
    assert storage.read_gates(tmp_path / storage.GATES_FILE) == gates


def test_collect_reports_sorted(tmp_path):
    for benchmark, seed in (("Nguyen-2", 1), ("Nguyen-1", 1), ("Nguyen-2", 0)):
        report = RunReport(benchmark=benchmark, seed=seed, een=10, uen=3)
        storage.write_report(report, storage.run_directory(tmp_path, benchmark, 0, seed) / storage.REPORT_FILE)
    found = [(r.benchmark, r.seed) for r in storage.collect_reports(tmp_path)]
    assert found == [("Nguyen-1", 1), ("Nguyen-2", 0), ("Nguyen-2", 1)]


def test_run_directory_layout():
    assert storage.run_directory("runs", "Nguyen-3", 10, 7).as_posix() == "runs/Nguyen-3/noise10/seed7"
    assert storage.run_directory("runs", "Nguyen-3", 10, 7, Toggles()).as_posix() == "runs/Nguyen-3/noise10/seed7"
    ablation = Toggles(use_ngm=False, use_ppo=False)
    assert storage.run_directory("runs", "Nguyen-3", 10, 7, ablation).as_posix() == "runs/Nguyen-3/noise10/seed7/no-ngm+no-ppo"


def test_training_log_truncates_and_appends(tmp_path):
    path = tmp_path / storage.LOG_FILE
    record = IterationRecord(iteration=0, een=10, uen=9, baseline=0.1, best_reward=0.5,
                             entropy=1.0, path_entropy=2.0, loss=-0.3)
    with storage.TrainingLog(path) as sink:
        sink(record)
        sink(record.model_copy(update={"iteration": 1}))
    with storage.TrainingLog(path) as sink:
        sink(record)
    lines = path.read_text().splitlines()
    assert len(lines) == 1
    assert IterationRecord.model_validate_json(lines[0]) == record


# ===================== policy checkpoints =====================

def test_policy_checkpoint_round_trip(tmp_path):
    net = PolicyNetwork(10, 8).reset_parameters(RngStream(0, POLICY_INIT_STREAM).torch_generator())
    storage.save_policy(net, tmp_path / storage.POLICY_FILE)
    back = storage.load_policy(tmp_path / storage.POLICY_FILE)
    assert (back.n_tokens, back.hidden_size) == (10, 8)
    for name, tensor in net.state_dict().items():
        assert torch.equal(back.state_dict()[name], tensor)


def test_policy_checkpoint_version_checked(tmp_path):
    path = tmp_path / storage.POLICY_FILE
    joblib.dump({"format_version": 99, "n_tokens": 10, "hidden_size": 8, "blocks": {}}, path)
    with pytest.raises(ConfigError, match="version"):
        storage.load_policy(path)


def test_policy_checkpoint_shape_checked(tmp_path):
    path = tmp_path / storage.POLICY_FILE
    storage.save_policy(PolicyNetwork(10, 8), path)
    payload = joblib.load(path)
    payload["hidden_size"] = 4
    joblib.dump(payload, path)
    with pytest.raises(ConfigError, match="shape"):
        storage.load_policy(path)


# ===================== configuration =====================

def test_default_profile_loads():
    cfg = load_config()
    assert cfg.benchmark == "Nguyen-1"
    assert cfg.trainer.batch_size == 1000
    assert cfg.ngm.lambda_l0 == 0.25
    assert cfg.data.sizes == (20_000, 20, 20)
    assert len(cfg.bench.benchmarks) == 12


def test_overrides_are_typed():
    cfg = load_config(overrides=["trainer.batch_size=64", "toggles.use_ppo=false", "ngm.otsu_scale=1.0"])
    assert cfg.trainer.batch_size == 64
    assert cfg.toggles.use_ppo is False
    assert cfg.ngm.otsu_scale == 1.0


@pytest.mark.parametrize("text", ["trainer.batch_size", "=3", "trainer.batch_size=[1,"])
def test_malformed_override(text):
    with pytest.raises(ConfigError):
        parse_override(text)


def test_override_through_scalar_is_rejected():
    with pytest.raises(ConfigError, match="not a section"):
        apply_overrides({"seed": 1}, ["seed.value=2"])


def test_unknown_key_is_rejected():
    with pytest.raises(ConfigError, match="invalid configuration"):
        load_config(overrides=["trainer.batchsize=64"])


def test_ablation_switches_live_only_in_toggles():
    with pytest.raises(ConfigError, match="invalid configuration"):
        load_config(overrides=["trainer.use_ppo=false"])


def test_fingerprint_tracks_run_settings(small_config):
    assert small_config.fingerprint() == small_config.model_copy().fingerprint()
    moved = small_config.model_copy(update={"output_dir": "elsewhere"})
    assert moved.fingerprint() == small_config.fingerprint()
    ablation = small_config.model_copy(update={"toggles": Toggles(use_path_entropy=False)})
    assert ablation.fingerprint() != small_config.fingerprint()


def test_out_of_range_value_is_rejected():
    with pytest.raises(ConfigError):
        load_config(overrides=["trainer.risk_epsilon=1.5"])


def test_missing_profile(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.yaml")


def test_non_mapping_profile(tmp_path):
    path = tmp_path / "list.yaml"
    path.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_config(path)


def test_dump_config_round_trip(small_config):
    assert validate_config(yaml.safe_load(dump_config(small_config))) == small_config
