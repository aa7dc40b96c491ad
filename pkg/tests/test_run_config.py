from __future__ import annotations

import json

import pytest
import yaml

from sketchlu.core.exceptions import ConfigError
from sketchlu.models.run_config import (
    AblationConfig,
    Lemma1Config,
    PrecomputeConfig,
    ScoreConfig,
    TrainConfig,
    config_hash,
    flag_for,
    load_run_config,
)


class TestLoadRunConfig:
    """defaults < config file < flags."""

    def test_defaults(self):
        cfg = load_run_config(TrainConfig, "train")
        assert cfg.hidden == [32, 32]
        assert cfg.epochs == 30

    def test_file_then_flags(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text(yaml.safe_dump({"train": {"epochs": 5, "lr": 0.5}}))
        cfg = load_run_config(TrainConfig, "train", str(path), {"epochs": 7, "lr": None})
        assert cfg.epochs == 7
        assert cfg.lr == 0.5

    def test_nested_bench_section(self, tmp_path):
        path = tmp_path / "bench.yaml"
        path.write_text(yaml.safe_dump({"bench": {"lemma1": {"p": 512, "s": 128}}}))
        cfg = load_run_config(Lemma1Config, "bench.lemma1", str(path))
        assert (cfg.p, cfg.s, cfg.k) == (512, 128, 16)

    def test_flat_mapping(self, tmp_path):
        path = tmp_path / "flat.yaml"
        path.write_text("k_grid: [10, 20]\nm_queries: 5\n")
        cfg = load_run_config(AblationConfig, "bench.ablation", str(path))
        assert cfg.k_grid == [10, 20]
        assert cfg.m_queries == 5

    def test_report_json_reused(self, tmp_path):
        path = tmp_path / "lemma1-abc.json"
        path.write_text(json.dumps({"name": "lemma1", "config": {"p": 300, "trials": 3}, "metrics": {}}))
        cfg = load_run_config(Lemma1Config, "bench.lemma1", str(path))
        assert (cfg.p, cfg.trials) == (300, 3)

    def test_multiple_flags_become_lists(self):
        cfg = load_run_config(AblationConfig, "bench.ablation", None, {"s_grid": (64, 128), "k_grid": ()})
        assert cfg.s_grid == [64, 128]
        assert cfg.k_grid == [10, 20, 40, 80]


class TestValidation:
    """Errors name the offending flag."""

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("train:\n  epochz: 3\n")
        with pytest.raises(ConfigError, match="--epochz"):
            load_run_config(TrainConfig, "train", str(path))

    def test_flag_names(self):
        with pytest.raises(ConfigError, match="--sketch-size"):
            load_run_config(PrecomputeConfig, "precompute", None, {"s": 0})
        assert flag_for("k0") == "--lanczos-hm-iter"
        assert flag_for("data_seed") == "--data-seed"

    def test_empty_rank(self):
        with pytest.raises(ConfigError):
            load_run_config(PrecomputeConfig, "precompute", None, {"k0": 0, "k1": 0})

    def test_idx_needs_images(self):
        with pytest.raises(ConfigError, match="--images"):
            load_run_config(TrainConfig, "train", None, {"data_source": "idx"})

    def test_basis_needed_except_diag_laplace(self):
        with pytest.raises(ConfigError):
            load_run_config(ScoreConfig, "score", None, {"basis": "", "method": "slu"})
        cfg = load_run_config(ScoreConfig, "score", None, {"basis": "", "method": "diag_laplace"})
        assert cfg.method == "diag_laplace"

    def test_missing_config_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(TrainConfig, "train", str(tmp_path / "absent.yaml"))

    def test_not_a_mapping(self, tmp_path):
        path = tmp_path / "list.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigError):
            load_run_config(TrainConfig, "train", str(path))


class TestConfigHash:
    """Stable 12-hex-digit config digests."""

    def test_stable_and_order_free(self):
        assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
        assert len(config_hash({"a": 1})) == 12

    def test_model_and_snapshot_agree(self):
        cfg = load_run_config(Lemma1Config, "bench.lemma1")
        assert config_hash(cfg) == config_hash(cfg.model_dump(mode="json"))
        assert config_hash(cfg) != config_hash(cfg.model_copy(update={"seed": 1}))
