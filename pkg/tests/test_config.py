"""Tests for the experiment config schema, defaults, and sweep expansion."""

import json

import pytest

from fedcalib.config import (
    expand_sweep,
    config_echo,
    load_config,
    parse_config,
)
from fedcalib.errors import ConfigError


class TestDefaults:
    def test_empty_object_gives_reference_defaults(self):
        cfg = parse_config({})
        assert cfg.setting == "in_distribution"
        assert cfg.model.lora_rank == 2
        assert cfg.model.lora_dropout == 0.25
        assert cfg.model.lora_scale == pytest.approx(0.5)
        assert cfg.federation.rounds == 50
        assert cfg.federation.local_epochs == 1
        assert cfg.federation.batch_size == 32
        assert cfg.federation.learning_rate == pytest.approx(1e-3)
        assert cfg.federation.warmup_lr == pytest.approx(1e-5)
        assert cfg.partition.alpha == pytest.approx(0.5)
        assert cfg.metrics.bins == 15
        # in-distribution mirrors the 100-client, 10%-participation setup
        assert cfg.partition.num_clients == 100
        assert cfg.federation.participation_rate == pytest.approx(0.1)
        assert cfg.data.synthetic is not None

    def test_setting_dependent_defaults(self):
        b2n = parse_config({"setting": "base_to_new"})
        assert b2n.partition.kind == "base_to_new"
        assert b2n.partition.num_clients == 10
        assert b2n.federation.participation_rate == 1.0
        dg = parse_config({"setting": "domain_generalization"})
        assert dg.partition.kind == "domain"
        assert dg.partition.clients_per_domain == 2
        assert dg.data.synthetic.domain_count == 4

    def test_method_name(self):
        cfg = parse_config({"model": {"head_kind": "lora_both"}, "loss": {"aux_kind": "mdca"}})
        assert cfg.method_name() == "lora_both+mdca"
        assert parse_config({}).method_name() == "zero_shot"


class TestValidation:
    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="unknown key 'optimizer'"):
            parse_config({"optimizer": {}})

    def test_unknown_nested_key_names_path(self):
        with pytest.raises(ConfigError, match="model.width"):
            parse_config({"model": {"width": 3}})

    def test_zero_rank_rejected_with_constraint(self):
        with pytest.raises(ConfigError, match="lora_rank.*>= 1"):
            parse_config({"model": {"lora_rank": 0}})

    def test_both_data_sources_rejected(self):
        with pytest.raises(ConfigError, match="exactly one"):
            parse_config(
                {"data": {"synthetic": {}, "embedding_files": {"train": "a", "test": "b", "prototypes": "c"}}}
            )

    def test_missing_embedding_file_key(self):
        with pytest.raises(ConfigError, match="embedding_files.test"):
            parse_config({"data": {"embedding_files": {"train": "a", "prototypes": "c"}}})

    def test_setting_partition_consistency(self):
        with pytest.raises(ConfigError, match="base_to_new"):
            parse_config({"setting": "base_to_new", "partition": {"kind": "dirichlet"}})
        with pytest.raises(ConfigError, match="domain"):
            parse_config({"setting": "domain_generalization", "partition": {"kind": "dirichlet"}})

    def test_bad_types_rejected(self):
        with pytest.raises(ConfigError, match="seed"):
            parse_config({"seed": "abc"})
        with pytest.raises(ConfigError, match="rounds"):
            parse_config({"federation": {"rounds": 1.5}})
        with pytest.raises(ConfigError, match="temperatures"):
            parse_config({"metrics": {"temperatures": [1.0, -2.0]}})

    def test_bad_setting_rejected(self):
        with pytest.raises(ConfigError, match="setting"):
            parse_config({"setting": "offline"})


class TestLoadConfig:
    def test_file_roundtrip(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"seed": 7, "model": {"head_kind": "prompt"}}))
        cfg = load_config(path)
        assert cfg.seed == 7
        assert cfg.model.head_kind == "prompt"

    def test_invalid_json_names_file(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{nope")
        with pytest.raises(ConfigError, match="broken.json"):
            load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(tmp_path / "absent.json")


class TestEcho:
    def test_echo_is_json_serializable_and_complete(self):
        cfg = parse_config({"seed": 3, "metrics": {"temperatures": [0.5, 2.0]}})
        echo = config_echo(cfg)
        text = json.dumps(echo, sort_keys=True)
        back = json.loads(text)
        assert back["seed"] == 3
        assert back["model"]["lora_rank"] == 2
        assert back["metrics"]["temperatures"] == [0.5, 2.0]
        assert back["federation"]["rounds"] == 50


class TestShippedConfigs:
    def test_all_reference_configs_parse(self):
        from pathlib import Path

        config_dir = Path(__file__).resolve().parents[1] / "configs"
        paths = sorted(config_dir.glob("*.json"))
        assert len(paths) >= 8
        for path in paths:
            cfg = load_config(path)
            assert cfg.federation.rounds >= 1


class TestSweep:
    def test_no_sweep_single_point(self):
        cfg = parse_config({})
        points = expand_sweep(cfg)
        assert len(points) == 1
        assert points[0][0] == {}
        assert points[0][1] is cfg

    def test_cross_product_and_derived_seeds(self):
        cfg = parse_config({"sweep": {"alpha": [0.1, 1.0], "rank": [2, 4]}})
        points = expand_sweep(cfg)
        assert len(points) == 4
        seeds = {sub.seed for _, sub in points}
        assert len(seeds) == 4  # every grid point gets its own derived seed
        for point, sub in points:
            assert sub.partition.alpha == point["alpha"]
            assert sub.model.lora_rank == point["rank"]
            assert sub.sweep == {}

    def test_derived_seeds_reproducible(self):
        a = expand_sweep(parse_config({"sweep": {"rounds": [5, 10]}}))
        b = expand_sweep(parse_config({"sweep": {"rounds": [5, 10]}}))
        assert [sub.seed for _, sub in a] == [sub.seed for _, sub in b]

    def test_head_kind_and_participation_axes(self):
        cfg = parse_config({"sweep": {"head_kind": ["prompt", "lora_both"], "participation": [0.5, 1.0]}})
        points = expand_sweep(cfg)
        assert len(points) == 4
        heads = {sub.model.head_kind for _, sub in points}
        assert heads == {"prompt", "lora_both"}

    def test_bad_sweep_values(self):
        with pytest.raises(ConfigError, match="sweep.alpha"):
            parse_config({"sweep": {"alpha": []}})
        with pytest.raises(ConfigError, match="sweep.rank"):
            parse_config({"sweep": {"rank": [0]}})
        with pytest.raises(ConfigError, match="participation"):
            parse_config({"sweep": {"participation": [1.5]}})
        with pytest.raises(ConfigError, match="unknown key 'sweep.sigma'"):
            parse_config({"sweep": {"sigma": [0.1]}})
