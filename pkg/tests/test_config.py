import pytest
from hypothesis import given, strategies as st

from bridgepath.config import (
    ConfigError,
    RunConfig,
    TrainConfig,
    config_from_dict,
    config_to_dict,
    derive_seed,
    load_config,
    parse_config_text,
)


class TestDeriveSeed:
    def test_deterministic(self):
        assert derive_seed(42, "paths") == derive_seed(42, "paths")

    def test_streams_independent(self):
        assert derive_seed(42, "paths") != derive_seed(42, "triplets")
        assert derive_seed(42, "paths") != derive_seed(43, "paths")

    @given(st.integers(min_value=0, max_value=2**62), st.text(max_size=20))
    def test_in_63_bit_range(self, master, stream):
        s = derive_seed(master, stream)
        assert 0 <= s < 2**63


class TestParsing:
    def test_full_roundtrip(self):
        text = """
        # training setup
        K = 3
        learning_rate = 0.001   # inline comment
        block_teacher_grad = false
        decoding = beam
        train_corpus = data/train.jsonl
        """
        cfg = parse_config_text(text)
        assert cfg.K == 3
        assert cfg.learning_rate == pytest.approx(1e-3)
        assert cfg.block_teacher_grad is False
        assert cfg.decoding == "beam"
        assert cfg.train_corpus == "data/train.jsonl"

    def test_unknown_key_names_field_and_line(self):
        with pytest.raises(ConfigError) as exc:
            parse_config_text("K = 1\nbogus_field = 2\n")
        assert "bogus_field" in str(exc.value)
        assert "line 2" in str(exc.value)

    def test_type_error_names_field(self):
        with pytest.raises(ConfigError) as exc:
            parse_config_text("K = not_a_number\n")
        assert "K" in str(exc.value)

    def test_bool_parsing(self):
        assert parse_config_text("encode_per_utterance = yes").encode_per_utterance
        assert not parse_config_text("encode_per_utterance = 0").encode_per_utterance
        with pytest.raises(ConfigError):
            parse_config_text("encode_per_utterance = maybe")

    def test_missing_equals_rejected(self):
        with pytest.raises(ConfigError) as exc:
            parse_config_text("K 3")
        assert "line 1" in str(exc.value)

    def test_invariant_violation_surfaces_as_config_error(self):
        with pytest.raises(ConfigError):
            parse_config_text("K = 0")
        with pytest.raises(ConfigError):
            parse_config_text("learning_rate = -1.0")

    def test_load_from_file(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("seed = 9\nmax_steps = 17\n")
        cfg = load_config(str(p))
        assert (cfg.seed, cfg.max_steps) == (9, 17)


class TestDataclasses:
    def test_defaults_match_published_recipe(self):
        cfg = TrainConfig()
        assert cfg.warmup_steps == 4000
        assert (cfg.adam_beta1, cfg.adam_beta2) == (0.9, 0.98)
        assert cfg.dropout == 0.1
        assert cfg.window == 5
        assert cfg.delta == 0.5

    def test_train_config_projection(self):
        run = RunConfig(K=4, train_corpus="x.jsonl", decoding="greedy")
        tc = run.train_config()
        assert isinstance(tc, TrainConfig)
        assert tc.K == 4
        assert not hasattr(tc, "decoding")

    def test_dict_roundtrip(self):
        cfg = RunConfig(K=2, seed=7, top_k=9)
        again = config_from_dict(config_to_dict(cfg))
        assert again == cfg

    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(K=0)
        with pytest.raises(ValueError):
            TrainConfig(delta=0.0)
        with pytest.raises(ValueError):
            TrainConfig(warmup_steps=-1)
