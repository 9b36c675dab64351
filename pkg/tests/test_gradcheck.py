import pytest
import torch
import torch.nn as nn

from bridgepath.config import TrainConfig
from bridgepath.corpus import SynthSpec, synth_corpus
from bridgepath.distill import collate, init_state, total_loss_batch
from bridgepath.gradcheck import format_report, gradient_check, parameter_groups


def cubic_setup():
    p = nn.Parameter(torch.tensor([0.3, -1.2, 0.7], dtype=torch.float64))
    groups = {"only": [("p", p)]}

    def loss_fn():
        return (p**3).sum()

    return p, groups, loss_fn


class TestHarness:
    def test_analytic_cubic_passes(self):
        _p, groups, loss_fn = cubic_setup()
        errors = gradient_check(loss_fn, groups)
        assert errors["only"] < 1e-8

    def test_corrupted_gradient_detected(self):
        _p, groups, loss_fn = cubic_setup()
        errors = gradient_check(loss_fn, groups, corrupt_group="only")
        assert errors["only"] > 1e-2

    def test_unknown_corrupt_group(self):
        _p, groups, loss_fn = cubic_setup()
        with pytest.raises(ValueError):
            gradient_check(loss_fn, groups, corrupt_group="nope")

    def test_coordinate_subsampling(self):
        p = nn.Parameter(torch.linspace(-1, 1, 50, dtype=torch.float64))
        groups = {"only": [("p", p)]}
        errors = gradient_check(
            lambda: (p**2).sum(), groups, max_coords_per_param=5
        )
        assert errors["only"] < 1e-8

    def test_parameter_restored_after_check(self):
        p, groups, loss_fn = cubic_setup()
        before = p.detach().clone()
        gradient_check(loss_fn, groups)
        assert torch.equal(p.detach(), before)


class TestFullModel:
    def test_training_objective_gradients(self):
        # subsampled coordinates; the acceptance suite runs the dense check
        synth = synth_corpus(
            SynthSpec(templates=2, branching=1, turns=3, vocab_size=10, seed=3)
        )
        cfg = TrainConfig(
            K=1, d_model=8, n_heads=2, n_encoder_layers=1,
            n_decoder_layers=1, dropout=0.0, seed=0,
        )
        state = init_state(cfg, synth.vocab)
        batch = collate(synth.dialogues, cfg.max_len)

        def loss_fn():
            g = torch.Generator()
            g.manual_seed(99)
            loss, _ = total_loss_batch(batch, state.model, state.mapper, cfg, g)
            return loss

        groups = parameter_groups(state.model, state.mapper)
        assert "mapper" in groups
        errors = gradient_check(loss_fn, groups, max_coords_per_param=2)
        assert errors, "no groups checked"
        for name, err in errors.items():
            assert err < 1e-4, f"group {name}: {err}"


class TestReport:
    def test_pass_and_fail_lines(self):
        text = format_report({"encoder": 1e-6, "decoder": 1e-2}, tol=1e-4)
        assert "encoder" in text and "pass" in text
        assert "decoder" in text and "FAIL" in text
        assert "gradient check FAILED" in text

    def test_all_pass_summary(self):
        text = format_report({"encoder": 1e-6}, tol=1e-4)
        assert "all groups pass" in text
