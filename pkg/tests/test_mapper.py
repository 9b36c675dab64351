import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from bridgepath.mapper import (
    MapperNet,
    Triplet,
    contrastive_loss,
    contrastive_loss_batched,
    embed_utterance,
    embed_utterances_padded,
    map_to_mu,
    positive_residual,
    triplet_distance,
    triplet_interpolant,
    triplet_sigma2,
)


def t64(*vals):
    return torch.tensor(vals, dtype=torch.float64)


class TestEmbedding:
    def test_mean_of_rows(self):
        table = torch.tensor(
            [[0.0, 0.0], [1.0, 2.0], [3.0, 4.0]], dtype=torch.float64
        )
        out = embed_utterance(torch.tensor([1, 2]), table)
        assert torch.allclose(out, t64(2.0, 3.0))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            embed_utterance(torch.tensor([], dtype=torch.long), torch.zeros(3, 2))

    def test_padded_matches_loop(self):
        g = torch.Generator().manual_seed(3)
        table = torch.randn(10, 4, generator=g, dtype=torch.float64)
        tokens = torch.tensor([[1, 2, 3], [4, 5, 0]])
        mask = torch.tensor([[True, True, True], [True, True, False]])
        batched = embed_utterances_padded(tokens, mask, table)
        assert torch.allclose(batched[0], embed_utterance(tokens[0], table))
        assert torch.allclose(batched[1], embed_utterance(tokens[1, :2], table))

    def test_padded_empty_row_rejected(self):
        with pytest.raises(ValueError):
            embed_utterances_padded(
                torch.zeros(1, 2, dtype=torch.long),
                torch.zeros(1, 2, dtype=torch.bool),
                torch.zeros(5, 3, dtype=torch.float64),
            )


class TestMapperNet:
    def test_shape_and_dtype(self):
        net = MapperNet(6, 4)
        out = net(torch.zeros(5, 6, dtype=torch.float64))
        assert out.shape == (5, 4)
        assert out.dtype == torch.float64

    def test_initial_output_has_unit_scale(self):
        # orthogonal init preserves scale: a batch of unit-scale inputs
        # must map to outputs whose typical norm is O(1), not collapsed
        torch.manual_seed(0)
        net = MapperNet(32, 16)
        x = torch.randn(256, 32, dtype=torch.float64)
        rms = net(x).pow(2).mean().sqrt()
        assert 0.3 < rms.item() < 3.0

    def test_deterministic_given_seed(self):
        torch.manual_seed(5)
        a = MapperNet(4, 3)
        torch.manual_seed(5)
        b = MapperNet(4, 3)
        x = torch.randn(2, 4, dtype=torch.float64)
        assert torch.equal(a(x), b(x))

    def test_dim_mismatch_rejected(self):
        net = MapperNet(6, 4)
        with pytest.raises(ValueError):
            map_to_mu(torch.zeros(5, dtype=torch.float64), net)


class TestTripletDistance:
    def test_hand_computed_value(self):
        # t1=1, t2=2: sigma2 = 1*(2-1)/2 = 0.5; interpolant of [0,0] and
        # [2,2] at w=0.5 is [1,1]; residual [0.2, 0]; d = -0.04/(2*0.5)
        d = triplet_distance(t64(0, 0), t64(1.2, 1.0), t64(2, 2), 0, 1, 2)
        assert d.item() == pytest.approx(-0.04, abs=1e-12)

    def test_zero_on_interpolant(self):
        d = triplet_distance(t64(0, 0), t64(1, 1), t64(2, 2), 0, 1, 2)
        assert d.item() == pytest.approx(0.0, abs=1e-15)

    def test_time_ordering_enforced(self):
        with pytest.raises(ValueError):
            triplet_distance(t64(0), t64(1), t64(2), 0, 2, 1)

    def test_sigma2_values(self):
        assert triplet_sigma2(1, 2) == pytest.approx(0.5)
        assert triplet_sigma2(1, 4) == pytest.approx(0.75)
        assert triplet_sigma2(3, 4) == pytest.approx(0.75)

    @settings(max_examples=50)
    @given(st.integers(min_value=0, max_value=10**6))
    def test_nonpositive_and_translation_invariant(self, seed):
        g = torch.Generator().manual_seed(seed)
        mus = torch.randn(3, 4, generator=g, dtype=torch.float64)
        shift = torch.randn(4, generator=g, dtype=torch.float64)
        d = triplet_distance(mus[0], mus[1], mus[2], 0, 1, 3)
        d_shift = triplet_distance(
            mus[0] + shift, mus[1] + shift, mus[2] + shift, 0, 1, 3
        )
        assert d.item() <= 0.0
        assert d_shift.item() == pytest.approx(d.item(), rel=1e-9, abs=1e-12)

    def test_residual_norm(self):
        r = positive_residual(t64(0, 0), t64(1.2, 1.0), t64(2, 2), 1, 2)
        assert r.item() == pytest.approx(0.2, abs=1e-12)


class TestContrastiveLoss:
    def test_equal_pos_neg_gives_log_two(self):
        # one negative with the same distance as the positive: softplus(0)
        tr = Triplet(
            t0=0, t1=1, t2=2,
            mu_t0=t64(0, 0), mu_t1=t64(1, 1), mu_t2=t64(2, 2),
            negatives=[t64(1, 1)],
        )
        assert contrastive_loss([tr]).item() == pytest.approx(math.log(2))

    def test_hand_computed_quarter_ratio(self):
        # positive on the interpolant (d_pos = 0); negative with squared
        # residual ln 4 gives d_neg = -ln4/(2*0.5) = ln(1/4), so the loss
        # is log(1 + 1/4)
        off = math.sqrt(math.log(4.0))
        tr = Triplet(
            t0=0, t1=1, t2=2,
            mu_t0=t64(0.0), mu_t1=t64(1.0), mu_t2=t64(2.0),
            negatives=[t64(1.0 + off)],
        )
        assert contrastive_loss([tr]).item() == pytest.approx(
            math.log(1.25), abs=1e-12
        )

    def test_distant_negatives_drive_loss_to_zero(self):
        tr = Triplet(
            t0=0, t1=1, t2=2,
            mu_t0=t64(0.0), mu_t1=t64(1.0), mu_t2=t64(2.0),
            negatives=[t64(6.0)],
        )
        assert 0 < contrastive_loss([tr]).item() < 1e-10

    def test_requires_negatives(self):
        with pytest.raises(ValueError):
            Triplet(
                t0=0, t1=1, t2=2,
                mu_t0=t64(0.0), mu_t1=t64(1.0), mu_t2=t64(2.0),
                negatives=[],
            )
        with pytest.raises(ValueError):
            contrastive_loss([])

    @settings(max_examples=30)
    @given(st.integers(min_value=0, max_value=10**6))
    def test_always_positive(self, seed):
        g = torch.Generator().manual_seed(seed)
        mus = torch.randn(3, 3, generator=g, dtype=torch.float64)
        negs = [torch.randn(3, generator=g, dtype=torch.float64) for _ in range(4)]
        tr = Triplet(
            t0=0, t1=2, t2=5,
            mu_t0=mus[0], mu_t1=mus[1], mu_t2=mus[2], negatives=negs,
        )
        assert contrastive_loss([tr]).item() > 0.0

    @settings(max_examples=20)
    @given(st.integers(min_value=0, max_value=10**6))
    def test_batched_matches_reference(self, seed):
        g = torch.Generator().manual_seed(seed)
        n, U, d = 3, 5, 4
        mu_t0 = torch.randn(n, d, generator=g, dtype=torch.float64)
        mu_t1 = torch.randn(n, d, generator=g, dtype=torch.float64)
        mu_t2 = torch.randn(n, d, generator=g, dtype=torch.float64)
        candidates = torch.randn(U, d, generator=g, dtype=torch.float64)
        neg_mask = torch.rand(n, U, generator=g) < 0.6
        neg_mask[:, 0] = True  # guarantee at least one negative per row
        times = [(1, 3), (2, 5), (1, 2)]
        w = torch.tensor([t1 / t2 for t1, t2 in times], dtype=torch.float64)
        s2 = torch.tensor(
            [triplet_sigma2(t1, t2) for t1, t2 in times], dtype=torch.float64
        )
        batched = contrastive_loss_batched(
            mu_t0, mu_t1, mu_t2, w, s2, candidates, neg_mask
        )
        triplets = [
            Triplet(
                t0=0, t1=times[i][0], t2=times[i][1],
                mu_t0=mu_t0[i], mu_t1=mu_t1[i], mu_t2=mu_t2[i],
                negatives=[candidates[u] for u in range(U) if neg_mask[i, u]],
            )
            for i in range(n)
        ]
        assert batched.item() == pytest.approx(
            contrastive_loss(triplets).item(), rel=1e-10
        )


def test_interpolant_endpoints():
    a, b = t64(1, 2), t64(5, 6)
    assert torch.allclose(triplet_interpolant(a, b, 0.0, 2.0), a)
    assert torch.allclose(triplet_interpolant(a, b, 2.0, 2.0), b)
