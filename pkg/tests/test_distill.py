import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from bridgepath.bridge import BridgeParams, LatentPath, marginal_means_and_vars
from bridgepath.config import TrainConfig
from bridgepath.corpus import BOS_ID, EOS_ID, PAD_ID, Dialogue, Vocab
from bridgepath.distill import (
    batch_triplets,
    bridge_latents,
    collate,
    compute_mus,
    contrastive_term,
    distill_kl,
    effective_delta,
    epoch_order,
    init_state,
    kl_term,
    load_checkpoint,
    lr_at,
    mean_positive_residual,
    nll_loss,
    resume_training,
    save_checkpoint,
    teacher_forward,
    total_loss,
    total_loss_batch,
    train,
    write_metrics_csv,
)
from bridgepath.mapper import Triplet, contrastive_loss


VOCAB = Vocab.from_texts(["a b c d e f g h"], min_freq=1)


def dlg(*turns):
    return Dialogue.from_turns(turns, VOCAB)


def tiny_config(**kw):
    defaults = dict(
        K=1, d_model=8, n_heads=2, n_encoder_layers=1, n_decoder_layers=1,
        dropout=0.0, max_len=64, batch_size=4, warmup_steps=0,
        learning_rate=1e-3, max_steps=4, seed=0, window=5,
    )
    defaults.update(kw)
    return TrainConfig(**defaults)


class TestCollate:
    def test_layout_hand_checked(self):
        # vocab ids: a=4 b=5 c=6 d=7 e=8
        d = dlg("a b", "c", "d e")
        batch = collate([d], max_len=64)
        a, b, c, dd, e = (VOCAB.token_to_id[t] for t in "abcde")
        assert batch.src.tolist() == [[a, b, EOS_ID, c, EOS_ID]]
        assert batch.src_seg.tolist() == [[0, 0, 0, 1, 1]]
        assert batch.tgt_in.tolist() == [[BOS_ID, dd, e]]
        assert batch.tgt_out.tolist() == [[dd, e, EOS_ID]]
        assert batch.tgt_mask.all()
        assert batch.n_turns.tolist() == [3]
        assert batch.utt_tokens.tolist() == [[[a, b], [c, PAD_ID], [dd, e]]]
        assert batch.turn_mask.tolist() == [[True, True, True]]

    def test_padding_across_dialogues(self):
        batch = collate([dlg("a", "b"), dlg("a b c", "d", "e f")], max_len=64)
        assert batch.size == 2
        assert batch.src_mask[0].sum() == 2  # "a" + eos
        assert (batch.src_seg[0, 2:] == -1).all()
        assert batch.turn_mask.tolist() == [[True, True, False], [True, True, True]]


class TestLossTerms:
    def test_nll_hand_computed(self):
        # gold probs 1/2 then 1/4: mean nll = (ln2 + ln4)/2 = 1.5 ln2
        log_dists = torch.log(
            torch.tensor(
                [[[0.5, 0.25, 0.25], [0.25, 0.5, 0.25]]], dtype=torch.float64
            )
        )
        targets = torch.tensor([[0, 2]])
        nll = nll_loss(log_dists, targets, torch.ones(1, 2, dtype=torch.bool))
        assert nll.item() == pytest.approx(1.5 * math.log(2), abs=1e-12)

    def test_nll_ignores_padding(self):
        log_dists = torch.log(
            torch.tensor(
                [[[0.5, 0.5], [0.9, 0.1]]], dtype=torch.float64
            )
        )
        targets = torch.tensor([[1, PAD_ID]])
        nll = nll_loss(log_dists, targets)
        assert nll.item() == pytest.approx(math.log(2), abs=1e-12)

    def test_nll_length_mismatch(self):
        with pytest.raises(ValueError):
            nll_loss(torch.zeros(1, 3, 5), torch.zeros(1, 2, dtype=torch.long))

    def test_kl_hand_computed(self):
        # KL((3/4,1/4) || (1/2,1/2)) = 0.75 ln 1.5 + 0.25 ln 0.5
        t = torch.log(torch.tensor([[[0.75, 0.25]]], dtype=torch.float64))
        s = torch.log(torch.tensor([[[0.5, 0.5]]], dtype=torch.float64))
        kl = kl_term(t, s, torch.ones(1, 1, dtype=torch.bool))
        expected = 0.75 * math.log(1.5) + 0.25 * math.log(0.5)
        assert kl.item() == pytest.approx(expected, abs=1e-12)

    def test_kl_zero_on_identical(self):
        t = torch.log_softmax(torch.randn(1, 3, 7, dtype=torch.float64), dim=-1)
        kl = kl_term(t, t, torch.ones(1, 3, dtype=torch.bool))
        assert abs(kl.item()) < 1e-14

    @settings(max_examples=50)
    @given(st.integers(min_value=0, max_value=10**6))
    def test_kl_nonnegative(self, seed):
        g = torch.Generator().manual_seed(seed)
        t = torch.log_softmax(
            torch.randn(2, 3, 5, generator=g, dtype=torch.float64), dim=-1
        )
        s = torch.log_softmax(
            torch.randn(2, 3, 5, generator=g, dtype=torch.float64), dim=-1
        )
        mask = torch.ones(2, 3, dtype=torch.bool)
        assert kl_term(t, s, mask).item() >= -1e-12


class TestTriplets:
    def test_enumeration_counts(self):
        batch = collate(
            [dlg("a", "b"), dlg("a", "b", "c"), dlg("a", "b", "c", "d")],
            max_len=64,
        )
        trips = batch_triplets(batch)
        per_dialogue = {}
        for b, *_ in trips:
            per_dialogue[b] = per_dialogue.get(b, 0) + 1
        # 2 turns: none; 3 turns: 1 triple; 4 turns: C(4,3) = 4
        assert per_dialogue == {1: 1, 2: 4}

    def test_long_dialogue_sampled(self):
        d = dlg("a", "b", "c", "d", "e", "f")
        batch = collate([d], max_len=64)
        with pytest.raises(ValueError):
            batch_triplets(batch)
        g = torch.Generator().manual_seed(0)
        trips = batch_triplets(batch, g)
        assert len(trips) == 4
        assert len(set(trips)) == 4
        for _b, t0, t1, t2 in trips:
            assert 0 <= t0 < t1 < t2 <= 5

    def test_contrastive_term_matches_reference(self):
        # negatives are every other real utterance expectation in the batch
        torch.manual_seed(0)
        batch = collate([dlg("a", "b", "c"), dlg("d e", "f", "g", "h")], max_len=64)
        mus = torch.randn(2, 4, 3, dtype=torch.float64)
        loss, residual = contrastive_term(batch, mus)
        valid = [(b, t) for b in range(2) for t in range(int(batch.n_turns[b]))]
        triplets = []
        for b, t0, t1, t2 in batch_triplets(batch):
            negs = [mus[bb, tt] for bb, tt in valid if (bb, tt) != (b, t1)]
            triplets.append(
                Triplet(t0=t0, t1=t1, t2=t2, mu_t0=mus[b, t0],
                        mu_t1=mus[b, t1], mu_t2=mus[b, t2], negatives=negs)
            )
        assert loss.item() == pytest.approx(
            contrastive_loss(triplets).item(), rel=1e-10
        )
        assert residual.item() > 0

    def test_no_triplets_gives_differentiable_zero(self):
        batch = collate([dlg("a", "b")], max_len=64)
        mus = torch.randn(1, 2, 3, dtype=torch.float64, requires_grad=True)
        loss, _ = contrastive_term(batch, mus)
        assert loss.item() == 0.0
        loss.backward()  # must not blow up
        assert mus.grad is not None


class TestBridgeLatents:
    def test_zero_noise_recovers_interpolant_means(self):
        batch = collate([dlg("a", "b", "c")], max_len=64)
        mus = torch.randn(1, 3, 4, dtype=torch.float64)
        zs = bridge_latents(batch, mus, delta=0.5, eps=torch.zeros_like(mus))
        ref_means, _ = marginal_means_and_vars(
            BridgeParams(mus=mus[0], T=2, delta=0.5)
        )
        assert torch.allclose(zs[0], ref_means)

    def test_unit_noise_recovers_marginal_stddevs(self):
        batch = collate([dlg("a", "b", "c", "d")], max_len=64)
        mus = torch.randn(1, 4, 2, dtype=torch.float64)
        zs = bridge_latents(batch, mus, delta=0.5, eps=torch.ones_like(mus))
        ref_means, ref_vars = marginal_means_and_vars(
            BridgeParams(mus=mus[0], T=3, delta=0.5)
        )
        assert torch.allclose(zs[0] - ref_means, ref_vars.sqrt().unsqueeze(1))

    def test_mixed_horizons_stay_finite(self):
        batch = collate([dlg("a", "b"), dlg("a", "b", "c", "d")], max_len=64)
        mus = torch.randn(2, 4, 3, dtype=torch.float64)
        eps = torch.randn(2, 4, 3, dtype=torch.float64)
        zs = bridge_latents(batch, mus, delta=0.5, eps=eps)
        assert torch.isfinite(zs).all()

    def test_effective_delta_clamps_short_horizons(self):
        assert effective_delta(0.5, 2) == 0.5
        assert effective_delta(0.8, 1) == pytest.approx(0.5)
        assert effective_delta(3.0, 4) == pytest.approx(2.0)


class TestSingleDialogueWrappers:
    def test_teacher_forward_shapes(self):
        cfg = tiny_config()
        state = init_state(cfg, VOCAB)
        state.model.eval()
        d = dlg("a b", "c", "d e")
        log_dists, mus = teacher_forward(d, state.model, state.mapper)
        # one position per response token plus the terminating eos
        assert log_dists.shape == (3, len(VOCAB))
        assert mus.shape == (3, cfg.d_model)
        assert torch.allclose(
            log_dists.exp().sum(-1), torch.ones(3, dtype=torch.float64)
        )

    def test_distill_kl_zero_when_paths_equal_expectations(self):
        cfg = tiny_config()
        state = init_state(cfg, VOCAB)
        state.model.eval()
        d = dlg("a b", "c", "d e")
        log_dists, mus = teacher_forward(d, state.model, state.mapper)
        paths = [LatentPath(zs=mus.detach(), path_index=k) for k in range(3)]
        kl = distill_kl(d, log_dists, state.model, state.mapper, paths)
        assert abs(kl.item()) < 1e-12

    def test_distill_kl_rejects_misaligned_path(self):
        cfg = tiny_config()
        state = init_state(cfg, VOCAB)
        d = dlg("a b", "c", "d e")
        log_dists, _ = teacher_forward(d, state.model, state.mapper)
        bad = LatentPath(zs=torch.zeros(2, cfg.d_model, dtype=torch.float64))
        with pytest.raises(ValueError):
            distill_kl(d, log_dists, state.model, state.mapper, [bad])

    def test_total_loss_finite_and_composed(self):
        cfg = tiny_config()
        state = init_state(cfg, VOCAB)
        state.model.eval()
        g = torch.Generator().manual_seed(1)
        loss, parts = total_loss(dlg("a b", "c", "d e"), state.model,
                                 state.mapper, cfg, g)
        assert torch.isfinite(loss)
        assert loss.item() == pytest.approx(
            cfg.weight_beta * parts["l_beta"]
            + cfg.weight_nll * parts["nll"]
            + cfg.weight_kl * parts["kl"],
            rel=1e-9,
        )
        assert parts["kl"] >= -1e-12


class TestSchedule:
    def test_constant_without_warmup(self):
        assert lr_at(1, 2e-3, 0) == pytest.approx(2e-3)
        assert lr_at(10**6, 2e-3, 0) == pytest.approx(2e-3)

    def test_linear_warmup_then_inverse_sqrt(self):
        base, warm = 1e-3, 4000
        assert lr_at(100, base, warm) == pytest.approx(base * 100 / 4000)
        assert lr_at(4000, base, warm) == pytest.approx(base)
        assert lr_at(16000, base, warm) == pytest.approx(base / 2)

    def test_step_counts_from_one(self):
        with pytest.raises(ValueError):
            lr_at(0, 1e-3, 100)

    @given(st.integers(min_value=1, max_value=10**6))
    def test_never_exceeds_base(self, step):
        assert lr_at(step, 1e-3, 400) <= 1e-3 + 1e-15


class TestEpochOrder:
    def test_is_permutation_and_deterministic(self):
        a = epoch_order(7, 3, 20)
        b = epoch_order(7, 3, 20)
        assert torch.equal(a, b)
        assert sorted(a.tolist()) == list(range(20))

    def test_varies_by_epoch(self):
        assert not torch.equal(epoch_order(7, 0, 20), epoch_order(7, 1, 20))


def small_corpus():
    return [
        dlg("a b", "c d", "e f"),
        dlg("b c", "d", "f g h"),
        dlg("a", "c", "e", "g"),
        dlg("h g", "f e", "d c"),
        dlg("a b c", "d e f", "g h"),
        dlg("c", "e g", "a"),
    ]


class TestTrainLoop:
    def test_runs_and_logs(self, tmp_path):
        cfg = tiny_config(max_steps=4)
        state, log = train(small_corpus(), cfg, VOCAB)
        assert state.step == 4
        assert [row["step"] for row in log] == [1, 2, 3, 4]
        assert all(math.isfinite(row["nll"]) for row in log)
        path = tmp_path / "metrics.csv"
        write_metrics_csv(log, str(path))
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "step,l_beta,nll,kl,lr"
        assert len(lines) == 5

    def test_identical_reruns(self):
        cfg = tiny_config(max_steps=3)
        s1, log1 = train(small_corpus(), cfg, VOCAB)
        s2, log2 = train(small_corpus(), cfg, VOCAB)
        assert log1 == log2
        for p1, p2 in zip(s1.model.parameters(), s2.model.parameters()):
            assert torch.equal(p1, p2)

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            train([], tiny_config(), VOCAB)

    def test_residual_monitor_runs(self):
        cfg = tiny_config(max_steps=1)
        state, _ = train(small_corpus(), cfg, VOCAB)
        r = mean_positive_residual(small_corpus(), state.model, state.mapper)
        assert r >= 0.0 and math.isfinite(r)


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        cfg = tiny_config(max_steps=3)
        state, _ = train(small_corpus(), cfg, VOCAB)
        save_checkpoint(state, str(tmp_path / "ckpt"))
        loaded = load_checkpoint(str(tmp_path / "ckpt"))
        assert loaded.step == 3
        assert loaded.config == cfg
        for (n1, p1), (n2, p2) in zip(
            state.model.named_parameters(), loaded.model.named_parameters()
        ):
            assert n1 == n2 and torch.equal(p1, p2)
        for p1, p2 in zip(state.mapper.parameters(), loaded.mapper.parameters()):
            assert torch.equal(p1, p2)

    def test_resume_matches_uninterrupted_run(self, tmp_path):
        corpus = small_corpus()
        straight, _ = train(corpus, tiny_config(max_steps=6), VOCAB)

        partial, _ = train(corpus, tiny_config(max_steps=3), VOCAB)
        save_checkpoint(partial, str(tmp_path / "ckpt"))
        loaded = load_checkpoint(str(tmp_path / "ckpt"))
        resumed, log = resume_training(loaded, corpus, max_steps=6)
        assert resumed.step == 6
        assert [row["step"] for row in log] == [4, 5, 6]
        for p1, p2 in zip(
            straight.model.parameters(), resumed.model.parameters()
        ):
            assert torch.equal(p1, p2)
        for p1, p2 in zip(
            straight.mapper.parameters(), resumed.mapper.parameters()
        ):
            assert torch.equal(p1, p2)

    def test_fresh_state_checkpoint_has_no_optimizer_moments(self, tmp_path):
        cfg = tiny_config()
        state = init_state(cfg, VOCAB)
        save_checkpoint(state, str(tmp_path / "ckpt"))
        loaded = load_checkpoint(str(tmp_path / "ckpt"))
        assert loaded.step == 0
        assert len(loaded.optimizer.state) == 0


class TestTeacherGradBlocking:
    def test_blocked_teacher_is_constant_target(self):
        cfg = tiny_config(weight_beta=0.0, weight_nll=0.0, K=1)
        state = init_state(cfg, VOCAB)
        state.model.eval()
        with torch.no_grad():
            # move the gates off the identity so teacher and student differ;
            # at init both KL gradients vanish and the comparison is vacuous
            state.model.enc_mix_z += 0.1 * torch.arange(cfg.d_model)
            for layer in state.model.dec_layers:
                layer.mix_z += 0.05 * torch.arange(cfg.d_model)
        batch = collate([dlg("a b", "c", "d e")], max_len=64)
        g = torch.Generator().manual_seed(2)
        loss_blocked, _ = total_loss_batch(
            batch, state.model, state.mapper, cfg, g
        )
        loss_blocked.backward()
        blocked_grads = [
            p.grad.clone() if p.grad is not None else None
            for p in state.model.parameters()
        ]
        state.optimizer.zero_grad()
        cfg_open = tiny_config(
            weight_beta=0.0, weight_nll=0.0, K=1, block_teacher_grad=False
        )
        g = torch.Generator().manual_seed(2)
        loss_open, _ = total_loss_batch(
            batch, state.model, state.mapper, cfg_open, g
        )
        loss_open.backward()
        open_grads = [
            p.grad.clone() if p.grad is not None else None
            for p in state.model.parameters()
        ]
        same = all(
            (a is None and b is None) or torch.allclose(a, b)
            for a, b in zip(blocked_grads, open_grads)
        )
        assert not same
