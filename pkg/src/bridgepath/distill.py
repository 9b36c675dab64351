"""Joint training objective and optimization loop.

One step optimizes three terms at once: the contrastive mapping loss,
teacher-forced NLL with expectation mixup, and a K-path self-distillation
KL where the expectation-conditioned distribution (a fixed target by
default) supervises the path-conditioned one.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import Tensor

from .bridge import LatentPath
from .config import TrainConfig, config_from_dict, config_to_dict, derive_seed
from .corpus import BOS_ID, EOS_ID, PAD_ID, Dialogue, Vocab, window_corpus
from .mapper import MapperNet, contrastive_loss_batched
from .seq2seq import SegmentedContext, Seq2SeqModel, log_softmax

CHECKPOINT_FORMAT_VERSION = 1


# -- batching --------------------------------------------------------------


@dataclass
class Batch:
    src: Tensor  # (B, S) context token ids
    src_mask: Tensor  # (B, S) bool, True at real tokens
    src_seg: Tensor  # (B, S) segment ids, -1 at padding
    tgt_in: Tensor  # (B, P) bos-shifted decoder input
    tgt_out: Tensor  # (B, P) gold targets incl. trailing eos
    tgt_mask: Tensor  # (B, P) bool
    utt_tokens: Tensor  # (B, Tmax+1, L) per-utterance ids
    utt_mask: Tensor  # (B, Tmax+1, L) bool
    turn_mask: Tensor  # (B, Tmax+1) bool, True at real turns
    n_turns: Tensor  # (B,) number of utterances per dialogue

    @property
    def size(self) -> int:
        return self.src.shape[0]


def collate(dialogues: Sequence[Dialogue], max_len: int) -> Batch:
    """Pad a list of dialogues into one batch."""
    ctxs = [
        SegmentedContext.from_utterances(d.context).truncate_left(max_len)
        for d in dialogues
    ]
    B = len(dialogues)
    S = max(len(c.tokens) for c in ctxs)
    src = torch.full((B, S), PAD_ID, dtype=torch.long)
    seg = torch.full((B, S), -1, dtype=torch.long)
    for b, c in enumerate(ctxs):
        src[b, : len(c.tokens)] = torch.tensor(c.tokens)
        seg[b, : len(c.tokens)] = torch.tensor(c.segments)
    src_mask = src != PAD_ID

    tgts = [list(d.response.tokens) + [EOS_ID] for d in dialogues]
    P = max(len(t) for t in tgts)
    tgt_in = torch.full((B, P), PAD_ID, dtype=torch.long)
    tgt_out = torch.full((B, P), PAD_ID, dtype=torch.long)
    for b, t in enumerate(tgts):
        tgt_in[b, 0] = BOS_ID
        tgt_in[b, 1 : len(t)] = torch.tensor(t[:-1])
        tgt_out[b, : len(t)] = torch.tensor(t)
    tgt_mask = tgt_out != PAD_ID

    n_turns = torch.tensor([len(d) for d in dialogues], dtype=torch.long)
    Tmax1 = int(n_turns.max())
    L = max(len(u.tokens) for d in dialogues for u in d.utterances)
    utt = torch.full((B, Tmax1, L), PAD_ID, dtype=torch.long)
    for b, d in enumerate(dialogues):
        for t, u in enumerate(d.utterances):
            utt[b, t, : len(u.tokens)] = torch.tensor(u.tokens)
    utt_mask = utt != PAD_ID
    turn_mask = (
        torch.arange(Tmax1).unsqueeze(0) < n_turns.unsqueeze(1)
    )
    return Batch(
        src=src,
        src_mask=src_mask,
        src_seg=seg,
        tgt_in=tgt_in,
        tgt_out=tgt_out,
        tgt_mask=tgt_mask,
        utt_tokens=utt,
        utt_mask=utt_mask,
        turn_mask=turn_mask,
        n_turns=n_turns,
    )


def compute_mus(batch: Batch, model: Seq2SeqModel, mapper: MapperNet) -> Tensor:
    """Expectations (B, Tmax+1, d) for every real turn in the batch.

    Invalid turn slots hold unspecified values; mask with ``turn_mask``.
    """
    B, T1, L = batch.utt_tokens.shape
    flat = batch.utt_tokens.view(B * T1, L)
    mask = batch.utt_mask.view(B * T1, L)
    counts = mask.sum(dim=1, keepdim=True).clamp(min=1)
    emb = model.embedding.weight[flat] * mask.unsqueeze(-1)
    vecs = emb.sum(dim=1) / counts
    return mapper(vecs).view(B, T1, -1)


# -- loss terms ------------------------------------------------------------


def batch_triplets(
    batch: Batch, generator: Optional[torch.Generator] = None
) -> list[tuple[int, int, int, int]]:
    """(dialogue, t0, t1, t2) index tuples: all ordered triples per
    dialogue when it has at most 5 turns, else a random sample of 4."""
    out = []
    for b in range(batch.size):
        n = int(batch.n_turns[b])
        if n < 3:
            continue
        triples = list(itertools.combinations(range(n), 3))
        if n > 5:
            if generator is None:
                raise ValueError("sampling triplets requires a generator")
            idx = torch.randperm(len(triples), generator=generator)[:4]
            triples = [triples[int(i)] for i in idx]
        out.extend((b, t0, t1, t2) for t0, t1, t2 in triples)
    return out


def contrastive_term(
    batch: Batch,
    mus: Tensor,
    generator: Optional[torch.Generator] = None,
) -> tuple[Tensor, Tensor]:
    """Contrastive loss and mean positive residual over the batch.

    Negatives for each triplet are all other utterance expectations in
    the mini-batch, used as replacement middles.
    """
    trips = batch_triplets(batch, generator)
    d = mus.shape[-1]
    flat_mus = mus.view(-1, d)
    valid = batch.turn_mask.view(-1)
    cand_idx = valid.nonzero(as_tuple=True)[0]
    candidates = flat_mus[cand_idx]  # (U, d)
    pos_in_cand = torch.full((batch.turn_mask.numel(),), -1, dtype=torch.long)
    pos_in_cand[cand_idx] = torch.arange(cand_idx.numel())

    if not trips or cand_idx.numel() < 2:
        zero = mus.sum() * 0.0
        return zero, zero

    T1 = batch.turn_mask.shape[1]
    b_idx = torch.tensor([t[0] for t in trips])
    t0 = torch.tensor([t[1] for t in trips], dtype=torch.float64)
    t1 = torch.tensor([t[2] for t in trips], dtype=torch.float64)
    t2 = torch.tensor([t[3] for t in trips], dtype=torch.float64)
    mu_t0 = mus[b_idx, t0.long()]
    mu_t1 = mus[b_idx, t1.long()]
    mu_t2 = mus[b_idx, t2.long()]
    t1_over_t2 = t1 / t2
    sigma2 = t1 * (t2 - t1) / t2

    mid_global = b_idx * T1 + t1.long()
    neg_mask = torch.ones(len(trips), cand_idx.numel(), dtype=torch.bool)
    neg_mask[torch.arange(len(trips)), pos_in_cand[mid_global]] = False

    loss = contrastive_loss_batched(
        mu_t0, mu_t1, mu_t2, t1_over_t2, sigma2, candidates, neg_mask
    )
    with torch.no_grad():
        w = t1_over_t2.unsqueeze(1)
        interp = (1 - w) * mu_t0 + w * mu_t2
        residual = (mu_t1 - interp).norm(dim=1).mean()
    return loss, residual


def mean_positive_residual(
    dialogues: Sequence[Dialogue], model: Seq2SeqModel, mapper: MapperNet
) -> float:
    """Monitoring helper: mean triplet residual over a corpus."""
    batch = collate(dialogues, model.max_len)
    with torch.no_grad():
        mus = compute_mus(batch, model, mapper)
        trips = batch_triplets(batch)
        if not trips:
            return 0.0
        b_idx = torch.tensor([t[0] for t in trips])
        t1 = torch.tensor([t[2] for t in trips], dtype=torch.float64)
        t2 = torch.tensor([t[3] for t in trips], dtype=torch.float64)
        mu_t0 = mus[b_idx, [t[1] for t in trips]]
        mu_t1 = mus[b_idx, [t[2] for t in trips]]
        mu_t2 = mus[b_idx, [t[3] for t in trips]]
        w = (t1 / t2).unsqueeze(1)
        interp = (1 - w) * mu_t0 + w * mu_t2
        return float((mu_t1 - interp).norm(dim=1).mean())


def forward_log_dists(
    batch: Batch,
    model: Seq2SeqModel,
    z_turns: Tensor,
) -> Tensor:
    """Teacher-forced forward with per-turn latents ``z_turns``
    (B, Tmax+1, d): context turns gate the encoder outputs, the final
    turn's latent gates every decoder layer. Returns (B, P, V) log-probs.
    """
    e = model.encode_tokens(batch.src, batch.src_mask, batch.src_seg)
    e_hat = model.apply_encoder_mixup(e, batch.src_seg, z_turns)
    z_T = z_turns[torch.arange(batch.size), batch.n_turns - 1]
    logits = model.decode_tokens(
        batch.tgt_in, e_hat, batch.src_mask, z_T, batch.tgt_mask
    )
    return log_softmax(logits)


def nll_loss(log_dists: Tensor, targets: Tensor, tgt_mask: Optional[Tensor] = None) -> Tensor:
    """Mean over (non-pad) target positions of -log P(gold token)."""
    if log_dists.shape[:-1] != targets.shape:
        raise ValueError(
            f"length mismatch: {tuple(log_dists.shape[:-1])} vs {tuple(targets.shape)}"
        )
    if tgt_mask is None:
        tgt_mask = targets != PAD_ID
    picked = log_dists.gather(-1, targets.clamp(min=0).unsqueeze(-1)).squeeze(-1)
    return -(picked * tgt_mask).sum() / tgt_mask.sum()


def kl_term(
    teacher_log: Tensor, student_log: Tensor, tgt_mask: Tensor
) -> Tensor:
    """Token-mean KL(teacher || student) over valid target positions."""
    p = teacher_log.exp()
    per_pos = (p * (teacher_log - student_log)).sum(dim=-1)
    return (per_pos * tgt_mask).sum() / tgt_mask.sum()


def effective_delta(delta: float, T: int) -> float:
    """Clamp delta below the horizon so the endpoint variance stays valid."""
    return min(delta, 0.5 * T)


def bridge_latents(
    batch: Batch,
    mus: Tensor,
    delta: float,
    eps: Tensor,
    var_scale: float = 1.0,
) -> Tensor:
    """Reparameterized per-turn bridge samples (B, Tmax+1, d).

    Interior means are the interpolant of the two endpoint expectations;
    variances are parameter-free, so gradients flow only through the
    endpoints. ``eps`` is standard normal of the same shape.
    """
    B, T1, d = mus.shape
    ts = torch.arange(T1, dtype=mus.dtype).unsqueeze(0)  # (1, T1)
    T = (batch.n_turns - 1).to(mus.dtype).unsqueeze(1)  # (B, 1)
    frac = (ts / T).clamp(max=1.0)
    mu0 = mus[:, 0, :].unsqueeze(1)
    muT = mus[torch.arange(B), batch.n_turns - 1].unsqueeze(1)
    means = mu0 * (1 - frac.unsqueeze(-1)) + muT * frac.unsqueeze(-1)
    var = ts * (T - ts) / T  # (B, T1)
    delta_eff = torch.tensor(
        [effective_delta(delta, int(n) - 1) for n in batch.n_turns],
        dtype=mus.dtype,
    ).unsqueeze(1)
    end_var = 2.0 * delta_eff * (T - delta_eff) / T
    is_end = (ts == 0) | (ts == T)
    var = torch.where(is_end, end_var.expand_as(var), var).clamp(min=0.0)
    return means + (var * var_scale).sqrt().unsqueeze(-1) * eps


def total_loss_batch(
    batch: Batch,
    model: Seq2SeqModel,
    mapper: MapperNet,
    config: TrainConfig,
    path_generator: torch.Generator,
    triplet_generator: Optional[torch.Generator] = None,
) -> tuple[Tensor, dict[str, float]]:
    """Full objective on one batch; returns (loss, term values)."""
    mus = compute_mus(batch, model, mapper)
    l_beta, residual = contrastive_term(batch, mus, triplet_generator)
    teacher_log = forward_log_dists(batch, model, mus)
    nll = nll_loss(teacher_log, batch.tgt_out, batch.tgt_mask)

    kl_target = teacher_log.detach() if config.block_teacher_grad else teacher_log
    kls = []
    if config.weight_kl != 0.0:
        for _k in range(config.K):
            eps = torch.randn(
                mus.shape, generator=path_generator, dtype=mus.dtype
            )
            zs = bridge_latents(batch, mus, config.delta, eps)
            student_log = forward_log_dists(batch, model, zs)
            kls.append(kl_term(kl_target, student_log, batch.tgt_mask))
        kl = torch.stack(kls).mean()
    else:
        kl = torch.zeros((), dtype=mus.dtype)

    loss = (
        config.weight_beta * l_beta
        + config.weight_nll * nll
        + config.weight_kl * kl
    )
    parts = {
        "l_beta": l_beta.detach().item(),
        "nll": nll.detach().item(),
        "kl": kl.detach().item(),
        "residual": residual.detach().item(),
    }
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss; term values: {parts}")
    return loss, parts


# -- single-dialogue operation wrappers ------------------------------------


def teacher_forward(
    d: Dialogue, model: Seq2SeqModel, mapper: MapperNet
) -> tuple[Tensor, Tensor]:
    """Expectation-mixup teacher-forced forward for one dialogue.

    Returns per-position log-distributions (|x_T|+1, V) -- the gold
    response tokens plus the terminating eos -- and the expectations
    (T+1, d).
    """
    batch = collate([d], model.max_len)
    mus = compute_mus(batch, model, mapper)
    log_dists = forward_log_dists(batch, model, mus)
    return log_dists[0], mus[0]


def distill_kl(
    d: Dialogue,
    teacher_log_dists: Tensor,
    model: Seq2SeqModel,
    mapper: MapperNet,
    paths: Sequence[LatentPath],
    block_teacher_grad: bool = True,
) -> Tensor:
    """K-path distillation KL for one dialogue against a teacher forward."""
    batch = collate([d], model.max_len)
    target = (
        teacher_log_dists.detach() if block_teacher_grad else teacher_log_dists
    )
    kls = []
    for path in paths:
        if path.zs.shape[0] != len(d):
            raise ValueError(
                f"path length {path.zs.shape[0]} != dialogue turns {len(d)}"
            )
        student_log = forward_log_dists(batch, model, path.zs.unsqueeze(0))
        kls.append(kl_term(target.unsqueeze(0), student_log, batch.tgt_mask))
    return torch.stack(kls).mean()


def total_loss(
    d: Dialogue,
    model: Seq2SeqModel,
    mapper: MapperNet,
    config: TrainConfig,
    rng: torch.Generator,
) -> tuple[Tensor, dict[str, float]]:
    """Full objective for a single dialogue (batch of one)."""
    return total_loss_batch(collate([d], model.max_len), model, mapper, config, rng)


# -- optimization ----------------------------------------------------------


def lr_at(step: int, base: float, warmup: int) -> float:
    """Inverse-square-root schedule with linear warmup; step counts from 1."""
    if step < 1:
        raise ValueError("step counts from 1")
    if warmup == 0:
        return base
    return base * min(step / warmup, math.sqrt(warmup / step))


@dataclass
class TrainState:
    model: Seq2SeqModel
    mapper: MapperNet
    vocab: Vocab
    optimizer: torch.optim.Adam
    config: TrainConfig
    step: int = 0
    path_generator: torch.Generator = field(default_factory=torch.Generator)
    triplet_generator: torch.Generator = field(default_factory=torch.Generator)


def init_state(config: TrainConfig, vocab: Vocab) -> TrainState:
    torch.manual_seed(derive_seed(config.seed, "dropout"))
    model = Seq2SeqModel(
        vocab_size=len(vocab),
        d_model=config.d_model,
        n_heads=config.n_heads,
        n_encoder_layers=config.n_encoder_layers,
        n_decoder_layers=config.n_decoder_layers,
        dropout=config.dropout,
        max_len=config.max_len,
        encode_per_utterance=config.encode_per_utterance,
    )
    mapper = MapperNet(config.d_model, config.d_model)
    optimizer = torch.optim.Adam(
        list(model.parameters()) + list(mapper.parameters()),
        lr=config.learning_rate,
        betas=(config.adam_beta1, config.adam_beta2),
        eps=config.adam_eps,
    )
    state = TrainState(
        model=model,
        mapper=mapper,
        vocab=vocab,
        optimizer=optimizer,
        config=config,
    )
    state.path_generator.manual_seed(derive_seed(config.seed, "paths"))
    state.triplet_generator.manual_seed(derive_seed(config.seed, "triplets"))
    return state


def epoch_order(seed: int, epoch: int, n: int) -> Tensor:
    """Deterministic shuffle for one epoch, independent of resume point."""
    g = torch.Generator()
    g.manual_seed(derive_seed(seed, f"epoch{epoch}"))
    return torch.randperm(n, generator=g)


def corpus_nll(
    dialogues: Sequence[Dialogue],
    model: Seq2SeqModel,
    mapper: MapperNet,
    batch_size: int = 64,
) -> float:
    """Token-mean NLL under the expectation-mixup teacher forward."""
    was_training = model.training
    model.eval()
    mapper.eval()
    total = 0.0
    count = 0
    with torch.no_grad():
        for i in range(0, len(dialogues), batch_size):
            batch = collate(dialogues[i : i + batch_size], model.max_len)
            mus = compute_mus(batch, model, mapper)
            log_dists = forward_log_dists(batch, model, mus)
            picked = log_dists.gather(
                -1, batch.tgt_out.clamp(min=0).unsqueeze(-1)
            ).squeeze(-1)
            total += float(-(picked * batch.tgt_mask).sum())
            count += int(batch.tgt_mask.sum())
    if was_training:
        model.train()
        mapper.train()
    return total / max(count, 1)


def train(
    corpus: Sequence[Dialogue],
    config: TrainConfig,
    vocab: Vocab,
    val_corpus: Optional[Sequence[Dialogue]] = None,
    checkpoint_dir: Optional[str] = None,
    metrics_path: Optional[str] = None,
    state: Optional[TrainState] = None,
    max_steps: Optional[int] = None,
) -> tuple[TrainState, list[dict]]:
    """Run the optimization loop.

    The corpus is windowed, shuffled per epoch with a stateless order
    derived from (seed, epoch), and iterated in batches until
    ``max_steps`` or early stop on validation perplexity. Passing a
    loaded ``state`` resumes from its step; the resumed trajectory is
    identical to an uninterrupted run.
    """
    if not corpus:
        raise ValueError("empty corpus")
    torch.set_num_threads(max(config.threads, 1))
    examples = window_corpus(corpus, config.window)
    val_examples = (
        window_corpus(val_corpus, config.window) if val_corpus else None
    )
    if state is None:
        state = init_state(config, vocab)
    if max_steps is None:
        max_steps = config.max_steps
    state.model.train()
    state.mapper.train()
    log: list[dict] = []
    steps_per_epoch = max(1, math.ceil(len(examples) / config.batch_size))
    best_val = float("inf")
    epochs_since_best = 0
    last_epoch = -1

    for step in range(state.step, max_steps):
        epoch = step // steps_per_epoch
        offset = step % steps_per_epoch
        if epoch != last_epoch:
            order = epoch_order(config.seed, epoch, len(examples))
            last_epoch = epoch
        idx = order[
            offset * config.batch_size : (offset + 1) * config.batch_size
        ]
        batch = collate([examples[int(i)] for i in idx], config.max_len)

        lr = lr_at(step + 1, config.learning_rate, config.warmup_steps)
        for group in state.optimizer.param_groups:
            group["lr"] = lr
        state.optimizer.zero_grad()
        loss, parts = total_loss_batch(
            batch,
            state.model,
            state.mapper,
            config,
            state.path_generator,
            state.triplet_generator,
        )
        loss.backward()
        if config.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(
                [p for g in state.optimizer.param_groups for p in g["params"]],
                config.grad_clip,
            )
        state.optimizer.step()
        state.step = step + 1
        log.append(
            {
                "step": state.step,
                "l_beta": parts["l_beta"],
                "nll": parts["nll"],
                "kl": parts["kl"],
                "lr": lr,
            }
        )

        if (
            config.checkpoint_interval > 0
            and checkpoint_dir
            and state.step % config.checkpoint_interval == 0
        ):
            save_checkpoint(state, checkpoint_dir)

        at_epoch_end = offset == steps_per_epoch - 1
        if at_epoch_end and val_examples:
            val_ppl = math.exp(
                corpus_nll(val_examples, state.model, state.mapper)
            )
            if val_ppl < best_val - 1e-12:
                best_val = val_ppl
                epochs_since_best = 0
            else:
                epochs_since_best += 1
            if epochs_since_best >= config.early_stop_patience:
                break

    if metrics_path:
        write_metrics_csv(log, metrics_path)
    return state, log


def write_metrics_csv(log: Sequence[dict], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["step", "l_beta", "nll", "kl", "lr"]
        )
        writer.writeheader()
        for row in log:
            writer.writerow(row)


# -- checkpoints -----------------------------------------------------------


def _named_tensors(state: TrainState) -> list[tuple[str, Tensor]]:
    out = [("model." + n, p) for n, p in state.model.named_parameters()]
    out += [("mapper." + n, p) for n, p in state.mapper.named_parameters()]
    return out


def save_checkpoint(state: TrainState, dirpath: str) -> None:
    """Write manifest.json plus raw little-endian float64 arrays.

    ``params.bin`` concatenates parameters in manifest order; ``optim.bin``
    holds the Adam first and second moments in the same order.
    """
    os.makedirs(dirpath, exist_ok=True)
    tensors = _named_tensors(state)
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": config_to_dict(state.config),
        "step": state.step,
        "vocab_size": len(state.vocab),
        "tensors": [
            {"name": n, "shape": list(p.shape)} for n, p in tensors
        ],
        "optimizer_tensors": [
            {"name": f"{n}.{m}", "shape": list(p.shape)}
            for n, p in tensors
            for m in ("exp_avg", "exp_avg_sq")
        ],
        "has_optimizer_state": state.step > 0,
        "rng": {
            "torch": torch.get_rng_state().numpy().tobytes().hex(),
            "paths": state.path_generator.get_state().numpy().tobytes().hex(),
            "triplets": state.triplet_generator.get_state()
            .numpy()
            .tobytes()
            .hex(),
        },
    }
    with open(os.path.join(dirpath, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    state.vocab.save(os.path.join(dirpath, "vocab.json"))

    with open(os.path.join(dirpath, "params.bin"), "wb") as fh:
        for _n, p in tensors:
            fh.write(p.detach().numpy().astype("<f8").tobytes())
    with open(os.path.join(dirpath, "optim.bin"), "wb") as fh:
        if state.step > 0:
            opt_state = state.optimizer.state
            for _n, p in tensors:
                s = opt_state[p]
                fh.write(s["exp_avg"].numpy().astype("<f8").tobytes())
                fh.write(s["exp_avg_sq"].numpy().astype("<f8").tobytes())


def load_checkpoint(dirpath: str) -> TrainState:
    with open(os.path.join(dirpath, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(
            f"unsupported checkpoint format {manifest['format_version']}"
        )
    config = config_from_dict(manifest["config"], cls=TrainConfig)
    vocab = Vocab.load(os.path.join(dirpath, "vocab.json"))
    if len(vocab) != manifest["vocab_size"]:
        raise ValueError("vocab size mismatch against manifest")
    state = init_state(config, vocab)
    state.step = manifest["step"]
    tensors = _named_tensors(state)
    if [t["name"] for t in manifest["tensors"]] != [n for n, _ in tensors]:
        raise ValueError("checkpoint tensor order mismatch")

    raw = np.fromfile(os.path.join(dirpath, "params.bin"), dtype="<f8")
    pos = 0
    with torch.no_grad():
        for _n, p in tensors:
            n_el = p.numel()
            p.copy_(torch.from_numpy(raw[pos : pos + n_el]).view(p.shape))
            pos += n_el
    if pos != raw.size:
        raise ValueError("params.bin size mismatch")

    if manifest.get("has_optimizer_state"):
        raw_o = np.fromfile(os.path.join(dirpath, "optim.bin"), dtype="<f8")
        pos = 0
        for _n, p in tensors:
            n_el = p.numel()
            exp_avg = torch.from_numpy(raw_o[pos : pos + n_el]).view(p.shape).clone()
            pos += n_el
            exp_avg_sq = (
                torch.from_numpy(raw_o[pos : pos + n_el]).view(p.shape).clone()
            )
            pos += n_el
            state.optimizer.state[p] = {
                "step": torch.tensor(float(state.step)),
                "exp_avg": exp_avg,
                "exp_avg_sq": exp_avg_sq,
            }
        if pos != raw_o.size:
            raise ValueError("optim.bin size mismatch")

    rng = manifest["rng"]
    torch.set_rng_state(
        torch.frombuffer(bytearray.fromhex(rng["torch"]), dtype=torch.uint8).clone()
    )
    state.path_generator.set_state(
        torch.frombuffer(bytearray.fromhex(rng["paths"]), dtype=torch.uint8).clone()
    )
    state.triplet_generator.set_state(
        torch.frombuffer(
            bytearray.fromhex(rng["triplets"]), dtype=torch.uint8
        ).clone()
    )
    return state


def resume_training(
    state: TrainState,
    corpus: Sequence[Dialogue],
    max_steps: int,
    val_corpus: Optional[Sequence[Dialogue]] = None,
    checkpoint_dir: Optional[str] = None,
) -> tuple[TrainState, list[dict]]:
    """Continue a loaded state to ``max_steps`` total steps."""
    return train(
        corpus,
        state.config,
        state.vocab,
        val_corpus=val_corpus,
        checkpoint_dir=checkpoint_dir,
        state=state,
        max_steps=max_steps,
    )
