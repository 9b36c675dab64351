"""Response generation with expectation or sampled-path mixup.

Expectation mode gates the model with the mapped expectations and the
extrapolated response expectation; it is deterministic given weights.
Sampled mode draws one latent path over the bridge built on the context
endpoints (including the extended endpoint draws), so different seeds
can yield different responses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
from torch import Tensor

from .bridge import DegenerateContextError, infer_mu_T
from .config import derive_seed
from .corpus import BOS_ID, EOS_ID, Utterance, Vocab
from .distill import effective_delta
from .mapper import MapperNet
from .seq2seq import SegmentedContext, Seq2SeqModel, log_softmax


@dataclass
class GenerationRequest:
    context: Sequence[Utterance]
    mode: str = "expectation"  # expectation | sampled
    decoding: str = "greedy"  # greedy | beam | topk
    beam_width: int = 5
    top_k: int = 5
    max_new_tokens: int = 32
    seed: int = 0
    # test hook: scales sampled-path variance; 0 collapses onto the means
    var_scale: float = 1.0
    # sampled-mode interior means: bridge interpolant (consistent with
    # training) or the mapper's per-utterance expectations
    interior_means: str = "interpolant"

    def __post_init__(self):
        if not self.context:
            raise ValueError("empty context")
        if self.mode not in ("expectation", "sampled"):
            raise ValueError(f"unknown mode '{self.mode}'")
        if self.decoding not in ("greedy", "beam", "topk"):
            raise ValueError(f"unknown decoding '{self.decoding}'")
        if self.beam_width < 1 or self.top_k < 1 or self.max_new_tokens < 1:
            raise ValueError("width, k and max_new_tokens must be >= 1")
        if self.interior_means not in ("interpolant", "mapper"):
            raise ValueError(f"unknown interior_means '{self.interior_means}'")


@dataclass
class GenerationResult:
    tokens: list[int]
    step_logprobs: list[float]
    mode: str
    seed: int
    degenerate_context: bool = False

    @property
    def logprob(self) -> float:
        return sum(self.step_logprobs)

    def text(self, vocab: Vocab) -> str:
        return vocab.decode(self.tokens)


def context_mus(
    context: Sequence[Utterance], mapper: MapperNet, embedding: Tensor
) -> tuple[Tensor, Tensor, bool]:
    """Expectations mu_0..mu_{T-1} for the context plus the extrapolated
    response expectation mu_T. Single-utterance contexts fall back to
    mu_T = mu_0 (flagged)."""
    if not context:
        raise ValueError("empty context")
    vecs = torch.stack(
        [
            embedding[torch.tensor(u.tokens, dtype=torch.long)].mean(dim=0)
            for u in context
        ]
    )
    mus_ctx = mapper(vecs)  # (T, d)
    T = len(context)
    try:
        mu_T = infer_mu_T(mus_ctx[0], mus_ctx[-1], T)
        fallback = False
    except DegenerateContextError:
        mu_T = mus_ctx[0]
        fallback = True
    return mus_ctx, mu_T, fallback


def _inference_latents(
    mus_ctx: Tensor,
    mu_T: Tensor,
    req: GenerationRequest,
    delta: float,
    generator: torch.Generator,
) -> tuple[Tensor, Tensor]:
    """Per-turn latents (z for context turns, z_T for the response)."""
    T = mus_ctx.shape[0]
    if req.mode == "expectation":
        return mus_ctx, mu_T
    delta_eff = effective_delta(delta, T)
    end_var = 2.0 * delta_eff * (T - delta_eff) / T
    means = []
    variances = []
    for t in range(T + 1):
        if t == 0:
            means.append(mus_ctx[0])
            variances.append(end_var)
        elif t == T:
            means.append(mu_T)
            variances.append(end_var)
        else:
            if req.interior_means == "mapper":
                means.append(mus_ctx[t])
            else:
                means.append(mus_ctx[0] + (t / T) * (mu_T - mus_ctx[0]))
            variances.append(t * (T - t) / T)
    mean_mat = torch.stack(means)
    var_vec = torch.tensor(variances, dtype=mean_mat.dtype)
    eps = torch.randn(mean_mat.shape, generator=generator, dtype=mean_mat.dtype)
    zs = mean_mat + (var_vec * req.var_scale).sqrt().unsqueeze(1) * eps
    return zs[:T], zs[T]


def _next_log_probs(
    model: Seq2SeqModel,
    prefixes: Tensor,
    memory: Tensor,
    mem_mask: Tensor,
    z_T: Tensor,
) -> Tensor:
    """Log-probs (B, V) of the next token for a batch of prefixes."""
    logits = model.decode_tokens(prefixes, memory, mem_mask, z_T)
    return log_softmax(logits[:, -1, :])


def _greedy(model, memory, mem_mask, z_T, max_new: int):
    prefix = [BOS_ID]
    tokens: list[int] = []
    logps: list[float] = []
    for _ in range(max_new):
        ids = torch.tensor([prefix], dtype=torch.long)
        lp = _next_log_probs(model, ids, memory, mem_mask, z_T)[0]
        nxt = int(lp.argmax())
        logps.append(float(lp[nxt]))
        if nxt == EOS_ID:
            break
        tokens.append(nxt)
        prefix.append(nxt)
    return tokens, logps


def _topk(model, memory, mem_mask, z_T, max_new: int, k: int, generator):
    prefix = [BOS_ID]
    tokens: list[int] = []
    logps: list[float] = []
    for _ in range(max_new):
        ids = torch.tensor([prefix], dtype=torch.long)
        lp = _next_log_probs(model, ids, memory, mem_mask, z_T)[0]
        top = torch.topk(lp, min(k, lp.shape[0]))
        probs = torch.softmax(top.values, dim=0)
        choice = int(torch.multinomial(probs, 1, generator=generator))
        nxt = int(top.indices[choice])
        logps.append(float(lp[nxt]))
        if nxt == EOS_ID:
            break
        tokens.append(nxt)
        prefix.append(nxt)
    return tokens, logps


def _beam(model, memory, mem_mask, z_T, max_new: int, width: int):
    """Beam search with length-averaged final scoring."""
    beams: list[tuple[list[int], list[float]]] = [([BOS_ID], [])]
    finished: list[tuple[list[int], list[float]]] = []
    for _ in range(max_new):
        if not beams:
            break
        ids = torch.tensor([b[0] for b in beams], dtype=torch.long)
        B = ids.shape[0]
        lp = _next_log_probs(
            model,
            ids,
            memory.expand(B, -1, -1),
            mem_mask.expand(B, -1),
            z_T.expand(B, -1),
        )  # (B, V)
        candidates = []
        top = torch.topk(lp, min(width, lp.shape[1]), dim=1)
        for b, (prefix, logps) in enumerate(beams):
            for val, idx in zip(top.values[b], top.indices[b]):
                candidates.append(
                    (sum(logps) + float(val), prefix, logps + [float(val)], int(idx))
                )
        candidates.sort(key=lambda c: (-c[0], c[1], c[3]))
        beams = []
        for score, prefix, logps, tok in candidates:
            if tok == EOS_ID:
                if len(finished) < width:
                    finished.append((prefix + [tok], logps))
            else:
                beams.append((prefix + [tok], logps))
            if len(beams) >= width:
                break
        if len(finished) >= width:
            break
    if not finished:
        finished = [(prefix, logps) for prefix, logps in beams[:1]]
    # length-averaged score; ties broken lexicographically for determinism
    def avg(item):
        prefix, logps = item
        return -sum(logps) / max(len(logps), 1), prefix

    best_prefix, best_logps = min(finished, key=avg)
    tokens = [t for t in best_prefix[1:] if t != EOS_ID]
    return tokens, best_logps


def generate(
    req: GenerationRequest,
    model: Seq2SeqModel,
    mapper: MapperNet,
    delta: float = 0.5,
) -> GenerationResult:
    """Generate one response for a context."""
    was_training = model.training
    model.eval()
    mapper.eval()
    try:
        with torch.no_grad():
            mus_ctx, mu_T, fallback = context_mus(
                req.context, mapper, model.embedding.weight
            )
            gen = torch.Generator()
            gen.manual_seed(derive_seed(req.seed, "inference"))
            z_ctx, z_T = _inference_latents(mus_ctx, mu_T, req, delta, gen)

            ctx = SegmentedContext.from_utterances(req.context).truncate_left(
                model.max_len
            )
            src = torch.tensor([ctx.tokens], dtype=torch.long)
            mask = torch.ones_like(src, dtype=torch.bool)
            seg = torch.tensor([ctx.segments], dtype=torch.long)
            e = model.encode_tokens(src, mask, seg)
            # truncation can drop leading utterances; keep latents aligned
            z_kept = z_ctx[z_ctx.shape[0] - ctx.num_segments :]
            e_hat = model.apply_encoder_mixup(e, seg, z_kept.unsqueeze(0))
            zT = z_T.unsqueeze(0)

            if req.decoding == "greedy" or (
                req.decoding == "beam" and req.beam_width == 1
            ):
                tokens, logps = _greedy(model, e_hat, mask, zT, req.max_new_tokens)
            elif req.decoding == "beam":
                tokens, logps = _beam(
                    model, e_hat, mask, zT, req.max_new_tokens, req.beam_width
                )
            else:
                tokens, logps = _topk(
                    model, e_hat, mask, zT, req.max_new_tokens, req.top_k, gen
                )
    finally:
        if was_training:
            model.train()
            mapper.train()
    return GenerationResult(
        tokens=tokens,
        step_logprobs=logps,
        mode=req.mode,
        seed=req.seed,
        degenerate_context=fallback,
    )


def diverse_generate(
    context: Sequence[Utterance],
    n: int,
    model: Seq2SeqModel,
    mapper: MapperNet,
    base_seed: int = 0,
    delta: float = 0.5,
    decoding: str = "beam",
    beam_width: int = 5,
    top_k: int = 5,
    max_new_tokens: int = 32,
    mode: str = "sampled",
) -> list[tuple[tuple[int, ...], int]]:
    """n independent sampled-mode generations with seeds base..base+n-1,
    deduplicated with counts, most frequent first."""
    if n < 1:
        raise ValueError("n must be >= 1")
    counts: dict[tuple[int, ...], int] = {}
    for i in range(n):
        req = GenerationRequest(
            context=context,
            mode=mode,
            decoding=decoding,
            beam_width=beam_width,
            top_k=top_k,
            max_new_tokens=max_new_tokens,
            seed=base_seed + i,
        )
        result = generate(req, model, mapper, delta=delta)
        key = tuple(result.tokens)
        counts[key] = counts.get(key, 0) + 1
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
