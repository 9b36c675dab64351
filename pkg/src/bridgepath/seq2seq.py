"""Encoder-decoder transformer with latent mixup gates.

Two injection points carry the latent path into the model: the final
encoder outputs are gated elementwise with the per-utterance latent
(routed by segment id), and every decoder layer gates its self-attention
output with the response latent before cross-attention. The gate vectors
start at the identity (x-gate all ones, z-gate all zeros), so an
untrained model is exactly a vanilla transformer.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .corpus import BOS_ID, EOS_ID, PAD_ID, Utterance

logger = logging.getLogger(__name__)


@dataclass
class SegmentedContext:
    """Flat context token sequence with per-token source-utterance ids.

    Each utterance is terminated by an end-of-utterance token (eos id).
    Segment ids are nondecreasing, starting at 0.
    """

    tokens: list[int]
    segments: list[int]

    def __post_init__(self):
        if len(self.tokens) != len(self.segments):
            raise ValueError("tokens and segments must align")
        if self.segments and (
            self.segments[0] != 0
            or any(b - a not in (0, 1) for a, b in zip(self.segments, self.segments[1:]))
        ):
            raise ValueError("segment ids must be nondecreasing from 0")

    @property
    def num_segments(self) -> int:
        return self.segments[-1] + 1 if self.segments else 0

    @classmethod
    def from_utterances(cls, utterances: Sequence[Utterance]) -> "SegmentedContext":
        tokens: list[int] = []
        segments: list[int] = []
        for t, u in enumerate(utterances):
            tokens.extend(u.tokens)
            tokens.append(EOS_ID)
            segments.extend([t] * (len(u.tokens) + 1))
        return cls(tokens=tokens, segments=segments)

    def truncate_left(self, max_len: int) -> "SegmentedContext":
        """Drop the oldest tokens when over length, renumbering segments."""
        if len(self.tokens) <= max_len:
            return self
        logger.warning(
            "context of %d tokens truncated to %d (oldest dropped)",
            len(self.tokens),
            max_len,
        )
        tokens = self.tokens[-max_len:]
        segs = self.segments[-max_len:]
        base = segs[0]
        return SegmentedContext(tokens=tokens, segments=[s - base for s in segs])


def sinusoidal_positions(max_len: int, d_model: int) -> Tensor:
    if d_model % 2 != 0:
        raise ValueError("d_model must be even")
    pos = torch.arange(max_len, dtype=torch.float64).unsqueeze(1)
    idx = torch.arange(0, d_model, 2, dtype=torch.float64)
    div = torch.exp(-math.log(10000.0) * idx / d_model)
    pe = torch.zeros(max_len, d_model, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)
    return pe


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        if d_model % n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(
        self, q_in: Tensor, kv_in: Tensor, allowed: Optional[Tensor] = None
    ) -> Tensor:
        """``allowed`` is a boolean (B, Sq, Sk) mask, True where a query
        may attend a key. Rows with no allowed key fall back to attending
        everything; such rows only occur at padding and are never read.
        """
        B, Sq, D = q_in.shape
        Sk = kv_in.shape[1]
        q = self.q_proj(q_in).view(B, Sq, self.n_heads, self.d_head).transpose(1, 2)
        k = self.k_proj(kv_in).view(B, Sk, self.n_heads, self.d_head).transpose(1, 2)
        v = self.v_proj(kv_in).view(B, Sk, self.n_heads, self.d_head).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        if allowed is not None:
            safe = allowed | ~allowed.any(dim=-1, keepdim=True)
            scores = scores.masked_fill(~safe.unsqueeze(1), float("-inf"))
        attn = self.dropout(torch.softmax(scores, dim=-1))
        out = (attn @ v).transpose(1, 2).reshape(B, Sq, D)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, dropout: float, mult: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(d_model, mult * d_model)
        self.fc2 = nn.Linear(mult * d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.dropout(F.relu(self.fc1(x))))


class EncoderLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.ln2 = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model, dropout)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor, allowed: Optional[Tensor]) -> Tensor:
        h = self.ln1(x)
        x = x + self.dropout(self.attn(h, h, allowed))
        x = x + self.dropout(self.ffn(self.ln2(x)))
        return x


class DecoderLayer(nn.Module):
    """Pre-norm decoder layer with a latent gate between self- and
    cross-attention: the gated state is the Query into cross-attention."""

    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.ln2 = nn.LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.ln3 = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model, dropout)
        self.dropout = nn.Dropout(dropout)
        self.mix_x = nn.Parameter(torch.ones(d_model, dtype=torch.float64))
        self.mix_z = nn.Parameter(torch.zeros(d_model, dtype=torch.float64))

    def forward(
        self,
        x: Tensor,
        memory: Tensor,
        causal: Tensor,
        mem_allowed: Optional[Tensor],
        z_T: Optional[Tensor],
        use_mixup: bool,
    ) -> Tensor:
        h = self.ln1(x)
        d = x + self.dropout(self.self_attn(h, h, causal))
        if use_mixup:
            if z_T is None:
                raise ValueError("decoder mixup requires a response latent")
            d = self.mix_x * d + self.mix_z * z_T.unsqueeze(1)
        d = d + self.dropout(self.cross_attn(self.ln2(d), memory, mem_allowed))
        d = d + self.dropout(self.ffn(self.ln3(d)))
        return d


class Seq2SeqModel(nn.Module):
    """From-scratch transformer with encoder/decoder latent gates.

    The token embedding table is shared with the output projection and
    with the utterance averaging that feeds the expectation mapper.
    d_model doubles as the latent dimension; the gates combine token
    states and latents elementwise.
    """

    def __init__(
        self,
        vocab_size: int,
        d_model: int = 64,
        n_heads: int = 4,
        n_encoder_layers: int = 2,
        n_decoder_layers: int = 2,
        dropout: float = 0.1,
        max_len: int = 256,
        encode_per_utterance: bool = False,
    ):
        super().__init__()
        if n_decoder_layers < 1:
            raise ValueError("need at least one decoder layer")
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.max_len = max_len
        self.encode_per_utterance = encode_per_utterance
        self.embedding = nn.Embedding(vocab_size, d_model)
        nn.init.normal_(self.embedding.weight, mean=0.0, std=0.02)
        self.register_buffer("pos", sinusoidal_positions(max_len, d_model))
        self.enc_layers = nn.ModuleList(
            EncoderLayer(d_model, n_heads, dropout) for _ in range(n_encoder_layers)
        )
        self.enc_norm = nn.LayerNorm(d_model)
        self.dec_layers = nn.ModuleList(
            DecoderLayer(d_model, n_heads, dropout) for _ in range(n_decoder_layers)
        )
        self.dec_norm = nn.LayerNorm(d_model)
        self.enc_mix_x = nn.Parameter(torch.ones(d_model, dtype=torch.float64))
        self.enc_mix_z = nn.Parameter(torch.zeros(d_model, dtype=torch.float64))
        self.dropout = nn.Dropout(dropout)
        self.double()  # desk-scale CPU model; float64 keeps gradient checks honest

    # -- encoder -----------------------------------------------------------

    def _embed(self, tokens: Tensor) -> Tensor:
        x = self.embedding(tokens) * math.sqrt(self.d_model)
        return x + self.pos[: tokens.shape[1]].unsqueeze(0)

    def encode_tokens(
        self,
        src: Tensor,
        src_mask: Tensor,
        segments: Optional[Tensor] = None,
    ) -> Tensor:
        """Encode (B, S) token ids; ``src_mask`` True at real tokens.

        With ``encode_per_utterance`` attention is restricted to tokens
        of the same segment (no cross-utterance attention).
        """
        if src.shape[1] > self.max_len:
            raise ValueError(
                f"source length {src.shape[1]} exceeds max_len {self.max_len}"
            )
        allowed = src_mask.unsqueeze(1).expand(-1, src.shape[1], -1)
        if self.encode_per_utterance:
            if segments is None:
                raise ValueError("per-utterance encoding needs segment ids")
            same = segments.unsqueeze(2) == segments.unsqueeze(1)
            allowed = allowed & same
        x = self.dropout(self._embed(src))
        for layer in self.enc_layers:
            x = layer(x, allowed)
        return self.enc_norm(x)

    def apply_encoder_mixup(
        self, e: Tensor, segments: Tensor, zs: Tensor
    ) -> Tensor:
        """Gate encoder outputs with the per-utterance latents.

        ``zs`` is (B, n_segments_max, d); each token picks the latent of
        its source utterance. Padding positions (segment id < 0) use the
        zero latent slot and are masked downstream.
        """
        if zs.shape[-1] != self.d_model:
            raise ValueError("latent dim must equal d_model")
        if int(segments.max()) >= zs.shape[1]:
            raise ValueError("missing latent for a segment id")
        idx = segments.clamp(min=0)
        z_tok = torch.gather(
            zs, 1, idx.unsqueeze(-1).expand(-1, -1, zs.shape[-1])
        )
        return self.enc_mix_x * e + self.enc_mix_z * z_tok

    # -- decoder -----------------------------------------------------------

    def decode_tokens(
        self,
        prefix: Tensor,
        memory: Tensor,
        mem_mask: Tensor,
        z_T: Optional[Tensor],
        tgt_mask: Optional[Tensor] = None,
        use_mixup: bool = True,
    ) -> Tensor:
        """Teacher-forced decode of (B, P) prefix ids to (B, P, V) logits."""
        if prefix.shape[1] > self.max_len:
            raise ValueError(
                f"prefix length {prefix.shape[1]} exceeds max_len {self.max_len}"
            )
        P = prefix.shape[1]
        causal = torch.tril(
            torch.ones(P, P, dtype=torch.bool, device=prefix.device)
        ).unsqueeze(0)
        if tgt_mask is not None:
            causal = causal & tgt_mask.unsqueeze(1)
        mem_allowed = mem_mask.unsqueeze(1).expand(-1, P, -1)
        x = self.dropout(self._embed(prefix))
        for layer in self.dec_layers:
            x = layer(x, memory, causal, mem_allowed, z_T, use_mixup)
        x = self.dec_norm(x)
        return x @ self.embedding.weight.T

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        """Named parameter groups for gradient diagnostics."""
        groups: dict[str, list[tuple[str, nn.Parameter]]] = {
            "embedding": [],
            "encoder": [],
            "decoder": [],
            "mix_enc_x": [],
            "mix_enc_z": [],
            "mix_dec_x": [],
            "mix_dec_z": [],
        }
        for name, p in self.named_parameters():
            if name == "enc_mix_x":
                groups["mix_enc_x"].append((name, p))
            elif name == "enc_mix_z":
                groups["mix_enc_z"].append((name, p))
            elif name.endswith(".mix_x"):
                groups["mix_dec_x"].append((name, p))
            elif name.endswith(".mix_z"):
                groups["mix_dec_z"].append((name, p))
            elif name.startswith("embedding"):
                groups["embedding"].append((name, p))
            elif name.startswith(("enc_layers", "enc_norm")):
                groups["encoder"].append((name, p))
            else:
                groups["decoder"].append((name, p))
        return groups


# -- functional single-example wrappers ------------------------------------


def encode(ctx: SegmentedContext, model: Seq2SeqModel) -> Tensor:
    """Encoder outputs (num_tokens, d_model) for one context."""
    ctx = ctx.truncate_left(model.max_len)
    src = torch.tensor([ctx.tokens], dtype=torch.long)
    mask = torch.ones_like(src, dtype=torch.bool)
    segments = torch.tensor([ctx.segments], dtype=torch.long)
    return model.encode_tokens(src, mask, segments)[0]


def mixup_encoder(
    e: Tensor, segments: Sequence[int], zs: Tensor, model: Seq2SeqModel
) -> Tensor:
    """Elementwise gate of per-token encoder outputs with utterance latents."""
    seg = torch.tensor([list(segments)], dtype=torch.long)
    return model.apply_encoder_mixup(e.unsqueeze(0), seg, zs.unsqueeze(0))[0]


def decode_forward(
    prefix: Sequence[int],
    e_hat: Tensor,
    z_T: Optional[Tensor],
    model: Seq2SeqModel,
    use_mixup: bool = True,
) -> Tensor:
    """Per-position vocabulary logits for one teacher-forced prefix."""
    if not prefix or prefix[0] != BOS_ID:
        raise ValueError("teacher-forced prefix must begin with bos")
    ids = torch.tensor([list(prefix)], dtype=torch.long)
    mem = e_hat.unsqueeze(0)
    mem_mask = torch.ones(1, e_hat.shape[0], dtype=torch.bool)
    z = z_T.unsqueeze(0) if z_T is not None else None
    return model.decode_tokens(ids, mem, mem_mask, z, use_mixup=use_mixup)[0]


def log_softmax(logits: Tensor) -> Tensor:
    """Log-distributions over the vocabulary; rejects non-finite logits."""
    if not torch.isfinite(logits).all():
        raise FloatingPointError("non-finite logits")
    return F.log_softmax(logits, dim=-1)
