"""Mapping from utterances to bridge expectations, plus its contrastive loss.

An utterance vector is the plain average of its token embeddings (no
position information). A 4-layer MLP maps that vector to the latent
expectation mu_t. The contrastive objective pulls each middle
expectation onto the linear interpolant of its triplet endpoints, i.e.
onto the bridge's mean relationship.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor


class MapperNet(nn.Module):
    """4 fully connected layers with ReLU between, d_e -> d_z.

    The pooled utterance vector is normalized (parameter-free layer norm)
    before the MLP, so the map is input-sensitive at initialization and
    its output scale is decoupled from the token embedding scale.

    Weights use scale-preserving orthogonal initialization (ReLU gain on
    hidden layers, unit gain on the output) with zero biases, so a
    unit-scale input produces a unit-scale latent expectation. This keeps
    the initial expectations on the same scale as the bridge noise they
    anchor, instead of starting collapsed near zero.
    """

    def __init__(self, in_dim: int, out_dim: int, hidden_dim: int | None = None):
        super().__init__()
        hidden = hidden_dim if hidden_dim is not None else in_dim
        dims = [in_dim, hidden, hidden, hidden, out_dim]
        self.layers = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1]) for i in range(4)
        )
        self.double()
        for i, layer in enumerate(self.layers):
            gain = math.sqrt(2.0) if i < 3 else 1.0
            nn.init.orthogonal_(layer.weight, gain=gain)
            nn.init.zeros_(layer.bias)

    def forward(self, x: Tensor) -> Tensor:
        x = F.layer_norm(x, x.shape[-1:])
        for layer in self.layers[:-1]:
            x = F.relu(layer(x))
        return self.layers[-1](x)


def embed_utterance(tokens: Tensor, table: Tensor) -> Tensor:
    """Mean of the token embeddings; ``tokens`` is a 1-D id tensor."""
    if tokens.numel() == 0:
        raise ValueError("cannot embed an empty utterance")
    return table[tokens].mean(dim=0)


def embed_utterances_padded(
    tokens: Tensor, mask: Tensor, table: Tensor
) -> Tensor:
    """Batched mean embedding over a padded (U, L) id tensor.

    ``mask`` is True at real tokens; every row must contain at least one.
    """
    counts = mask.sum(dim=1, keepdim=True)
    if (counts == 0).any():
        raise ValueError("empty utterance row in batch")
    emb = table[tokens] * mask.unsqueeze(-1)
    return emb.sum(dim=1) / counts


def map_to_mu(u_vec: Tensor, net: MapperNet) -> Tensor:
    if u_vec.shape[-1] != net.layers[0].in_features:
        raise ValueError(
            f"input dim {u_vec.shape[-1]} != mapper input "
            f"{net.layers[0].in_features}"
        )
    return net(u_vec)


def triplet_sigma2(t1: float, t2: float) -> float:
    """Bridge variance at t1 when the triplet is pinned at times 0 and t2."""
    return t1 * (t2 - t1) / t2


def triplet_interpolant(mu_t0: Tensor, mu_t2: Tensor, t1: float, t2: float) -> Tensor:
    w = t1 / t2
    return (1 - w) * mu_t0 + w * mu_t2


def triplet_distance(
    mu_t0: Tensor,
    mu_t1: Tensor,
    mu_t2: Tensor,
    t0: float,
    t1: float,
    t2: float,
) -> Tensor:
    """Negative scaled squared residual of mu_t1 against the interpolant.

    Always <= 0; 0 exactly when mu_t1 sits on the line between the
    endpoints at the bridge's interpolation weight.
    """
    if not t0 < t1 < t2:
        raise ValueError(f"need t0 < t1 < t2, got {t0}, {t1}, {t2}")
    resid = mu_t1 - triplet_interpolant(mu_t0, mu_t2, t1, t2)
    return -(resid.pow(2).sum(dim=-1)) / (2.0 * triplet_sigma2(t1, t2))


@dataclass
class Triplet:
    """Ordered in-conversation triplet with in-batch negative middles."""

    t0: int
    t1: int
    t2: int
    mu_t0: Tensor
    mu_t1: Tensor
    mu_t2: Tensor
    negatives: list[Tensor] = field(default_factory=list)

    def __post_init__(self):
        if not self.t0 < self.t1 < self.t2:
            raise ValueError("triplet times must be strictly increasing")
        if not self.negatives:
            raise ValueError("triplet needs at least one negative")


def contrastive_loss(triplets: list[Triplet]) -> Tensor:
    """Mean over triplets of log(1 + sum_neg exp(d_neg) / exp(d_pos)).

    Computed as softplus(logsumexp(d_neg) - d_pos) for stability.
    """
    if not triplets:
        raise ValueError("empty triplet batch")
    terms = []
    for tr in triplets:
        d_pos = triplet_distance(
            tr.mu_t0, tr.mu_t1, tr.mu_t2, tr.t0, tr.t1, tr.t2
        )
        d_negs = torch.stack(
            [
                triplet_distance(tr.mu_t0, neg, tr.mu_t2, tr.t0, tr.t1, tr.t2)
                for neg in tr.negatives
            ]
        )
        terms.append(F.softplus(torch.logsumexp(d_negs, dim=0) - d_pos))
    return torch.stack(terms).mean()


def contrastive_loss_batched(
    mu_t0: Tensor,
    mu_t1: Tensor,
    mu_t2: Tensor,
    t1_over_t2: Tensor,
    sigma2: Tensor,
    candidates: Tensor,
    neg_mask: Tensor,
) -> Tensor:
    """Vectorized contrastive loss over n triplets and U candidate middles.

    ``candidates`` is (U, d); ``neg_mask`` is (n, U), True where a
    candidate serves as a negative for that triplet.
    """
    w = t1_over_t2.unsqueeze(1)
    interp = (1 - w) * mu_t0 + w * mu_t2  # (n, d)
    d_pos = -((mu_t1 - interp).pow(2).sum(dim=1)) / (2 * sigma2)  # (n,)
    resid = candidates.unsqueeze(0) - interp.unsqueeze(1)  # (n, U, d)
    d_neg = -(resid.pow(2).sum(dim=2)) / (2 * sigma2.unsqueeze(1))  # (n, U)
    d_neg = d_neg.masked_fill(~neg_mask, float("-inf"))
    lse = torch.logsumexp(d_neg, dim=1)
    return F.softplus(lse - d_pos).mean()


def positive_residual(
    mu_t0: Tensor, mu_t1: Tensor, mu_t2: Tensor, t1: float, t2: float
) -> Tensor:
    """L2 norm of the positive middle's residual against the interpolant."""
    return (mu_t1 - triplet_interpolant(mu_t0, mu_t2, t1, t2)).norm(dim=-1)
