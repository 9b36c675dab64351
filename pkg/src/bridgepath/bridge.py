"""Extended Brownian Bridge over utterance expectations.

The bridge is pinned on the (learned) endpoint expectations mu_0 and
mu_T. Interior marginals follow the classical bridge law; the endpoints
themselves are Gaussian with variance 2*delta*(T-delta)/T, which makes
response-side sampling possible. The scalar variance applies
independently per latent dimension.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import torch
from torch import Tensor


class DegenerateContextError(ValueError):
    """Raised when endpoint extrapolation needs T >= 2 but gets less."""


@dataclass(frozen=True)
class IsotropicGaussian:
    """Per-dimension independent Gaussian with a shared scalar variance."""

    mean: Tensor
    variance: float

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError("variance must be nonnegative")
        if not torch.isfinite(self.mean).all():
            raise ValueError("mean must be finite")


@dataclass
class BridgeParams:
    """Per-utterance expectations mu_0..mu_T plus horizon T and delta."""

    mus: Tensor  # (T+1, d_z)
    T: int
    delta: float

    def __post_init__(self):
        if self.mus.ndim != 2 or self.mus.shape[0] != self.T + 1:
            raise ValueError("mus must have shape (T+1, d_z)")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not (0 < self.delta < self.T):
            raise ValueError(f"delta must satisfy 0 < delta < T, got {self.delta}")
        if not torch.isfinite(self.mus).all():
            raise ValueError("mus must be finite")

    @property
    def mu0(self) -> Tensor:
        return self.mus[0]

    @property
    def muT(self) -> Tensor:
        return self.mus[self.T]


@dataclass
class LatentPath:
    """One sampled trajectory z_0..z_T."""

    zs: Tensor  # (T+1, d_z)
    path_index: int = 0


def interior_variance(t: float, T: float) -> float:
    """Classical bridge marginal variance t(T-t)/T."""
    return t * (T - t) / T


def endpoint_variance(T: float, delta: float) -> float:
    """Extended endpoint variance 2*delta*(T-delta)/T."""
    return 2.0 * delta * (T - delta) / T


def marginal(t: int, p: BridgeParams) -> IsotropicGaussian:
    """Marginal of the extended bridge at integer time t in [0, T]."""
    if not 0 <= t <= p.T:
        raise ValueError(f"t={t} out of range [0, {p.T}]")
    if t == 0 or t == p.T:
        return IsotropicGaussian(
            mean=p.mus[t], variance=endpoint_variance(p.T, p.delta)
        )
    mean = p.mu0 + (t / p.T) * (p.muT - p.mu0)
    return IsotropicGaussian(mean=mean, variance=interior_variance(t, p.T))


def marginal_means_and_vars(p: BridgeParams) -> tuple[Tensor, Tensor]:
    """Stacked marginal means (T+1, d) and variances (T+1,) for all t.

    Means are differentiable functions of mu_0 and mu_T; variances are
    parameter-free, which is what makes reparameterized sampling exact.
    """
    d = p.mus.shape[1]
    ts = torch.arange(p.T + 1, dtype=p.mus.dtype, device=p.mus.device)
    frac = (ts / p.T).unsqueeze(1)  # (T+1, 1)
    means = p.mu0.unsqueeze(0) * (1 - frac) + p.muT.unsqueeze(0) * frac
    means = means.clone()
    means[0] = p.mu0
    means[p.T] = p.muT
    variances = ts * (p.T - ts) / p.T
    variances[0] = endpoint_variance(p.T, p.delta)
    variances[p.T] = endpoint_variance(p.T, p.delta)
    assert means.shape == (p.T + 1, d)
    return means, variances


def sample_path(
    p: BridgeParams,
    generator: torch.Generator,
    path_index: int = 0,
    var_scale: float = 1.0,
) -> LatentPath:
    """Draw one path, each time step independently from its marginal.

    Reparameterized: z_t = mean_t + sqrt(var_t) * eps, so gradients flow
    into the endpoint expectations. ``var_scale`` is a test hook that
    shrinks all variances (0 collapses the path onto the means).
    """
    means, variances = marginal_means_and_vars(p)
    eps = torch.randn(means.shape, generator=generator, dtype=means.dtype)
    zs = means + torch.sqrt(variances * var_scale).unsqueeze(1) * eps
    return LatentPath(zs=zs, path_index=path_index)


def interior_covariance(t1: int, t2: int, T: int) -> float:
    """Per-dimension covariance t1(T-t2)/T between two interior times."""
    if not 0 < t1 < t2 < T:
        raise ValueError(f"need 0 < t1 < t2 < T, got t1={t1}, t2={t2}, T={T}")
    return t1 * (T - t2) / T


def sample_interior_pair(
    t1: int,
    t2: int,
    p: BridgeParams,
    n: int,
    generator: torch.Generator,
) -> tuple[Tensor, Tensor]:
    """Joint-law oracle: n draws of (z_t1, z_t2) from the exact bivariate
    bridge distribution (Cholesky of the 2x2 covariance), per dimension.

    This is the test-harness side of the covariance check; path sampling
    itself draws marginals independently.
    """
    if not 0 < t1 < t2 < p.T:
        raise ValueError(f"need 0 < t1 < t2 < T, got t1={t1}, t2={t2}, T={p.T}")
    m1 = marginal(t1, p).mean
    m2 = marginal(t2, p).mean
    v1 = interior_variance(t1, p.T)
    v2 = interior_variance(t2, p.T)
    c12 = interior_covariance(t1, t2, p.T)
    cov = torch.tensor([[v1, c12], [c12, v2]], dtype=p.mus.dtype)
    chol = torch.linalg.cholesky(cov)
    d = p.mus.shape[1]
    eps = torch.randn((n, d, 2), generator=generator, dtype=p.mus.dtype)
    mixed = eps @ chol.T  # (n, d, 2)
    z1 = m1.unsqueeze(0) + mixed[..., 0]
    z2 = m2.unsqueeze(0) + mixed[..., 1]
    return z1, z2


def infer_mu_T(mu0: Tensor, mu_Tm1: Tensor, T: int) -> Tensor:
    """Closed-form endpoint extrapolation mu_T = T/(T-1) mu_{T-1} - 1/(T-1) mu_0."""
    if T < 2:
        raise DegenerateContextError(
            f"endpoint extrapolation needs T >= 2, got T={T}"
        )
    return (T / (T - 1)) * mu_Tm1 - (1 / (T - 1)) * mu0


def paths_to_csv(paths: list[LatentPath], normalize: bool = False) -> str:
    """Serialize paths as ``path,t,dim0,...,dimN`` rows.

    With ``normalize`` every dimension is min-max scaled to [0, 1] over
    all emitted points; a constant dimension maps to 0.5.
    """
    if not paths:
        raise ValueError("no paths to serialize")
    d = paths[0].zs.shape[1]
    points = torch.cat([p.zs for p in paths], dim=0)
    if normalize:
        lo = points.min(dim=0).values
        hi = points.max(dim=0).values
        span = hi - lo
        span = torch.where(span > 0, span, torch.ones_like(span))

    out = io.StringIO()
    out.write("path," + "t," + ",".join(f"dim{i}" for i in range(d)) + "\n")
    for p in paths:
        zs = p.zs
        if normalize:
            zs = (zs - lo) / span
            zs = torch.where(
                (hi - lo > 0).expand_as(zs), zs, torch.full_like(zs, 0.5)
            )
        for t in range(zs.shape[0]):
            vals = ",".join(f"{v:.10g}" for v in zs[t].tolist())
            out.write(f"{p.path_index},{t},{vals}\n")
    return out.getvalue()
