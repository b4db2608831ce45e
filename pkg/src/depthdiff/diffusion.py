"""Forward diffusion, tractable posterior, reverse sampling, and losses.

All operations act on single samples (tensors of arbitrary shape, typically
[H, W, C]) with a scalar timestep, and draw any randomness from explicitly
seeded generators, so every quantity here is a pure function of its inputs.
Batching is layered on top by the training pipeline.

Conventions:
  * data lives in [-1, 1]
  * timesteps run t = 0 .. T-1; sampling iterates from T-1 down to 0
  * the t=0 reverse step is the decoder; its likelihood is evaluated on a
    256-bin discretization of [-1, 1]
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import torch

from depthdiff.schedule import NoiseSchedule, p2_weight

DEFAULT_LAMBDA_VLB = 1e-3


class DivergedSamplingError(RuntimeError):
    """Raised when a reverse-process intermediate stops being finite."""

    def __init__(self, step: int):
        super().__init__(f"non-finite sample at reverse step t={step}")
        self.step = step


@dataclass
class DiffusionState:
    """Input bundle for a denoiser: noisy sample, its step, optional condition."""

    x_t: torch.Tensor
    t: int
    condition: Optional[torch.Tensor] = None

    def __post_init__(self) -> None:
        if self.condition is not None and self.condition.shape[:-1] != self.x_t.shape[:-1]:
            raise ValueError(
                f"condition spatial dims {tuple(self.condition.shape[:-1])} do not "
                f"match x_t {tuple(self.x_t.shape[:-1])}"
            )


@dataclass
class DenoiserOutput:
    """Predicted noise, plus the variance-interpolation coefficient if learned."""

    eps_pred: torch.Tensor
    v: Optional[torch.Tensor] = None

    def __post_init__(self) -> None:
        if not torch.isfinite(self.eps_pred).all():
            raise ValueError("eps_pred contains non-finite values")
        if self.v is not None:
            if self.v.shape != self.eps_pred.shape:
                raise ValueError("v must have the same shape as eps_pred")
            if self.v.min() < 0.0 or self.v.max() > 1.0:
                raise ValueError("v must lie in [0, 1]")


@dataclass
class GaussianParams:
    mean: torch.Tensor
    variance: torch.Tensor
    log_variance: torch.Tensor

    def __post_init__(self) -> None:
        if (self.variance <= 0).any():
            raise ValueError("variance must be strictly positive")


def _check_t(t: int, s: NoiseSchedule) -> None:
    if not 0 <= t < s.T:
        raise IndexError(f"timestep {t} outside [0, {s.T})")


def q_sample(x0: torch.Tensor, t: int, eps: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """Draw x_t from the closed-form marginal: sqrt(ab)*x0 + sqrt(1-ab)*eps."""
    _check_t(t, s)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {tuple(x0.shape)} and eps {tuple(eps.shape)} differ")
    ab = float(s.alpha_bar[t])
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def q_posterior(x0: torch.Tensor, xt: torch.Tensor, t: int, s: NoiseSchedule) -> GaussianParams:
    """Tractable posterior q(x_{t-1} | x_t, x_0) for t >= 1."""
    _check_t(t, s)
    if t == 0:
        raise ValueError("posterior is undefined at t=0; use the decoder term")
    if x0.shape != xt.shape:
        raise ValueError("x0 and xt must have the same shape")
    ab, ab_prev = float(s.alpha_bar[t]), s.alpha_bar_prev(t)
    beta = float(s.beta[t])
    coef0 = math.sqrt(ab_prev) * beta / (1.0 - ab)
    coef_t = math.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab)
    mean = coef0 * x0 + coef_t * xt
    var = float(s.beta_tilde[t])
    return GaussianParams(
        mean=mean,
        variance=torch.full_like(mean, var),
        log_variance=torch.full_like(mean, math.log(var)),
    )


def _floored_beta_tilde(s: NoiseSchedule, t: int) -> float:
    """beta_tilde with the t=0 value replaced by the first positive entry."""
    return float(s.beta_tilde[1]) if t == 0 else float(s.beta_tilde[t])


def model_variance(v: torch.Tensor, t: int, s: NoiseSchedule) -> tuple[torch.Tensor, torch.Tensor]:
    """Log-space interpolation between the upper (beta) and lower (beta_tilde)
    variance bounds; returns (variance, log_variance)."""
    _check_t(t, s)
    if v.min() < 0.0 or v.max() > 1.0:
        raise ValueError("interpolation coefficient v must lie in [0, 1]")
    log_hi = math.log(float(s.beta[t]))
    log_lo = math.log(_floored_beta_tilde(s, t))
    log_var = v * log_hi + (1.0 - v) * log_lo
    return torch.exp(log_var), log_var


def predict_x0_from_eps(
    xt: torch.Tensor, eps_pred: torch.Tensor, t: int, s: NoiseSchedule, clip: bool = True
) -> torch.Tensor:
    """Invert the marginal reparameterization to recover x0 from predicted noise."""
    _check_t(t, s)
    ab = float(s.alpha_bar[t])
    x0 = (xt - math.sqrt(1.0 - ab) * eps_pred) / math.sqrt(ab)
    return x0.clamp(-1.0, 1.0) if clip else x0


def _model_mean(
    xt: torch.Tensor, t: int, eps_pred: torch.Tensor, s: NoiseSchedule, clip_x0: bool
) -> torch.Tensor:
    """Reverse-process mean.  The direct form 1/sqrt(a)*(xt - (1-a)/sqrt(1-ab)*eps)
    is algebraically identical to routing the implied x0 through the posterior
    mean; the latter is used when x0 clipping is requested, since clipping only
    makes sense on the x0 estimate."""
    if not clip_x0:
        a = float(s.alpha[t])
        ab = float(s.alpha_bar[t])
        return (xt - (1.0 - a) / math.sqrt(1.0 - ab) * eps_pred) / math.sqrt(a)
    x0 = predict_x0_from_eps(xt, eps_pred, t, s, clip=True)
    ab, ab_prev = float(s.alpha_bar[t]), s.alpha_bar_prev(t)
    beta = float(s.beta[t])
    coef0 = math.sqrt(ab_prev) * beta / (1.0 - ab)
    coef_t = math.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab)
    return coef0 * x0 + coef_t * xt


def p_step(
    xt: torch.Tensor,
    t: int,
    out: DenoiserOutput,
    s: NoiseSchedule,
    z: torch.Tensor,
    clip_x0: bool = False,
) -> torch.Tensor:
    """One reverse step x_t -> x_{t-1}.

    The step variance is beta_t when the denoiser carries no variance head,
    otherwise the learned interpolation from ``model_variance``.  z is ignored
    at t=0 (the final step is deterministic).
    """
    _check_t(t, s)
    mean = _model_mean(xt, t, out.eps_pred, s, clip_x0)
    if t == 0:
        return mean
    if out.v is None:
        sigma = math.sqrt(float(s.beta[t]))
        return mean + sigma * z
    var, _ = model_variance(out.v, t, s)
    return mean + torch.sqrt(var) * z


Denoiser = Callable[[DiffusionState], DenoiserOutput]


def sample_loop(
    denoiser: Denoiser,
    condition: Optional[torch.Tensor],
    shape: Sequence[int],
    s: NoiseSchedule,
    rng_seed: int,
    clip_x0: bool = True,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Generate one sample by iterating p_step from pure noise.

    Draw order (fixed, so runs are reproducible and replayable): the initial
    x_T first, then one z per step from t=T-1 down to t=1.
    """
    g = torch.Generator().manual_seed(rng_seed)
    x = torch.randn(tuple(shape), generator=g, dtype=dtype)
    for t in range(s.T - 1, -1, -1):
        out = denoiser(DiffusionState(x_t=x, t=t, condition=condition))
        z = torch.randn(tuple(shape), generator=g, dtype=dtype) if t > 0 else torch.zeros_like(x)
        x = p_step(x, t, out, s, z, clip_x0=clip_x0)
        if not torch.isfinite(x).all():
            raise DivergedSamplingError(t)
    return x


def loss_simple(eps: torch.Tensor, eps_pred: torch.Tensor) -> torch.Tensor:
    """Mean squared error between true and predicted noise."""
    if eps.shape != eps_pred.shape:
        raise ValueError(f"shape mismatch {tuple(eps.shape)} vs {tuple(eps_pred.shape)}")
    return torch.mean((eps - eps_pred) ** 2)


def gaussian_kl(
    mean1: torch.Tensor,
    log_var1: torch.Tensor,
    mean2: torch.Tensor,
    log_var2: torch.Tensor,
) -> torch.Tensor:
    """Elementwise KL(N(mean1, var1) || N(mean2, var2)) in nats."""
    return 0.5 * (
        log_var2 - log_var1
        + torch.exp(log_var1 - log_var2)
        + (mean1 - mean2) ** 2 * torch.exp(-log_var2)
        - 1.0
    )


def _standard_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * (1.0 + torch.erf(x / math.sqrt(2.0)))


def discretized_gaussian_log_likelihood(
    x: torch.Tensor, mean: torch.Tensor, log_var: torch.Tensor
) -> torch.Tensor:
    """log p(x) for a Gaussian integrated over 256-level bins spanning [-1, 1].

    Each level owns the interval halfway to its neighbours (half-width 1/255);
    the two edge bins absorb the tails, so probabilities over the discrete
    levels sum to one.
    """
    centered = x - mean
    inv_std = torch.exp(-0.5 * log_var)
    cdf_hi = _standard_normal_cdf(inv_std * (centered + 1.0 / 255.0))
    cdf_lo = _standard_normal_cdf(inv_std * (centered - 1.0 / 255.0))
    log_cdf_hi = torch.log(cdf_hi.clamp(min=1e-12))
    log_one_minus_cdf_lo = torch.log((1.0 - cdf_lo).clamp(min=1e-12))
    log_in_between = torch.log((cdf_hi - cdf_lo).clamp(min=1e-12))
    return torch.where(
        x < -0.999,
        log_cdf_hi,
        torch.where(x > 0.999, log_one_minus_cdf_lo, log_in_between),
    )


def _model_mean_and_log_var(
    xt: torch.Tensor,
    t: int,
    out: DenoiserOutput,
    s: NoiseSchedule,
    detach_mean: bool,
    clip_x0: bool,
) -> tuple[torch.Tensor, torch.Tensor]:
    mean = _model_mean(xt, t, out.eps_pred, s, clip_x0)
    if detach_mean:
        mean = mean.detach()
    if out.v is None:
        log_var = torch.full_like(mean, math.log(float(s.beta[t])))
    else:
        _, log_var = model_variance(out.v, t, s)
    return mean, log_var


def loss_vlb_term(
    x0: torch.Tensor,
    xt: torch.Tensor,
    t: int,
    out: DenoiserOutput,
    s: NoiseSchedule,
    detach_mean: bool = False,
    clip_x0: bool = False,
) -> torch.Tensor:
    """One variational-bound term in nats, averaged over elements.

    t >= 1: KL between the tractable posterior and the model's reverse kernel.
    t == 0: discretized decoder negative log-likelihood of x0 given x_1.
    ``detach_mean`` stops gradients through the model mean so that, inside the
    hybrid loss, this term trains only the variance head.
    """
    _check_t(t, s)
    mean, log_var = _model_mean_and_log_var(xt, t, out, s, detach_mean, clip_x0)
    if t == 0:
        nll = -discretized_gaussian_log_likelihood(x0, mean, log_var)
        return nll.mean()
    q = q_posterior(x0, xt, t, s)
    return gaussian_kl(q.mean, q.log_variance, mean, log_var).mean()


def loss_hybrid(
    simple: torch.Tensor, vlb: torch.Tensor, lambda_vlb: float = DEFAULT_LAMBDA_VLB
) -> torch.Tensor:
    """simple + lambda * vlb."""
    if lambda_vlb < 0.0:
        raise ValueError(f"lambda_vlb must be >= 0, got {lambda_vlb}")
    return simple + lambda_vlb * vlb


def training_step_target(
    x0: torch.Tensor,
    condition: Optional[torch.Tensor],
    s: NoiseSchedule,
    rng_seed: int,
    weighting: str = "simple",
    variance_mode: str = "fixed",
    k: float = 1.0,
    gamma: float = 1.0,
    lambda_vlb: float = DEFAULT_LAMBDA_VLB,
) -> tuple[DiffusionState, Callable[..., torch.Tensor]]:
    """Draw (t, eps), form x_t, and return the denoiser input plus a loss closure.

    The closure maps a DenoiserOutput to the configured scalar loss; with
    ``return_parts=True`` it also returns the unweighted pieces for logging.
    """
    if weighting not in ("simple", "p2"):
        raise ValueError(f"unknown weighting {weighting!r}")
    if variance_mode not in ("fixed", "learned"):
        raise ValueError(f"unknown variance_mode {variance_mode!r}")
    if x0.min() < -1.0 or x0.max() > 1.0:
        raise ValueError("x0 must lie in [-1, 1]")
    g = torch.Generator().manual_seed(rng_seed)
    t = int(torch.randint(s.T, (1,), generator=g).item())
    eps = torch.randn(x0.shape, generator=g, dtype=x0.dtype)
    xt = q_sample(x0, t, eps, s)
    state = DiffusionState(x_t=xt, t=t, condition=condition)

    def closure(out: DenoiserOutput, return_parts: bool = False):
        simple = loss_simple(eps, out.eps_pred)
        weighted = simple * p2_weight(s, t, k, gamma) if weighting == "p2" else simple
        if variance_mode == "learned":
            vlb = loss_vlb_term(x0, xt, t, out, s, detach_mean=True)
            loss = loss_hybrid(weighted, vlb, lambda_vlb)
        else:
            vlb = None
            loss = weighted
        if return_parts:
            return loss, {"loss_simple": simple, "loss_vlb": vlb}
        return loss

    return state, closure


def prior_kl_bits_per_dim(x0: torch.Tensor, s: NoiseSchedule) -> float:
    """Closed-form KL(q(x_T | x0) || N(0, I)) in bits per dimension."""
    ab = float(s.alpha_bar[s.T - 1])
    kl = 0.5 * (ab * x0.double() ** 2 + (1.0 - ab) - 1.0 - math.log(1.0 - ab))
    return float(kl.mean()) / math.log(2.0)


def eval_vlb(
    denoiser: Denoiser,
    dataset: Iterable[tuple[torch.Tensor, Optional[torch.Tensor]]],
    s: NoiseSchedule,
    rng_seed: int = 0,
    clip_x0: bool = True,
) -> float:
    """Full variational bound in bits/dim, averaged over a dataset.

    For each sample, every timestep contributes one term evaluated at a seeded
    draw x_t ~ q(x_t | x0); the prior term is computed in closed form.
    """
    totals = []
    for i, (x0, condition) in enumerate(dataset):
        g = torch.Generator().manual_seed(rng_seed + 7919 * i)
        nats = 0.0
        for t in range(s.T):
            eps = torch.randn(x0.shape, generator=g, dtype=x0.dtype)
            xt = q_sample(x0, t, eps, s)
            out = denoiser(DiffusionState(x_t=xt, t=t, condition=condition))
            with torch.no_grad():
                nats += float(loss_vlb_term(x0, xt, t, out, s, clip_x0=clip_x0))
        totals.append(nats / math.log(2.0) + prior_kl_bits_per_dim(x0, s))
    if not totals:
        raise ValueError("eval_vlb needs a non-empty dataset")
    return float(sum(totals) / len(totals))
