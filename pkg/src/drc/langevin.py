"""Langevin dynamics over the latent variables, for the prior and the surrogate posterior."""
from __future__ import annotations

import math
import threading
from typing import Callable, Optional

import torch

from .errors import ChainDivergence, NumericalFailure, UsageError
from .latent_prior import ROLES, LatentPrior, prior_logdensity_grad
from .moe_generator import MixtureModel, expected_complete_loglik
from .regularizers import tv_norm


def step_size(delta: float) -> float:
    """Langevin step s for a noise scale delta (delta = sqrt(2 s))."""
    return 0.5 * delta * delta


def langevin_step(z, grad_log_q, s, noise=None, *, step=None):
    """z + s * grad log Q(z) + sqrt(2 s) * noise; ``noise=None`` runs the noiseless flow."""
    if s <= 0:
        raise UsageError(f"Langevin step size must be positive, got {s}")
    z_new = z + s * grad_log_q
    if noise is not None:
        z_new = z_new + math.sqrt(2.0 * s) * noise
    if not torch.isfinite(z_new).all():
        raise NumericalFailure(f"non-finite Langevin update at step {step}", z=z.detach(), step=step)
    return z_new


def prior_target_grad(prior: LatentPrior, z):
    """Gradient of the unnormalized log prior; each role's block is computed independently."""
    parts = prior.layout.split(z)
    grads = {role: prior_logdensity_grad(prior.heads[role], parts[role]) for role in ROLES}
    return prior.layout.join(grads)


def posterior_objective(model: MixtureModel, prior: LatentPrior, z, x, weight_tv=0.01, gamma_f=None,
                        feature=None):
    """Per-sample log of the surrogate posterior target.

    log p(z) + sum_i [γ (log π_f + ll_f) + (1 - γ)(log π_b + ll_b)] - weight_tv * TV(background).
    γ is the current responsibility unless supplied, and never carries gradient.
    Returns (objective, mixture output).
    """
    mix = model(z, x, feature)
    gamma = mix.gamma_f if gamma_f is None else gamma_f.detach()
    ecll = expected_complete_loglik(mix, gamma, model.epsilon).flatten(1).sum(-1)
    obj = prior.log_density(z) + ecll
    if weight_tv:
        obj = obj - weight_tv * tv_norm(mix.bg_rgb_reassigned, per_sample=True)
    return obj, mix


def posterior_target_grad(model, prior, z, x, weight_tv=0.01, gamma_f=None, feature=None):
    """Gradient in z of :func:`posterior_objective` summed over the batch."""
    with torch.enable_grad():
        z = z.detach().requires_grad_(True)
        obj, _ = posterior_objective(model, prior, z, x, weight_tv, gamma_f, feature)
        (grad,) = torch.autograd.grad(obj.sum(), z)
    if not torch.isfinite(grad).all():
        raise NumericalFailure("non-finite posterior gradient", z=z.detach(),
                               terms={"objective": obj.detach()})
    return grad


def sample_chain(z, grad_fn: Callable, n_steps, delta, *, noise=True,
                 generator: Optional[torch.Generator] = None, bound=1e3):
    """Run ``n_steps`` Langevin updates from ``z`` with step size delta**2 / 2."""
    s = step_size(delta)
    z = z.detach()
    for t in range(n_steps):
        eps = None
        if noise:
            eps = torch.randn(z.shape, generator=generator, dtype=z.dtype, device=z.device)
        try:
            z = langevin_step(z, grad_fn(z), s, eps, step=t).detach()
        except NumericalFailure as exc:
            if exc.step is None:
                exc.step = t
            raise
        if z.abs().max() > bound:
            raise ChainDivergence(f"Langevin chain left |z|_inf <= {bound:g} at step {t}", z=z, step=t)
    return z


class ChainStore:
    """Per-example persistent latents for the prior (negative) and posterior (positive) chains."""

    def __init__(self, n_examples, z_dim, *, persistent=True, generator=None, dtype=torch.float32):
        self.persistent = persistent
        self.z_dim = z_dim
        self.dtype = dtype
        self._lock = threading.Lock()
        self.z_neg = torch.randn(n_examples, z_dim, generator=generator, dtype=dtype)
        self.z_pos = torch.randn(n_examples, z_dim, generator=generator, dtype=dtype)

    @property
    def mode(self):
        return "persistent" if self.persistent else "short-run"

    def __len__(self):
        return self.z_neg.shape[0]

    def _table(self, target):
        if target == "prior":
            return self.z_neg
        if target == "posterior":
            return self.z_pos
        raise UsageError(f"unknown chain target {target!r}")

    def get(self, target, indices, generator=None):
        """Initial state for a chain update; short-run chains restart from N(0, I)."""
        if not self.persistent:
            return torch.randn(len(indices), self.z_dim, generator=generator, dtype=self.dtype)
        with self._lock:
            return self._table(target)[indices].clone()

    def put(self, target, indices, z):
        if not self.persistent:
            return
        with self._lock:
            self._table(target)[indices] = z.detach().to(self.dtype)

    def state_dict(self):
        return {"z_neg": self.z_neg.clone(), "z_pos": self.z_pos.clone(), "persistent": self.persistent}

    def load_state_dict(self, state):
        self.z_neg = state["z_neg"].clone()
        self.z_pos = state["z_pos"].clone()
        self.persistent = state["persistent"]
        self.dtype = self.z_neg.dtype


def run_chain(store: ChainStore, target, indices, *, prior, model=None, x=None, cfg, weight_tv=0.01,
              generator=None):
    """Advance the chains of the examples in ``indices`` and store the result.

    ``cfg`` is a LangevinConfig; ``target`` is "prior" or "posterior".
    """
    z0 = store.get(target, indices, generator)
    if target == "prior":
        z = sample_chain(z0, lambda z: prior_target_grad(prior, z), cfg.prior_steps, cfg.prior_delta,
                         noise=cfg.noise, generator=generator, bound=cfg.divergence_bound)
    elif target == "posterior":
        if model is None or x is None:
            raise UsageError("posterior chains need the mixture model and the observed images")
        z = sample_chain(z0, lambda z: posterior_target_grad(model, prior, z, x, weight_tv),
                         cfg.posterior_steps, cfg.posterior_delta, noise=cfg.noise,
                         generator=generator, bound=cfg.divergence_bound)
    else:
        raise UsageError(f"unknown chain target {target!r}")
    store.put(target, indices, z)
    return z
