"""Latent-space energy-based priors.

Each prior tilts a unit Gaussian by a learned energy, p(z) ∝ exp(-e(z)) N(z; 0, I).
The foreground and background heads emit K symbolic logits and use
e(z) = -logsumexp(logits), i.e. the one-hot code y is marginalized out. The
re-assignment head emits the scalar energy directly.
"""
from __future__ import annotations

import torch
from torch import nn

from .errors import ConfigurationError, NumericalFailure, UsageError

ROLES = ("foreground", "background", "reassignment")
SYMBOLIC_ROLES = ("foreground", "background")


def orthogonal_init_(module: nn.Module, gain: float = 1.0) -> nn.Module:
    """Orthogonal weights, zero biases, for every linear/conv layer in ``module``."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d)):
            nn.init.orthogonal_(m.weight, gain=gain)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    return module


class EnergyHead(nn.Module):
    """MLP energy for one latent role.

    Symbolic roles default to two hidden layers and K outputs, the
    re-assignment role to three hidden layers and a single output.
    """

    def __init__(self, z_dim, role, n_categories=None, hidden=200, n_hidden=None, slope=0.2):
        super().__init__()
        if role not in ROLES:
            raise ConfigurationError(f"unknown latent role {role!r}")
        if role in SYMBOLIC_ROLES:
            if n_categories is None or n_categories < 2:
                raise ConfigurationError(f"{role} head needs n_categories >= 2")
            out = n_categories
        else:
            out = 1
        if n_hidden is None:
            n_hidden = 2 if role in SYMBOLIC_ROLES else 3
        self.role = role
        self.z_dim = z_dim
        self.out_features = out
        layers = []
        width = z_dim
        for _ in range(n_hidden):
            layers += [nn.Linear(width, hidden), nn.LeakyReLU(slope)]
            width = hidden
        layers.append(nn.Linear(width, out))
        self.net = nn.Sequential(*layers)
        orthogonal_init_(self)

    @property
    def symbolic(self) -> bool:
        return self.role in SYMBOLIC_ROLES

    def _check(self, z):
        if z.shape[-1] != self.z_dim:
            raise ConfigurationError(
                f"{self.role} head expects latent dim {self.z_dim}, got {z.shape[-1]}"
            )

    def forward(self, z):
        self._check(z)
        return self.net(z)

    def symbolic_logits(self, z):
        if not self.symbolic:
            raise UsageError("symbolic_logits is undefined for the reassignment role")
        return self(z)

    def energy(self, z):
        """Per-sample energy, shape ``z.shape[:-1]``."""
        out = self(z)
        if self.symbolic:
            return -torch.logsumexp(out, dim=-1)
        return out.squeeze(-1)


def prior_logdensity_grad(head: EnergyHead, z: torch.Tensor) -> torch.Tensor:
    """Gradient in z of the unnormalized log prior -e(z) - |z|^2 / 2."""
    with torch.enable_grad():
        z = z.detach().requires_grad_(True)
        logp = -head.energy(z).sum() - 0.5 * z.square().sum()
        (grad,) = torch.autograd.grad(logp, z)
    if not torch.isfinite(grad).all():
        raise NumericalFailure(f"non-finite {head.role} prior gradient", z=z.detach())
    return grad


class LatentLayout:
    """Slices of the concatenated latent [z_fg | z_bg | z_pix]."""

    def __init__(self, z_fg, z_bg, z_pix):
        self.dims = {"foreground": z_fg, "background": z_bg, "reassignment": z_pix}
        self.total = z_fg + z_bg + z_pix

    def split(self, z):
        if z.shape[-1] != self.total:
            raise ConfigurationError(f"expected latent dim {self.total}, got {z.shape[-1]}")
        return dict(zip(ROLES, torch.split(z, [self.dims[r] for r in ROLES], dim=-1)))

    def join(self, parts):
        return torch.cat([parts[r] for r in ROLES], dim=-1)


class LatentPrior(nn.Module):
    """The three independent LEBMs; the joint prior factorizes over roles."""

    def __init__(self, z_fg, z_bg, z_pix, k_fg, k_bg, hidden=200, slope=0.2):
        super().__init__()
        self.layout = LatentLayout(z_fg, z_bg, z_pix)
        self.heads = nn.ModuleDict({
            "foreground": EnergyHead(z_fg, "foreground", k_fg, hidden=hidden, slope=slope),
            "background": EnergyHead(z_bg, "background", k_bg, hidden=hidden, slope=slope),
            "reassignment": EnergyHead(z_pix, "reassignment", hidden=hidden, slope=slope),
        })

    @classmethod
    def from_config(cls, mc):
        return cls(mc.z_fg, mc.z_bg, mc.z_pix, mc.k_fg, mc.k_bg, mc.ebm_hidden, mc.ebm_slope)

    def energies(self, z):
        parts = self.layout.split(z)
        return {role: self.heads[role].energy(parts[role]) for role in ROLES}

    def energy(self, z):
        e = self.energies(z)
        return e["foreground"] + e["background"] + e["reassignment"]

    def symbolic_logits(self, z):
        parts = self.layout.split(z)
        return (self.heads["foreground"].symbolic_logits(parts["foreground"]),
                self.heads["background"].symbolic_logits(parts["background"]))

    def log_density(self, z):
        """Unnormalized per-sample log prior."""
        return -self.energy(z) - 0.5 * z.square().sum(-1)


def ebm_param_grad(model: nn.Module, z_pos: torch.Tensor, z_neg: torch.Tensor):
    """Monte-Carlo MLE gradient for the prior parameters.

    Returns mean grad f(z_pos) - mean grad f(z_neg) with f = -energy, one
    tensor per parameter of ``model`` (an ascent direction). ``model`` only
    needs an ``energy(z)`` method returning per-sample energies.
    """
    if z_pos.shape[0] == 0 or z_neg.shape[0] == 0:
        raise UsageError("ebm_param_grad needs non-empty posterior and prior batches")
    if z_pos.shape[1:] != z_neg.shape[1:]:
        raise UsageError(f"latent shapes differ: {tuple(z_pos.shape)} vs {tuple(z_neg.shape)}")
    params = [p for p in model.parameters() if p.requires_grad]
    with torch.enable_grad():
        objective = model.energy(z_neg.detach()).mean() - model.energy(z_pos.detach()).mean()
        grads = torch.autograd.grad(objective, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
