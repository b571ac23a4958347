"""Langevin sampling from a latent energy-based prior, and learning one from samples.

The prior is exp(-e(z)) N(0, I). With a linear energy e(z) = -a z the
tilted density is again Gaussian, N(a, 1), so both sampling and the
learning gradient can be checked against closed forms.

    python demos/langevin_on_a_tilted_gaussian.py
"""
import torch
from torch import nn

from drc.langevin import sample_chain, step_size
from drc.latent_prior import ebm_param_grad


class LinearEnergy(nn.Module):
    def __init__(self, a):
        super().__init__()
        self.a = nn.Parameter(torch.tensor(float(a)))

    def energy(self, z):
        return -self.a * z[:, 0]


def grad_log_prior(model):
    def grad(z):
        z = z.detach().requires_grad_(True)
        logp = -model.energy(z) - 0.5 * z.square().sum(-1)
        return torch.autograd.grad(logp.sum(), z)[0]
    return grad


def main():
    torch.manual_seed(0)
    gen = torch.Generator().manual_seed(0)

    # 1. sampling: 4000 chains, 400 steps with delta = 0.4 (s = 0.08)
    model = LinearEnergy(1.5)
    z = sample_chain(torch.randn(4000, 1, generator=gen), grad_log_prior(model), 400, 0.4, generator=gen)
    print(f"step size s = {step_size(0.4):.3f}")
    print(f"chain mean {z.mean():.3f} (target 1.5), variance {z.var():.3f} (target 1.0, "
          f"plus O(s) discretization bias)")

    # 2. learning: data latents come from N(2, 1); start the tilt at 0 and
    # follow mean grad f(z+) - mean grad f(z-), with z- from short prior chains
    data = 2.0 + torch.randn(4000, 1, generator=gen)
    student = LinearEnergy(0.0)
    opt = torch.optim.Adam(student.parameters(), lr=0.05, betas=(0.5, 0.999))
    for it in range(150):
        z_neg = sample_chain(torch.randn(4000, 1, generator=gen), grad_log_prior(student), 60, 0.4,
                             generator=gen)
        (g,) = ebm_param_grad(student, data, z_neg)
        opt.zero_grad()
        student.a.grad = -g  # ascend the log-likelihood
        opt.step()
        if it % 30 == 0 or it == 149:
            print(f"iter {it:3d}  a = {student.a.item():.3f}")
    print("learned tilt should approach 2.0")


if __name__ == "__main__":
    main()
