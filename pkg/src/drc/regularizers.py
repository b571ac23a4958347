"""Regularizers used by the generator update: TV, orthogonality and pseudo-label cross-entropy."""
from __future__ import annotations

import torch

from .errors import UsageError


def tv_norm(image, per_sample=False):
    """Anisotropic total variation: summed |forward differences| along x and y.

    Works on (..., H, W). Returns one scalar, or per-sample sums over a
    leading batch axis when ``per_sample``.
    """
    dx = (image[..., :, 1:] - image[..., :, :-1]).abs()
    dy = (image[..., 1:, :] - image[..., :-1, :]).abs()
    if per_sample:
        return dx.flatten(1).sum(-1) + dy.flatten(1).sum(-1)
    return dx.sum() + dy.sum()


def orthogonal_reg(weight):
    """Frobenius norm of the off-diagonal part of W W^T, W flattened to (out_channels, -1)."""
    w = weight.reshape(weight.shape[0], -1)
    gram = w @ w.t()
    off = gram * (1.0 - torch.eye(w.shape[0], dtype=w.dtype, device=w.device))
    return torch.sqrt(off.square().sum())


def orthogonal_reg_layers(layers):
    return sum(orthogonal_reg(layer.weight) for layer in layers)


def pseudo_label_loss(p, q_logits, tol=1e-6):
    """Cross-entropy H(P, Q) of classifier logits against a fixed target distribution.

    ``p`` is a (..., K) probability vector and is treated as a constant.
    Batched inputs are averaged over the leading axes.
    """
    p = p.detach()
    if (p < 0).any() or ((p.sum(-1) - 1.0).abs() > tol).any():
        raise UsageError("pseudo-label target must be a probability vector")
    return -(p * torch.log_softmax(q_logits, dim=-1)).sum(-1).mean()
