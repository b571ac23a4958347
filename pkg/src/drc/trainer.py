"""EM training loop: posterior/prior Langevin chains, LEBM update, generator update, checkpoints."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import RunConfig
from .errors import ConfigurationError, NumericalFailure, UsageError
from .langevin import ChainStore, posterior_target_grad, prior_target_grad, run_chain, sample_chain
from .latent_prior import LatentPrior, ebm_param_grad, orthogonal_init_
from .moe_generator import MixtureModel, MixtureOutput, identity_grid
from .regularizers import orthogonal_reg_layers, pseudo_label_loss, tv_norm

CHECKPOINT_VERSION = 1
METRIC_KEYS = ("iter", "loss_total", "loss_partition", "loss_recon", "loss_tv", "loss_pseudo",
               "loss_ortho", "energy_pos_mean", "energy_neg_mean", "seconds")


class AuxClassifier(nn.Module):
    """Strided conv stack mapping a generated region image to K pseudo-class logits."""

    def __init__(self, image_size, channels, n_categories, slope=0.2, in_channels=3):
        super().__init__()
        n_blocks = int(math.log2(image_size // 4))
        if len(channels) != n_blocks:
            raise ConfigurationError(f"classifier for {image_size}px needs {n_blocks} widths")
        layers, width = [], in_channels
        for ch in channels:
            layers += [nn.Conv2d(width, ch, 4, 2, 1), nn.InstanceNorm2d(ch, affine=True), nn.LeakyReLU(slope)]
            width = ch
        layers.append(nn.Conv2d(width, n_categories, 4, 1, 0))
        self.net = nn.Sequential(*layers)
        orthogonal_init_(self)

    def forward(self, x):
        return self.net(x).flatten(1)


class DRC(nn.Module):
    """All learned parts: the latent priors, the mixture model and both auxiliary classifiers."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        mc = cfg.model
        self.cfg = cfg
        self.prior = LatentPrior.from_config(mc)
        self.mixture = MixtureModel.from_config(cfg)
        self.fg_cls = AuxClassifier(mc.image_size, tuple(mc.cls_channels), mc.k_fg, mc.cls_slope)
        self.bg_cls = AuxClassifier(mc.image_size, tuple(mc.cls_channels), mc.k_bg, mc.cls_slope)

    @property
    def layout(self):
        return self.prior.layout

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def _as_tensor(self, images):
        return torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images,
                               dtype=self.dtype)

    def infer(self, images, steps=None, seed=0) -> MixtureOutput:
        """Posterior Langevin from N(0, I) latents, then decode. Returns the final mixture."""
        x = self._as_tensor(images)
        lc = self.cfg.langevin
        steps = lc.test_steps if steps is None else steps
        gen = torch.Generator().manual_seed(int(seed))
        z = torch.randn(x.shape[0], self.layout.total, generator=gen, dtype=x.dtype)
        wtv = self.cfg.train.effective_weight_tv
        z = sample_chain(z, lambda z: posterior_target_grad(self.mixture, self.prior, z, x, wtv),
                         steps, lc.posterior_delta, noise=lc.noise, generator=gen,
                         bound=lc.divergence_bound)
        with torch.no_grad():
            return self.mixture(z, x)

    def infer_pi_f(self, images, steps=None, seed=0):
        return self.infer(images, steps, seed).pi_f[:, 0].numpy()

    def sample_prior(self, n, steps=None, seed=0):
        """Prior Langevin from N(0, I) latents, decoded; returns (z, mixture output)."""
        lc = self.cfg.langevin
        steps = lc.prior_steps if steps is None else steps
        gen = torch.Generator().manual_seed(int(seed))
        z = torch.randn(n, self.layout.total, generator=gen, dtype=self.dtype)
        z = sample_chain(z, lambda z: prior_target_grad(self.prior, z), steps, lc.prior_delta,
                         noise=lc.noise, generator=gen, bound=lc.divergence_bound)
        with torch.no_grad():
            return z, self.mixture(z)


@dataclass
class LossTerms:
    total: torch.Tensor
    partition: torch.Tensor
    recon: torch.Tensor
    tv: torch.Tensor
    pseudo: torch.Tensor
    ortho: torch.Tensor

    def as_floats(self):
        names = ("total", "partition", "recon", "tv", "pseudo", "ortho")
        return {k: getattr(self, k).detach().item() for k in names}


def generator_loss(mix: MixtureOutput, x, cfg, *, epsilon=1e-8, p_fg=None, p_bg=None,
                   q_fg=None, q_bg=None, ortho=None) -> LossTerms:
    """Negative γ-weighted complete-data log-likelihood plus weighted regularizers.

    ``mix.gamma_f`` must already hold the (constant) responsibilities. The
    pseudo-label term needs the LEBM targets ``p_*`` and classifier logits
    ``q_*``; the orthogonality term takes a precomputed value. ``cfg`` is a
    TrainConfig; its ``disable_*`` switches zero the matching weights.
    """
    if mix.gamma_f is None or mix.ll_f is None:
        raise UsageError("generator_loss needs a mixture evaluated against x")
    g = mix.gamma_f.detach()
    zero = mix.ll_f.new_zeros(())
    partition = -(g * torch.log(mix.pi_f + epsilon) + (1 - g) * torch.log(mix.pi_b + epsilon)).mean()
    recon = -(g * mix.ll_f + (1 - g) * mix.ll_b).mean()
    tv = zero
    if cfg.effective_weight_tv:
        tv = tv_norm(mix.bg_rgb_reassigned, per_sample=True).mean()
        if cfg.tv_reduction == "pixel_mean":
            tv = tv / (x.shape[-2] * x.shape[-1])
    pseudo = zero
    if cfg.effective_weight_pseudo and p_fg is not None:
        pseudo = pseudo_label_loss(p_fg, q_fg) + pseudo_label_loss(p_bg, q_bg)
    ortho = zero if ortho is None or not cfg.effective_weight_ortho else ortho
    total = (partition + recon + cfg.effective_weight_tv * tv + cfg.effective_weight_pseudo * pseudo
             + cfg.effective_weight_ortho * ortho)
    terms = LossTerms(total, partition, recon, tv, pseudo, ortho)
    if not torch.isfinite(total):
        raise NumericalFailure(f"non-finite generator loss {terms.as_floats()}", terms=terms.as_floats())
    return terms


def full_generator_loss(model: DRC, z, x, gamma_f=None, feature=None) -> LossTerms:
    """generator_loss with every regularizer evaluated from the model at latents ``z``.

    ``gamma_f`` and ``feature`` pin the two stop-gradient quantities
    (responsibilities, re-assignment conditioning) to given values.
    """
    tc = model.cfg.train
    mix = model.mixture(z, x, feature)
    if gamma_f is not None:
        mix.gamma_f = gamma_f
    with torch.no_grad():
        lf, lb = model.prior.symbolic_logits(z)
        p_fg, p_bg = torch.softmax(lf, -1), torch.softmax(lb, -1)
    q_fg = model.fg_cls(mix.fg_rgb)
    q_bg = model.bg_cls(mix.bg_rgb)
    ortho = orthogonal_reg_layers(model.mixture.image_generator_convs())
    return generator_loss(mix, x, tc, epsilon=model.mixture.epsilon, p_fg=p_fg, p_bg=p_bg,
                          q_fg=q_fg, q_bg=q_bg, ortho=ortho)


GEN_GROUPS = ("fg_net", "bg_net", "pix_net", "fg_cls", "bg_cls")
EBM_GROUPS = ("ebm_fg", "ebm_bg", "ebm_pix")


def _param_groups(model: DRC):
    m = model.mixture
    return {
        "fg_net": m.fg_net, "bg_net": m.bg_net, "pix_net": m.pix_net,
        "fg_cls": model.fg_cls, "bg_cls": model.bg_cls,
        "ebm_fg": model.prior.heads["foreground"], "ebm_bg": model.prior.heads["background"],
        "ebm_pix": model.prior.heads["reassignment"],
    }


@dataclass
class TrainState:
    cfg: RunConfig
    model: DRC
    optimizers: dict
    chains: ChainStore
    rng: torch.Generator
    iteration: int = 0
    history: list = field(default_factory=list)


def configure_determinism(cfg: RunConfig):
    if cfg.train.strict_deterministic:
        torch.use_deterministic_algorithms(True)


def init_state(cfg: RunConfig, n_examples) -> TrainState:
    """Fresh parameters (orthogonal init) and N(0, I) chains for ``n_examples`` examples."""
    if n_examples < 1:
        raise UsageError("training needs a non-empty dataset")
    configure_determinism(cfg)
    dtype = getattr(torch, cfg.train.dtype)
    torch.manual_seed(cfg.seed)
    model = DRC(cfg).to(dtype)
    tc = cfg.train
    betas = (tc.adam_beta1, tc.adam_beta2)
    groups = _param_groups(model)
    optimizers = {}
    for name, module in groups.items():
        lr = tc.lr_ebm if name in EBM_GROUPS else tc.lr_generators
        optimizers[name] = torch.optim.Adam(module.parameters(), lr=lr, betas=betas)
    rng = torch.Generator().manual_seed(cfg.seed)
    chains = ChainStore(n_examples, model.layout.total, persistent=not tc.short_run_chains,
                        generator=rng, dtype=dtype)
    return TrainState(cfg, model, optimizers, chains, rng)


def batch_indices(seed, iteration, n_examples, batch_size):
    """Minibatch for ``iteration``: consecutive slices of a per-epoch permutation."""
    per_epoch = max(1, n_examples // batch_size)
    epoch, j = divmod(iteration, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n_examples)
    return np.sort(perm[j * batch_size:(j + 1) * batch_size])


def em_iteration(state: TrainState, x, indices) -> dict:
    """One EM step on the minibatch ``x`` whose dataset rows are ``indices``."""
    t0 = time.perf_counter()
    cfg, model = state.cfg, state.model
    tc, lc = cfg.train, cfg.langevin
    prior, mixture = model.prior, model.mixture
    indices = torch.as_tensor(indices, dtype=torch.long)

    try:
        z_neg = run_chain(state.chains, "prior", indices, prior=prior, cfg=lc, generator=state.rng)
        z_pos = run_chain(state.chains, "posterior", indices, prior=prior, model=mixture, x=x, cfg=lc,
                          weight_tv=tc.effective_weight_tv, generator=state.rng)
    except NumericalFailure as exc:
        exc.iteration = state.iteration
        raise

    with torch.no_grad():
        lf, lb = prior.symbolic_logits(z_pos)
        p_fg, p_bg = torch.softmax(lf, -1), torch.softmax(lb, -1)
        energy_pos = prior.energy(z_pos).mean().item()
        energy_neg = prior.energy(z_neg).mean().item()

    # LEBM update: ascend mean f(z+) - mean f(z-)
    grads = ebm_param_grad(prior, z_pos, z_neg)
    for p, g in zip(prior.parameters(), grads):
        p.grad = -g
    for name in EBM_GROUPS:
        state.optimizers[name].step()
    prior.zero_grad(set_to_none=True)

    # generator and classifier update at the posterior latents
    for name in GEN_GROUPS:
        state.optimizers[name].zero_grad(set_to_none=True)
    mix = mixture(z_pos, x)
    q_fg = model.fg_cls(mix.fg_rgb)
    q_bg = model.bg_cls(mix.bg_rgb)
    ortho = orthogonal_reg_layers(mixture.image_generator_convs())
    try:
        terms = generator_loss(mix, x, tc, epsilon=mixture.epsilon, p_fg=p_fg, p_bg=p_bg,
                               q_fg=q_fg, q_bg=q_bg, ortho=ortho)
    except NumericalFailure as exc:
        exc.iteration = state.iteration
        raise
    terms.total.backward()
    for name in GEN_GROUPS:
        state.optimizers[name].step()

    with torch.no_grad():
        b, _, h, w = x.shape
        grid_dev = (mix.grid - identity_grid(b, h, w, dtype=x.dtype)).abs().max().item()
        fg_frac = mix.pi_f.mean().item()
    f = terms.as_floats()
    record = {
        "iter": state.iteration,
        "loss_total": f["total"], "loss_partition": f["partition"], "loss_recon": f["recon"],
        "loss_tv": f["tv"], "loss_pseudo": f["pseudo"], "loss_ortho": f["ortho"],
        "energy_pos_mean": energy_pos, "energy_neg_mean": energy_neg,
        "pi_f_mean": fg_frac, "grid_identity_dev": grid_dev,
        "seconds": time.perf_counter() - t0,
    }
    state.iteration += 1
    return record


def save_checkpoint(state: TrainState, path):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": state.cfg.to_dict(),
        "config_hash": state.cfg.hash(),
        "iteration": state.iteration,
        "model": state.model.state_dict(),
        "optimizers": {k: opt.state_dict() for k, opt in state.optimizers.items()},
        "chains": state.chains.state_dict(),
        "rng": state.rng.get_state(),
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> TrainState:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint format {payload.get('format_version')}")
    cfg = RunConfig.from_dict(payload["config"])
    if cfg.hash() != payload["config_hash"]:
        raise ConfigurationError(f"{path}: config hash mismatch")
    state = init_state(cfg, payload["chains"]["z_neg"].shape[0])
    state.model.load_state_dict(payload["model"])
    for k, opt in state.optimizers.items():
        opt.load_state_dict(payload["optimizers"][k])
    state.chains.load_state_dict(payload["chains"])
    state.rng.set_state(payload["rng"])
    state.iteration = payload["iteration"]
    return state


def load_model(path) -> DRC:
    model = load_checkpoint(path).model
    model.eval()
    return model


def _images_tensor(dataset, dtype):
    images = dataset.images if hasattr(dataset, "images") else dataset
    return torch.as_tensor(np.asarray(images), dtype=dtype)


def train(cfg: RunConfig, dataset, out_dir=None, *, resume=None, on_record=None):
    """Run EM iterations until ``cfg.train.iterations``.

    Writes ``metrics.jsonl`` (one record per iteration) and checkpoints to
    ``out_dir`` when given. Returns (final TrainState, list of records for
    the iterations run in this call).
    """
    if resume is not None:
        state = load_checkpoint(resume)
        if state.cfg.hash() != cfg.hash():
            # allow extending the run length, nothing else
            if state.cfg.replace(train={"iterations": cfg.train.iterations}).hash() != cfg.hash():
                raise ConfigurationError("resume config differs from the checkpoint config")
            state.cfg = cfg
            state.model.cfg = cfg
    else:
        state = init_state(cfg, len(dataset))
    images = _images_tensor(dataset, state.model.dtype)
    n = images.shape[0]
    if n != len(state.chains):
        raise UsageError(f"dataset has {n} examples but the chain store has {len(state.chains)}")
    if images.shape[-1] != cfg.model.image_size:
        raise ConfigurationError(f"images are {images.shape[-1]}px, model expects {cfg.model.image_size}px")

    out = Path(out_dir) if out_dir is not None else None
    log = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "metrics.jsonl"
        kept = []
        if resume is not None and log_path.exists():
            kept = [line for line in log_path.read_text().splitlines()
                    if line.strip() and json.loads(line)["iter"] < state.iteration]
        log = open(log_path, "w")
        for line in kept:
            log.write(line + "\n")

    records = []
    tc = cfg.train
    try:
        while state.iteration < tc.iterations:
            idx = batch_indices(cfg.seed, state.iteration, n, tc.batch_size)
            record = em_iteration(state, images[idx], idx)
            records.append(record)
            if log is not None:
                log.write(json.dumps(record) + "\n")
                log.flush()
            if on_record is not None:
                on_record(record)
            if out is not None and (state.iteration % tc.checkpoint_every == 0 or state.iteration == tc.iterations):
                _checkpoint(state, out, tc.keep_checkpoints)
        if out is not None and not (out / f"ckpt_{state.iteration:06d}.pt").exists():
            _checkpoint(state, out, tc.keep_checkpoints)
    finally:
        if log is not None:
            log.close()
    return state, records


def _checkpoint(state, out, keep):
    path = save_checkpoint(state, out / f"ckpt_{state.iteration:06d}.pt")
    for old in sorted(out.glob("ckpt_*.pt"))[:-keep]:
        old.unlink()
    return path


def latest_checkpoint(out_dir):
    ckpts = sorted(Path(out_dir).glob("ckpt_*.pt"))
    return ckpts[-1] if ckpts else None
