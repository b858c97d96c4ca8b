"""Training loops for the purifiers and the downstream classifier.

Purifier trainers receive an unlabeled view of the data; they never touch
labels.  All randomness (init, batch order, diffusion noise, latents) derives
from ``TrainConfig.seed``.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import torch
import torch.nn.functional as F

from .data_io import Dataset, PurifierCheckpoint, infinite_batches, make_checkpoint, to_external, to_internal
from .diffusion import DEFAULT_BETAS, VarianceSchedule, diffuse_step, posterior_sample
from .errors import ParameterError, TrainingDivergedError
from .metrics import SsimConfig, ssim
from .networks import (ClassifierConfig, DiscriminatorConfig, GeneratorConfig, build_classifier,
                       build_discriminator, build_generator, sample_latent)

log = logging.getLogger(__name__)

REFERENCE_LEARNING_RATE = 1e-4
PROB_CLAMP = 1e-7
_clamp_warned = False


@dataclass
class TrainConfig:
    betas: tuple[float, ...] = DEFAULT_BETAS
    ssim_weight: float = 3.0
    learning_rate: float = REFERENCE_LEARNING_RATE
    adam_betas: tuple[float, float] = (0.5, 0.9)
    batch_size: int = 16
    steps: int = 1000
    seed: int = 0
    r1_gamma: float = 0.0
    checkpoint_every: int = 0
    iterative_T: int = 10
    iterative_beta_range: tuple[float, float] = (1e-3, 2e-2)
    classifier_learning_rate: float = 1e-3
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        self.iterative_beta_range = tuple(float(b) for b in self.iterative_beta_range)
        if isinstance(self.generator, dict):
            self.generator = GeneratorConfig(**self.generator)
        if isinstance(self.discriminator, dict):
            self.discriminator = DiscriminatorConfig(**self.discriminator)
        if isinstance(self.classifier, dict):
            self.classifier = ClassifierConfig(**self.classifier)
        if self.ssim_weight < 0:
            raise ParameterError("ssim_weight (lambda) must be >= 0")
        if self.learning_rate <= 0 or self.classifier_learning_rate <= 0:
            raise ParameterError("learning rates must be > 0")
        if self.batch_size < 1 or self.steps < 0:
            raise ParameterError("batch_size must be >= 1 and steps >= 0")
        if self.iterative_T < 1:
            raise ParameterError("iterative_T must be >= 1")
        if self.checkpoint_every < 0:
            raise ParameterError("checkpoint_every must be >= 0 (0 disables snapshots)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["generator"] = self.generator.to_dict()
        d["discriminator"] = self.discriminator.to_dict()
        d["classifier"] = self.classifier.to_dict()
        return _lists(d)

    def for_images(self, image_shape) -> "TrainConfig":
        """Copy with every architecture config matched to ``image_shape``."""
        return replace(self,
                       generator=replace(self.generator, image_shape=tuple(image_shape)),
                       discriminator=replace(self.discriminator, image_shape=tuple(image_shape)),
                       classifier=replace(self.classifier, image_shape=tuple(image_shape)))


def _lists(d):
    if isinstance(d, dict):
        return {k: _lists(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_lists(v) for v in d]
    return d


@dataclass
class TrainLogRecord:
    step: int
    d_loss: float
    g_adv: float
    ssim_term: float
    seconds: float

    def finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.d_loss, self.g_adv, self.ssim_term))


LOG_FIELDS = ("step", "d_loss", "g_adv", "ssim_term")


def write_log_csv(records, path, with_seconds: bool = True) -> None:
    """Training log as CSV; without ``seconds`` the file is identical across reruns."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS + (("seconds",) if with_seconds else ()))
        for r in records:
            row = [r.step, repr(r.d_loss), repr(r.g_adv), repr(r.ssim_term)]
            w.writerow(row + ([repr(r.seconds)] if with_seconds else []))


def read_log_csv(path) -> list[TrainLogRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [TrainLogRecord(int(r["step"]), float(r["d_loss"]), float(r["g_adv"]),
                           float(r["ssim_term"]), float(r.get("seconds") or 0.0)) for r in rows]


# ---------------------------------------------------------------- losses

def _clamp_prob(p: torch.Tensor) -> torch.Tensor:
    global _clamp_warned
    p = torch.as_tensor(p, dtype=torch.get_default_dtype()) if not torch.is_tensor(p) else p
    out = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    if not _clamp_warned and bool((out != p).any()):
        log.warning("discriminator probability clamped to [%g, 1 - %g] before log", PROB_CLAMP, PROB_CLAMP)
        _clamp_warned = True
    return out


def discriminator_loss(d_real, d_fake) -> torch.Tensor:
    """Batch mean of -log D(real) - log(1 - D(fake))."""
    d_real, d_fake = _clamp_prob(d_real), _clamp_prob(d_fake)
    return (-torch.log(d_real)).mean() + (-torch.log1p(-d_fake)).mean()


def generator_adversarial_loss(d_fake) -> torch.Tensor:
    """Non-saturating objective: batch mean of -log D(fake)."""
    return (-torch.log(_clamp_prob(d_fake))).mean()


def generator_loss(d_fake, x1: torch.Tensor, x1_prime: torch.Tensor, ssim_weight: float = 3.0,
                   ssim_cfg: SsimConfig = SsimConfig()) -> torch.Tensor:
    """-log D(x1') + weight * (1 - SSIM(x1, x1')).

    ``x1`` and ``x1_prime`` are in the internal [-1, 1] range; SSIM is computed
    after mapping both to [0, 1].
    """
    adv = generator_adversarial_loss(d_fake)
    if ssim_weight == 0:
        return adv
    return adv + ssim_weight * (1.0 - ssim(to_external(x1), to_external(x1_prime), ssim_cfg))


def r1_penalty(disc, real, cond) -> torch.Tensor:
    real = real.detach().requires_grad_(True)
    logits = disc.logits(real, cond)
    (grad,) = torch.autograd.grad(logits.sum(), real, create_graph=True)
    return grad.pow(2).flatten(1).sum(1).mean()


def _after_step(rec, records, cfg, on_log, on_checkpoint, snapshot) -> None:
    """Log ``rec``, abort on non-finite losses, and emit cadence snapshots."""
    records.append(rec)
    if on_log is not None:
        on_log(rec)
    if not rec.finite():
        raise TrainingDivergedError(f"non-finite loss at step {rec.step}", rec)
    done = rec.step + 1
    if on_checkpoint is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < cfg.steps:
        on_checkpoint(done, snapshot(done))


# ---------------------------------------------------------------- GAN purifiers

def _require_images(dataset: Dataset) -> None:
    if len(dataset) == 0:
        raise ParameterError("dataset is empty")


def _adam(params, lr, betas):
    return torch.optim.Adam(params, lr=lr, betas=tuple(betas))


def _train_gan(dataset: Dataset, cfg: TrainConfig, mode: str, on_log=None, on_checkpoint=None) -> PurifierCheckpoint:
    _require_images(dataset)
    data = dataset.unlabeled()
    cfg = cfg.for_images(data.image_shape)
    schedule = VarianceSchedule(cfg.betas)
    if mode == "lightpure" and schedule.T != 2:
        raise ParameterError("two-step training needs exactly two betas")

    gen = build_generator(cfg.generator, seed=cfg.seed)
    disc = build_discriminator(cfg.discriminator, seed=cfg.seed + 1)
    gen.train()
    disc.train()
    opt_g = _adam(gen.parameters(), cfg.learning_rate, cfg.adam_betas)
    opt_d = _adam(disc.parameters(), cfg.learning_rate, cfg.adam_betas)
    noise = torch.Generator().manual_seed(cfg.seed + 2)
    batches = infinite_batches(data, cfg.batch_size, cfg.seed + 3)
    latent_dim = cfg.generator.latent_dim

    def fake_from(cond):
        z = sample_latent(cond.shape[0], latent_dim, noise)
        x0_hat = gen(cond, z)
        if mode == "lightpure":
            return posterior_sample(cond, x0_hat, schedule, 2, noise)
        return x0_hat

    def snapshot(steps_done, log=()):
        return make_checkpoint(mode, {"generator": gen, "discriminator": disc},
                               schedule=schedule.to_list(), train_config=cfg.to_dict(), seed=cfg.seed,
                               metadata={"dataset": data.name, "n_images": len(data), "steps": steps_done},
                               log=log)

    records = []
    t_start = time.perf_counter()
    for step in range(cfg.steps):
        x0 = to_internal(data.images[next(batches)])
        if mode == "lightpure":
            real = diffuse_step(x0, schedule.betas[0], noise)
            cond = diffuse_step(real, schedule.betas[1], noise)
        else:
            real = x0
            cond = diffuse_step(x0, schedule.betas[0], noise)

        # discriminator half-step on a detached fake
        disc.requires_grad_(True)
        with torch.no_grad():
            fake = fake_from(cond)
        d_loss = discriminator_loss(disc(real, cond), disc(fake, cond))
        total_d = d_loss + (0.5 * cfg.r1_gamma * r1_penalty(disc, real, cond) if cfg.r1_gamma else 0.0)
        opt_d.zero_grad(set_to_none=True)
        total_d.backward()
        opt_d.step()

        # generator half-step against the updated discriminator
        disc.requires_grad_(False)
        fake = fake_from(cond)
        g_adv = generator_adversarial_loss(disc(fake, cond))
        ssim_term = cfg.ssim_weight * (1.0 - ssim(to_external(real), to_external(fake)))
        opt_g.zero_grad(set_to_none=True)
        (g_adv + ssim_term).backward()
        opt_g.step()

        rec = TrainLogRecord(step, d_loss.item(), g_adv.item(), ssim_term.item(),
                             time.perf_counter() - t_start)
        _after_step(rec, records, cfg, on_log, on_checkpoint, snapshot)

    disc.requires_grad_(True)
    gen.eval()
    disc.eval()
    return snapshot(cfg.steps, records)


def train_lightpure(dataset: Dataset, cfg: TrainConfig = TrainConfig(), on_log=None,
                    on_checkpoint=None) -> PurifierCheckpoint:
    """Two-step diffusion GAN purifier.

    Per batch: x1, x2 from two forward steps; x0' = G(x2, z); x1' drawn from
    the posterior q(x1 | x2, x0'); D separates (x1, x2) from (x1', x2); G
    minimizes -log D(x1', x2) + lambda * (1 - SSIM(x1, x1')).
    """
    return _train_gan(dataset, cfg, "lightpure", on_log, on_checkpoint)


def train_bgan(dataset: Dataset, cfg: TrainConfig = TrainConfig(), on_log=None,
               on_checkpoint=None) -> PurifierCheckpoint:
    """Single-step ablation: G denoises x1 straight to x0, SSIM against x0."""
    return _train_gan(dataset, cfg, "single_step", on_log, on_checkpoint)


# ---------------------------------------------------------------- iterative baseline

def iterative_schedule(cfg: TrainConfig) -> VarianceSchedule:
    lo, hi = cfg.iterative_beta_range
    return VarianceSchedule.linear(cfg.iterative_T, lo, hi)


def denoiser_config(cfg: TrainConfig) -> GeneratorConfig:
    return replace(cfg.generator, conditioning="time", output_activation="none")


def train_ddpm_denoiser(dataset: Dataset, cfg: TrainConfig = TrainConfig(), on_log=None,
                        schedule: Optional[VarianceSchedule] = None, on_checkpoint=None) -> PurifierCheckpoint:
    """Noise-prediction network for multi-step purification (MSE on eps, uniform t)."""
    _require_images(dataset)
    data = dataset.unlabeled()
    cfg = cfg.for_images(data.image_shape)
    schedule = schedule or iterative_schedule(cfg)
    net = build_generator(denoiser_config(cfg), seed=cfg.seed)
    net.train()
    opt = _adam(net.parameters(), cfg.learning_rate, cfg.adam_betas)
    noise = torch.Generator().manual_seed(cfg.seed + 2)
    batches = infinite_batches(data, cfg.batch_size, cfg.seed + 3)

    def snapshot(steps_done, log=()):
        return make_checkpoint("iterative", {"generator": net}, schedule=schedule.to_list(),
                               train_config=cfg.to_dict(), seed=cfg.seed,
                               metadata={"dataset": data.name, "n_images": len(data), "steps": steps_done},
                               log=log)

    records = []
    t_start = time.perf_counter()
    for step in range(cfg.steps):
        x0 = to_internal(data.images[next(batches)])
        n = x0.shape[0]
        t = torch.randint(1, schedule.T + 1, (n,), generator=noise)
        eps = torch.randn(x0.shape, generator=noise)
        ab = schedule.alpha_bars[t].to(x0.dtype)[:, None, None, None]
        x_t = ab.sqrt() * x0 + (1 - ab).sqrt() * eps
        loss = F.mse_loss(net(x_t, t), eps)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        rec = TrainLogRecord(step, 0.0, loss.item(), 0.0, time.perf_counter() - t_start)
        _after_step(rec, records, cfg, on_log, on_checkpoint, snapshot)
    net.eval()
    return snapshot(cfg.steps, records)


# ---------------------------------------------------------------- classifier

def train_classifier(dataset: Dataset, cfg: TrainConfig = TrainConfig(), on_log=None,
                     on_checkpoint=None) -> PurifierCheckpoint:
    """Plain cross-entropy training of the downstream classifier."""
    _require_images(dataset)
    if not dataset.labeled:
        raise ParameterError("classifier training needs a labeled dataset")
    cfg = cfg.for_images(dataset.image_shape)
    cfg = replace(cfg, classifier=replace(cfg.classifier, num_classes=dataset.num_classes))
    clf = build_classifier(cfg.classifier, seed=cfg.seed)
    clf.train()
    opt = torch.optim.Adam(clf.parameters(), lr=cfg.classifier_learning_rate)
    batches = infinite_batches(dataset, cfg.batch_size, cfg.seed + 3)

    def snapshot(steps_done, log=()):
        return make_checkpoint("classifier", {"classifier": clf}, train_config=cfg.to_dict(), seed=cfg.seed,
                               metadata={"dataset": dataset.name, "n_images": len(dataset), "steps": steps_done},
                               log=log)

    records = []
    t_start = time.perf_counter()
    for step in range(cfg.steps):
        idx = next(batches)
        loss = F.cross_entropy(clf(dataset.images[idx]), dataset.labels[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        rec = TrainLogRecord(step, 0.0, loss.item(), 0.0, time.perf_counter() - t_start)
        _after_step(rec, records, cfg, on_log, on_checkpoint, snapshot)
    clf.eval()
    return snapshot(cfg.steps, records)


TRAINERS = {
    "lightpure": train_lightpure,
    "single_step": train_bgan,
    "iterative": train_ddpm_denoiser,
    "classifier": train_classifier,
}
