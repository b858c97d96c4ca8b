"""Inference-time purification and purifier + classifier pipelines.

Inputs and outputs are in the external [0, 1] range.  Purification is
differentiable end to end (no ``no_grad`` inside), so white-box attacks can
backpropagate through it; wrap calls in ``torch.no_grad()`` for plain inference.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .data_io import PurifierCheckpoint, checkpoint_module, to_external, to_internal
from .diffusion import VarianceSchedule, ddpm_reverse_step, diffuse_step, diffuse_to
from .errors import CapabilityError, ParameterError
from .networks import Classifier, sample_latent

ONESHOT_MODES = ("lightpure", "single_step")


@dataclass
class PurifyTrace:
    generator_invocations: int
    wall_seconds: float
    mode: str


class Purifier:
    """A loaded purifier checkpoint ready for inference.

    For two-step checkpoints the input is taken as x1 and one more forward
    step with ``noise_beta`` (default: the second schedule beta) yields x2.
    With ``rescale_input`` the input is first scaled by sqrt(1 - beta_1), as
    if it were a clean image entering the first step.  Single-step
    checkpoints add noise at the first beta, the level they were trained on.
    """

    def __init__(self, ckpt: PurifierCheckpoint, noise_beta: float | None = None,
                 rescale_input: bool = False, t_star: int | None = None):
        self.mode = ckpt.mode
        if self.mode not in ONESHOT_MODES + ("iterative",):
            raise ParameterError(f"checkpoint mode {self.mode!r} is not a purifier")
        self.schedule = VarianceSchedule(tuple(ckpt.schedule))
        self.generator = checkpoint_module(ckpt, "generator")
        self.generator.requires_grad_(False)
        self.rescale_input = rescale_input
        if self.mode == "lightpure":
            default_beta = self.schedule.betas[1]
        elif self.mode == "single_step":
            default_beta = self.schedule.betas[0]
        else:
            default_beta = None
        self.noise_beta = default_beta if noise_beta is None else float(noise_beta)
        self.t_star = t_star if t_star is not None else self.schedule.T
        self.hash = ckpt.content_hash()
        self.last_trace: Optional[PurifyTrace] = None

    @property
    def stochastic(self) -> bool:
        return True

    def parameters(self):
        return list(self.generator.parameters())

    @property
    def generator_invocations(self) -> int:
        return 0 if self.last_trace is None else self.last_trace.generator_invocations

    def __call__(self, x: torch.Tensor, rng: torch.Generator | None = None) -> torch.Tensor:
        if self.mode == "iterative":
            out, trace = purify_iterative(self, x, self.t_star, rng)
        else:
            out, trace = purify_oneshot(self, x, rng)
        return out


def _as_purifier(p) -> Purifier:
    return p if isinstance(p, Purifier) else Purifier(p)


def _batched(x: torch.Tensor):
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise ParameterError(f"expected (C,H,W) or (N,C,H,W), got {tuple(x.shape)}")


def purify_oneshot(purifier, x_in: torch.Tensor, rng: torch.Generator | None = None):
    """x_in in [0, 1] -> (purified image in [0, 1], trace). One generator call."""
    p = _as_purifier(purifier)
    if p.mode not in ONESHOT_MODES:
        raise ParameterError(f"one-shot purification needs a {ONESHOT_MODES} checkpoint, got {p.mode!r}")
    t0 = time.perf_counter()
    x, squeeze = _batched(x_in)
    x = to_internal(x)
    if p.rescale_input and p.mode == "lightpure":
        x = math.sqrt(1.0 - p.schedule.betas[0]) * x
    x_noisy = diffuse_step(x, p.noise_beta, rng)
    z = sample_latent(x.shape[0], p.generator.cfg.latent_dim, rng, dtype=x.dtype)
    out = to_external(p.generator(x_noisy, z)).clamp(0.0, 1.0)
    trace = PurifyTrace(1, time.perf_counter() - t0, p.mode)
    p.last_trace = trace
    return (out[0] if squeeze else out), trace


def purify_iterative(purifier, x_in: torch.Tensor, t_star: int, rng: torch.Generator | None = None):
    """Diffuse t_star steps in closed form, then t_star reverse posterior steps."""
    p = _as_purifier(purifier)
    if p.mode != "iterative":
        raise ParameterError(f"iterative purification needs an 'iterative' checkpoint, got {p.mode!r}")
    if not 1 <= t_star <= p.schedule.T:
        raise ParameterError(f"t_star={t_star} outside [1, {p.schedule.T}]")
    t0 = time.perf_counter()
    x, squeeze = _batched(x_in)
    h = diffuse_to(to_internal(x), p.schedule, t_star, rng)
    calls = 0
    for t in range(t_star, 0, -1):
        steps = torch.full((h.shape[0],), t, dtype=torch.long)
        eps_hat = p.generator(h, steps)
        calls += 1
        h = ddpm_reverse_step(h, eps_hat, p.schedule, t, rng)
    out = to_external(h).clamp(0.0, 1.0)
    trace = PurifyTrace(calls, time.perf_counter() - t0, "iterative")
    p.last_trace = trace
    return (out[0] if squeeze else out), trace


class Pipeline:
    """Optional purifier followed by a classifier, mapping [0, 1] images to logits.

    ``rng`` feeds the purifier's noise; pass a freshly seeded generator to make
    a stochastic pipeline deterministic (e.g. for white-box gradients).
    """

    def __init__(self, classifier: nn.Module, purifier: Optional[Purifier] = None, name: str = "",
                 differentiable: bool = True):
        self.classifier = classifier
        self.classifier.requires_grad_(False)
        self.purifier = purifier
        self.name = name
        self.differentiable = differentiable

    @property
    def stochastic(self) -> bool:
        return self.purifier is not None

    def __call__(self, x: torch.Tensor, rng: torch.Generator | None = None) -> torch.Tensor:
        if self.purifier is not None:
            x = self.purifier(x, rng)
        return self.classifier(x)

    def predict(self, x: torch.Tensor, rng: torch.Generator | None = None) -> torch.Tensor:
        with torch.no_grad():
            return self(x, rng).argmax(dim=1)

    def parameter_ids(self) -> set[int]:
        """Identity of every parameter tensor, for structural threat-model checks."""
        ids = {id(t) for t in self.classifier.parameters()}
        if self.purifier is not None:
            ids |= {id(t) for t in self.purifier.parameters()}
        return ids

    @property
    def generator_invocations(self) -> int:
        if self.purifier is None or self.purifier.last_trace is None:
            return 0
        return self.purifier.last_trace.generator_invocations


def require_differentiable(pipeline) -> None:
    if not getattr(pipeline, "differentiable", True):
        raise CapabilityError(f"pipeline {getattr(pipeline, 'name', pipeline)!r} does not expose gradients")


def classifier_from_checkpoint(ckpt: PurifierCheckpoint) -> Classifier:
    if ckpt.mode != "classifier":
        raise ParameterError(f"expected a classifier checkpoint, got mode {ckpt.mode!r}")
    return checkpoint_module(ckpt, "classifier")
