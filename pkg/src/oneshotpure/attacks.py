"""L-infinity evasion attacks and threat-model assembly.

Attacks take a *gradient source*: any callable ``model(x, rng) -> output``
(typically a :class:`~oneshotpure.purifier.Pipeline` returning logits) and a
loss, given by name (``"ce"``, ``"dlr"``) or as a callable
``loss(output, y) -> per-sample tensor``.  Images are batches (N, C, H, W) in
[0, 1]; every output stays inside the epsilon ball and the pixel range.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional, Union

import torch

from .data_io import PurifierCheckpoint, load_checkpoint
from .errors import CapabilityError, ConfigurationError, ParameterError
from .purifier import Pipeline, Purifier, classifier_from_checkpoint, require_differentiable

REFERENCE_EPSILON = 8 / 255
REFERENCE_EOT_SAMPLES = 20
REFERENCE_RESTARTS = 1
REFERENCE_TARGET_CLASSES = 9

# Auto-PGD checkpoint schedule and oscillation threshold.
APGD_FIRST_CHECKPOINT = 0.22
APGD_CHECKPOINT_DECAY = 0.03
APGD_MIN_CHECKPOINT = 0.06
APGD_RHO = 0.75
APGD_MOMENTUM = 0.75

ATTACK_KINDS = ("fgsm", "pgd", "apgd-ce", "apgd-dlr", "apgd-rand")
THREAT_KINDS = ("black", "grayA", "grayB", "white")

LossArg = Union[str, Callable[[torch.Tensor, torch.Tensor], torch.Tensor]]


@dataclass
class AttackBudget:
    norm: str = "Linf"
    epsilon: float = REFERENCE_EPSILON
    alpha: float = 2 / 255
    iterations: int = 10
    restarts: int = REFERENCE_RESTARTS
    eot_samples: int = REFERENCE_EOT_SAMPLES
    target_classes: int = REFERENCE_TARGET_CLASSES
    random_start: bool = False
    clip_min: Optional[float] = 0.0
    clip_max: Optional[float] = 1.0

    def __post_init__(self):
        if self.norm != "Linf":
            raise ParameterError("only the Linf norm is supported")
        if self.epsilon < 0 or self.alpha < 0:
            raise ParameterError("epsilon and alpha must be >= 0")
        if self.iterations < 0:
            raise ParameterError("iterations must be >= 0")
        if self.restarts < 1:
            raise ParameterError("restarts must be >= 1")
        if self.eot_samples < 1:
            raise ParameterError("eot_samples must be >= 1")
        if self.target_classes < 0:
            raise ParameterError("target_classes must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ThreatModel:
    """Which components the attacker differentiates through.

    black: a shadow classifier, no purifier.  grayA: the target classifier
    alone.  grayB: a surrogate purifier in front of the (surrogate or target)
    classifier.  white: the target purifier and classifier.  Evaluation always
    runs on the target purifier + target classifier.
    """

    kind: str

    def __post_init__(self):
        if self.kind not in THREAT_KINDS:
            raise ConfigurationError(f"unknown threat model {self.kind!r}; expected one of {THREAT_KINDS}",
                                     key="threat")


# ---------------------------------------------------------------- losses

def ce_loss(logits: torch.Tensor, y) -> torch.Tensor:
    """-z_y + logsumexp(z); per sample for (N, K) logits, scalar for (K,)."""
    single = logits.dim() == 1
    z = logits.unsqueeze(0) if single else logits
    y = torch.as_tensor(y, dtype=torch.long).reshape(-1)
    k = z.shape[1]
    if bool(((y < 0) | (y >= k)).any()):
        raise ParameterError(f"label outside [0, {k})")
    out = torch.logsumexp(z, dim=1) - z.gather(1, y[:, None]).squeeze(1)
    return out[0] if single else out


def _dlr_parts(z, y):
    srt = z.sort(dim=1, descending=True).values
    z_y = z.gather(1, y[:, None]).squeeze(1)
    top_is_y = (srt[:, 0] == z_y)
    other_max = torch.where(top_is_y, srt[:, 1], srt[:, 0])
    return z_y, other_max, srt


def dlr_loss(logits: torch.Tensor, y, safe: bool = False) -> torch.Tensor:
    """-(z_y - max_{i != y} z_i) / (z_pi1 - z_pi3), logits sorted decreasingly.

    ``safe`` adds 1e-12 to the denominator instead of raising on constant
    logits; attack loops use it.
    """
    single = logits.dim() == 1
    z = logits.unsqueeze(0) if single else logits
    y = torch.as_tensor(y, dtype=torch.long).reshape(-1)
    k = z.shape[1]
    if k < 4:
        raise ParameterError(f"DLR loss needs at least 4 classes, got K={k}")
    if bool(((y < 0) | (y >= k)).any()):
        raise ParameterError(f"label outside [0, {k})")
    z_y, other, srt = _dlr_parts(z, y)
    denom = srt[:, 0] - srt[:, 2]
    if safe:
        denom = denom + 1e-12
    elif bool((denom == 0).any()):
        raise ParameterError("DLR denominator is zero: top and third logits are equal (constant logits?)")
    out = -(z_y - other) / denom
    return out[0] if single else out


def dlr_targeted_loss(logits: torch.Tensor, y, target) -> torch.Tensor:
    """Targeted DLR: -(z_y - z_t) / (z_pi1 - (z_pi3 + z_pi4) / 2)."""
    z = logits
    y = torch.as_tensor(y, dtype=torch.long).reshape(-1)
    target = torch.as_tensor(target, dtype=torch.long).reshape(-1)
    srt = z.sort(dim=1, descending=True).values
    z_y = z.gather(1, y[:, None]).squeeze(1)
    z_t = z.gather(1, target[:, None]).squeeze(1)
    return -(z_y - z_t) / (srt[:, 0] - 0.5 * (srt[:, 2] + srt[:, 3]) + 1e-12)


def resolve_loss(loss: LossArg):
    if callable(loss):
        return loss
    if loss == "ce":
        return ce_loss
    if loss == "dlr":
        return lambda z, y: dlr_loss(z, y, safe=True)
    raise ParameterError(f"unknown loss {loss!r}")


# ---------------------------------------------------------------- gradients

def _clip_pixels(x, budget_or_range):
    lo, hi = budget_or_range
    if lo is not None or hi is not None:
        x = x.clamp(min=lo, max=hi)
    return x


def _ball_bounds(x, eps):
    """Per-pixel [lo, hi] whose distance to x, as computed in x's dtype, never exceeds eps."""
    if x.dtype != torch.float32:
        lo, hi = x - eps, x + eps
        for _ in range(8):
            over_hi, over_lo = (hi - x) > eps, (x - lo) > eps
            if not (over_hi.any() or over_lo.any()):
                break
            hi = torch.where(over_hi, torch.nextafter(hi, x), hi)
            lo = torch.where(over_lo, torch.nextafter(lo, x), lo)
        return lo, hi
    # float32: largest representable radius <= eps, then exact double sums rounded toward x
    e32 = torch.tensor(eps, dtype=torch.float32)
    if float(e32) > eps:
        e32 = torch.nextafter(e32, torch.tensor(0.0))
    xd, ed = x.double(), e32.double()
    hi_d, lo_d = xd + ed, xd - ed
    hi, lo = hi_d.float(), lo_d.float()
    hi = torch.where(hi.double() > hi_d, torch.nextafter(hi, x), hi)
    lo = torch.where(lo.double() < lo_d, torch.nextafter(lo, x), lo)
    return lo, hi


def _project(x_adv, x, eps, pix_range):
    lo, hi = _ball_bounds(x, eps)
    x_adv = torch.max(torch.min(x_adv, hi), lo)
    return _clip_pixels(x_adv, pix_range)


def loss_and_grad(model, x: torch.Tensor, y: torch.Tensor, loss: LossArg = "ce", n: int = 1,
                  rng: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-sample loss and input gradient, each averaged over ``n`` randomness draws."""
    require_differentiable(model)
    if n < 1:
        raise ParameterError("sample count must be >= 1")
    fn = resolve_loss(loss)
    total_loss = torch.zeros(x.shape[0], dtype=x.dtype)
    total_grad = torch.zeros_like(x)
    for _ in range(n):
        with torch.enable_grad():
            xi = x.detach().clone().requires_grad_(True)
            per_sample = fn(model(xi, rng), y)
            (g,) = torch.autograd.grad(per_sample.sum(), xi)
        if g is None:
            raise CapabilityError("gradient source produced no input gradient")
        total_loss += per_sample.detach().to(x.dtype)
        total_grad += g
    return total_loss / n, total_grad / n


def eot_gradient(model, x: torch.Tensor, y: torch.Tensor, n: int = REFERENCE_EOT_SAMPLES,
                 rng: torch.Generator | None = None, loss: LossArg = "ce") -> torch.Tensor:
    """Mean of ``n`` input gradients, each with an independent randomness draw."""
    return loss_and_grad(model, x, y, loss, n, rng)[1]


def _eot_count(model, budget: AttackBudget) -> int:
    return budget.eot_samples if getattr(model, "stochastic", False) else 1


# ---------------------------------------------------------------- attacks

def fgsm(model, x: torch.Tensor, y: torch.Tensor, epsilon: float = REFERENCE_EPSILON, loss: LossArg = "ce",
         rng: torch.Generator | None = None, pixel_range=(0.0, 1.0), eot_samples: int = 1) -> torch.Tensor:
    """x + epsilon * sign(grad_x loss), clipped to ``pixel_range`` (None disables)."""
    if epsilon < 0:
        raise ParameterError("epsilon must be >= 0")
    pixel_range = pixel_range or (None, None)
    if epsilon == 0:
        require_differentiable(model)
        return x.detach().clone()
    _, g = loss_and_grad(model, x, y, loss, eot_samples, rng)
    x = x.detach()
    lo, hi = _ball_bounds(x, epsilon)
    sign = g.sign()
    stepped = torch.where(sign > 0, hi, torch.where(sign < 0, lo, x))
    return _clip_pixels(stepped, pixel_range)


def _random_start(x, eps, rng, pix_range):
    delta = (torch.rand(x.shape, generator=rng, dtype=x.dtype) * 2 - 1) * eps
    return _project(x + delta, x, eps, pix_range)


def pgd(model, x: torch.Tensor, y: torch.Tensor, budget: AttackBudget = AttackBudget(),
        rng: torch.Generator | None = None, loss: LossArg = "ce") -> torch.Tensor:
    """Iterated sign steps of size alpha, projected onto the epsilon ball and pixel range."""
    require_differentiable(model)
    pix = (budget.clip_min, budget.clip_max)
    x = x.detach()
    eps = budget.epsilon
    x_adv = _random_start(x, eps, rng, pix) if budget.random_start else x.clone()
    n_eot = _eot_count(model, budget)
    for _ in range(budget.iterations):
        _, g = loss_and_grad(model, x_adv, y, loss, n_eot, rng)
        x_adv = _project(x_adv + budget.alpha * g.sign(), x, eps, pix)
    return x_adv


def apgd_checkpoints(n_iter: int) -> list[int]:
    """Iteration indices at which the step size is reconsidered."""
    p = [0.0, APGD_FIRST_CHECKPOINT]
    while p[-1] < 1:
        p.append(p[-1] + max(p[-1] - p[-2] - APGD_CHECKPOINT_DECAY, APGD_MIN_CHECKPOINT))
    # round before ceil so 0.57 * 100 stays 57; drop repeats that small budgets produce
    return sorted({math.ceil(round(q * n_iter, 9)) for q in p if q <= 1 + 1e-12})


def apgd(model, x: torch.Tensor, y: torch.Tensor, budget: AttackBudget = AttackBudget(),
         loss_kind: LossArg = "ce", rng: torch.Generator | None = None, return_history: bool = False):
    """Auto-PGD: momentum sign steps with an adaptive step size.

    The step starts at 2*epsilon.  At each checkpoint a sample's step is halved
    and its iterate reset to its best point if (a) the loss increased in fewer
    than ``APGD_RHO`` of the steps since the last checkpoint, or (b) neither
    the step size nor the best loss changed over the last interval.  The
    returned iterate is always the best-loss point seen; with
    ``return_history`` a dict with per-iteration losses is returned too.
    """
    require_differentiable(model)
    if isinstance(loss_kind, str) and loss_kind == "dlr":
        k = _num_classes(model, x)
        if k < 4:
            raise ParameterError(f"APGD-DLR needs at least 4 classes, got K={k}")
    pix = (budget.clip_min, budget.clip_max)
    x = x.detach()
    n_eot = _eot_count(model, budget)
    eps = budget.epsilon

    best_x, best_loss, history = None, None, []
    for restart in range(budget.restarts):
        rand = budget.random_start or restart > 0
        x0 = _random_start(x, eps, rng, pix) if rand else x.clone()
        xb, lb, hist = _apgd_run(model, x, x0, y, eps, budget.iterations, loss_kind, rng, n_eot, pix)
        history.append(hist)
        if best_x is None:
            best_x, best_loss = xb, lb
        else:
            better = lb > best_loss
            best_x[better] = xb[better]
            best_loss = torch.where(better, lb, best_loss)
    if return_history:
        return best_x, {"losses": history, "best_loss": best_loss}
    return best_x


def _num_classes(model, x):
    cfg = getattr(getattr(model, "classifier", None), "cfg", None)
    if cfg is not None:
        return cfg.num_classes
    with torch.no_grad():
        return model(x[:1], None).shape[1]


def _apgd_run(model, x, x_start, y, eps, n_iter, loss, rng, n_eot, pix):
    n = x.shape[0]
    bshape = (n,) + (1,) * (x.dim() - 1)
    loss_cur, grad = loss_and_grad(model, x_start, y, loss, n_eot, rng)
    losses = [loss_cur.clone()]
    x_adv = x_start.clone()
    x_best, loss_best, grad_best = x_adv.clone(), loss_cur.clone(), grad.clone()
    if n_iter == 0 or eps == 0:
        return x_best, loss_best, torch.stack(losses)

    step = torch.full(bshape, 2.0 * eps, dtype=x.dtype)
    checkpoints = apgd_checkpoints(n_iter)
    next_cp = 1
    increases = torch.zeros(n, dtype=torch.long)
    loss_best_last = loss_best.clone()
    reduced_last = torch.zeros(n, dtype=torch.bool)
    x_prev = x_adv.clone()

    for k in range(n_iter):
        a = 1.0 if k == 0 else APGD_MOMENTUM
        z = _project(x_adv + step * grad.sign(), x, eps, pix)
        x_new = _project(x_adv + a * (z - x_adv) + (1 - a) * (x_adv - x_prev), x, eps, pix)
        x_prev, x_adv = x_adv, x_new
        loss_new, grad = loss_and_grad(model, x_adv, y, loss, n_eot, rng)
        increases += (loss_new > losses[-1]).long()
        losses.append(loss_new.clone())
        improved = loss_new > loss_best
        x_best[improved] = x_adv[improved]
        grad_best[improved] = grad[improved]
        loss_best = torch.where(improved, loss_new, loss_best)

        if next_cp < len(checkpoints) and k + 1 == checkpoints[next_cp]:
            interval = checkpoints[next_cp] - checkpoints[next_cp - 1]
            cond_a = increases < APGD_RHO * interval
            cond_b = (~reduced_last) & (loss_best_last >= loss_best)
            reduce = cond_a | cond_b
            step[reduce] /= 2.0
            x_adv[reduce] = x_best[reduce]
            grad[reduce] = grad_best[reduce]
            # restart momentum from the reset point
            x_prev[reduce] = x_adv[reduce]
            reduced_last = reduce
            loss_best_last = loss_best.clone()
            increases.zero_()
            next_cp += 1
    return x_best, loss_best, torch.stack(losses)


def apgd_targeted(model, x: torch.Tensor, y: torch.Tensor, budget: AttackBudget = AttackBudget(),
                  rng: torch.Generator | None = None) -> list[torch.Tensor]:
    """One targeted-DLR APGD run per target among the top non-true classes."""
    require_differentiable(model)
    with torch.no_grad():
        logits = model(x, rng)
    k = logits.shape[1]
    n_targets = min(budget.target_classes, k - 1)
    order = logits.sort(dim=1, descending=True).indices
    outs = []
    for j in range(n_targets):
        # j-th highest class excluding the true label
        target = torch.stack([row[row != yi][j] for row, yi in zip(order, y)])
        fn = lambda z, yy, t=target: dlr_targeted_loss(z, yy, t)
        outs.append(apgd(model, x, y, budget, fn, rng))
    return outs


def run_attack(kind: str, model, x: torch.Tensor, y: torch.Tensor, budget: AttackBudget,
               rng: torch.Generator | None = None, num_classes: int | None = None) -> list[torch.Tensor]:
    """Adversarial candidates for ``kind``; an image is robust only if it survives all of them."""
    if kind not in ATTACK_KINDS:
        raise ConfigurationError(f"unknown attack {kind!r}; expected one of {ATTACK_KINDS}", key="attack")
    k = num_classes if num_classes is not None else _num_classes(model, x)
    if kind in ("apgd-dlr", "apgd-rand") and k < 4:
        raise ConfigurationError(f"{kind} needs K >= 4 classes (DLR loss), dataset has K={k}", key="attack")
    if kind == "fgsm":
        return [fgsm(model, x, y, budget.epsilon, "ce", rng, (budget.clip_min, budget.clip_max),
                     _eot_count(model, budget))]
    if kind == "pgd":
        return [pgd(model, x, y, budget, rng)]
    if kind == "apgd-ce":
        return [apgd(model, x, y, budget, "ce", rng)]
    dlr = (apgd_targeted(model, x, y, budget, rng) if k >= 10 and budget.target_classes > 0
           else [apgd(model, x, y, budget, "dlr", rng)])
    if kind == "apgd-dlr":
        return dlr
    return [apgd(model, x, y, budget, "ce", rng)] + dlr


# ---------------------------------------------------------------- threat models

def _load(entry):
    if isinstance(entry, PurifierCheckpoint):
        return entry
    if isinstance(entry, (str, Path)):
        return load_checkpoint(entry)
    raise ConfigurationError(f"cannot interpret registry entry {entry!r}")


def _need(registry, key, threat):
    entry = registry.get(key)
    if entry is None:
        raise ConfigurationError(f"threat model {threat!r} needs checkpoint {key!r}", key=key)
    return _load(entry)


def build_threat_model(threat: ThreatModel | str, registry: dict,
                       purifier_options: dict | None = None) -> tuple[Pipeline, Pipeline]:
    """Return (gradient_source, eval_target) pipelines.

    ``registry`` maps ``classifier``, ``purifier``, ``shadow_classifier``,
    ``surrogate_purifier`` and optionally ``surrogate_classifier`` to
    checkpoints or checkpoint paths.
    """
    threat = threat if isinstance(threat, ThreatModel) else ThreatModel(threat)
    opts = purifier_options or {}
    clf = classifier_from_checkpoint(_need(registry, "classifier", threat.kind))
    target_pur = Purifier(_need(registry, "purifier", threat.kind), **opts)
    eval_target = Pipeline(clf, target_pur, name="target")
    if threat.kind == "white":
        return eval_target, eval_target
    if threat.kind == "grayA":
        return Pipeline(clf, None, name="grayA:target-classifier"), eval_target
    if threat.kind == "grayB":
        sur_pur = Purifier(_need(registry, "surrogate_purifier", threat.kind), **opts)
        sur_clf = (classifier_from_checkpoint(_load(registry["surrogate_classifier"]))
                   if registry.get("surrogate_classifier") is not None else clf)
        return Pipeline(sur_clf, sur_pur, name="grayB:surrogate"), eval_target
    shadow = classifier_from_checkpoint(_need(registry, "shadow_classifier", threat.kind))
    return Pipeline(shadow, None, name="black:shadow"), eval_target
