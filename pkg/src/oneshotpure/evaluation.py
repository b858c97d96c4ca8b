"""Clean/robust accuracy, per-image latency benchmarking and report files."""

from __future__ import annotations

import csv
import inspect
import io
import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .attacks import AttackBudget, ThreatModel, build_threat_model, run_attack
from .data_io import Dataset
from .errors import ConfigurationError, ParameterError, PurifyError

log = logging.getLogger(__name__)

REFERENCE_LATENCY_SAMPLES = 1000
DEFAULT_WARMUP = 3
_ATTACK_SEED_OFFSET = 1_000_003


@dataclass
class AttackConfig:
    kind: str = "pgd"
    budget: AttackBudget = field(default_factory=AttackBudget)

    @property
    def label(self) -> str:
        return f"{self.kind}@eps={self.budget.epsilon:.6g}"


@dataclass
class LatencyStats:
    mean_ms: float
    std_ms: float
    p50_ms: float
    p95_ms: float
    samples: int
    generator_invocations: float
    warmup: int = DEFAULT_WARMUP

    def __post_init__(self):
        if self.samples <= 0:
            raise ParameterError("latency sample count must be > 0")


@dataclass
class EvalReport:
    clean_accuracy: Optional[float] = None
    robust_accuracy: dict[str, float] = field(default_factory=dict)
    latency: Optional[LatencyStats] = None
    provenance: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    def __post_init__(self):
        vals = list(self.robust_accuracy.values())
        if self.clean_accuracy is not None:
            vals.append(self.clean_accuracy)
        for v in vals:
            if not 0.0 <= v <= 100.0:
                raise ParameterError(f"percentage {v} outside [0, 100]")

    def to_dict(self) -> dict:
        return {
            "clean_accuracy": self.clean_accuracy,
            "robust_accuracy": dict(sorted(self.robust_accuracy.items())),
            "latency": None if self.latency is None else asdict(self.latency),
            "provenance": self.provenance,
            "failures": self.failures,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        lat = d.get("latency")
        return cls(d.get("clean_accuracy"), dict(d.get("robust_accuracy", {})),
                   None if lat is None else LatencyStats(**lat), d.get("provenance", {}),
                   list(d.get("failures", [])))


def _batch_rng(seed: int, b: int) -> torch.Generator:
    # one stream per batch so clean and attacked passes see identical purifier noise
    return torch.Generator().manual_seed(int(np.random.SeedSequence([seed, b]).generate_state(1)[0]))


def _require_labels(ds: Dataset) -> None:
    if not ds.labeled:
        raise ParameterError("accuracy needs a labeled dataset")
    if len(ds) == 0:
        raise ParameterError("dataset is empty")


def _correct(pipeline, x, y, rng) -> torch.Tensor:
    with torch.no_grad():
        return pipeline(x, rng).argmax(1) == y


def clean_accuracy(pipeline, dataset: Dataset, seed: int = 0, batch_size: int = 100) -> float:
    """Percent of images the (optionally purified) pipeline classifies correctly."""
    _require_labels(dataset)
    hits = 0
    for b, start in enumerate(range(0, len(dataset), batch_size)):
        x = dataset.images[start:start + batch_size]
        y = dataset.labels[start:start + batch_size]
        hits += int(_correct(pipeline, x, y, _batch_rng(seed, b)).sum())
    return 100.0 * hits / len(dataset)


@dataclass
class AdversarialSet:
    """Worst-case candidate per image: the first one that fools the target, else the first."""

    images: torch.Tensor
    fooled: torch.Tensor
    candidate: torch.Tensor
    linf: torch.Tensor
    failures: list = field(default_factory=list)


def adversarial_examples(gradient_source, eval_target, attack: AttackConfig, dataset: Dataset,
                         seed: int = 0, batch_size: int = 100, failures: list | None = None) -> AdversarialSet:
    """Attack every image with gradients from ``gradient_source``; score on ``eval_target``.

    An attack that raises on an image is logged in ``failures`` and that image
    keeps its clean input.
    """
    _require_labels(dataset)
    if attack.kind in ("apgd-dlr", "apgd-rand") and dataset.num_classes < 4:
        raise ConfigurationError(f"{attack.kind} needs K >= 4 classes (DLR loss), dataset has "
                                 f"K={dataset.num_classes}", key="attack")
    attack_rng = torch.Generator().manual_seed(seed + _ATTACK_SEED_OFFSET)
    failures = failures if failures is not None else []
    imgs, fooled, chosen = [], [], []
    for b, start in enumerate(range(0, len(dataset), batch_size)):
        x = dataset.images[start:start + batch_size]
        y = dataset.labels[start:start + batch_size]
        try:
            cands = run_attack(attack.kind, gradient_source, x, y, attack.budget, attack_rng, dataset.num_classes)
        except ConfigurationError:
            raise
        except PurifyError:
            cands = _per_image_attack(attack, gradient_source, x, y, attack_rng, dataset.num_classes,
                                      start, failures)
        best = cands[0].clone()
        hit = torch.zeros(len(y), dtype=torch.bool)
        idx = torch.zeros(len(y), dtype=torch.long)
        for j, xa in enumerate(cands):
            new = ~_correct(eval_target, xa, y, _batch_rng(seed, b)) & ~hit
            best[new] = xa[new]
            idx[new] = j
            hit |= new
        imgs.append(best)
        fooled.append(hit)
        chosen.append(idx)
    images = torch.cat(imgs)
    linf = (images - dataset.images).abs().flatten(1).amax(1)
    return AdversarialSet(images, torch.cat(fooled), torch.cat(chosen), linf, failures)


def robust_accuracy_pipelines(gradient_source, eval_target, attack: AttackConfig, dataset: Dataset,
                              seed: int = 0, batch_size: int = 100, failures: list | None = None) -> float:
    """Percent of images still classified correctly by ``eval_target`` on every candidate."""
    adv = adversarial_examples(gradient_source, eval_target, attack, dataset, seed, batch_size, failures)
    return 100.0 * float((~adv.fooled).sum()) / len(dataset)


def _per_image_attack(attack, model, x, y, rng, k, offset, failures):
    per_image = []
    for i in range(len(y)):
        try:
            per_image.append(run_attack(attack.kind, model, x[i:i + 1], y[i:i + 1], attack.budget, rng, k))
        except PurifyError as e:
            log.warning("attack %s failed on image %d: %s", attack.kind, offset + i, e)
            failures.append({"index": offset + i, "attack": attack.kind, "error": str(e)})
            per_image.append(None)
    n_cand = max((len(c) for c in per_image if c is not None), default=1)
    cands = []
    for j in range(n_cand):
        rows = [x[i:i + 1] if c is None else c[min(j, len(c) - 1)] for i, c in enumerate(per_image)]
        cands.append(torch.cat(rows))
    return cands


def robust_accuracy(threat: ThreatModel | str, attack: AttackConfig, registry: dict, dataset: Dataset,
                    seed: int = 0, batch_size: int = 100, failures: list | None = None,
                    purifier_options: dict | None = None) -> float:
    """Robust accuracy of the target purifier + classifier under ``threat``."""
    grad_source, target = build_threat_model(threat, registry, purifier_options)
    return robust_accuracy_pipelines(grad_source, target, attack, dataset, seed, batch_size, failures)


def latency_benchmark(pipeline: Callable, dataset: Dataset | torch.Tensor, n: int = REFERENCE_LATENCY_SAMPLES,
                      warmup: int = DEFAULT_WARMUP, seed: int = 0,
                      clock: Callable[[], float] = time.perf_counter) -> LatencyStats:
    """Time ``pipeline`` on one image at a time, strictly sequentially.

    The clock is read just before the call and just after the prediction is
    available.  ``warmup`` extra calls run first and are discarded.  Images are
    reused cyclically if ``n`` exceeds the dataset size.
    """
    if n < 1:
        raise ParameterError("n must be >= 1")
    images = dataset.images if isinstance(dataset, Dataset) else dataset
    if len(images) == 0:
        raise ParameterError("dataset is empty")
    rng = torch.Generator().manual_seed(seed)
    samples, invocations = [], []
    with torch.no_grad():
        for i in range(warmup + n):
            x = images[i % len(images)].unsqueeze(0)
            t0 = clock()
            out = _call(pipeline, x, rng)
            if torch.is_tensor(out):
                out.argmax(dim=-1).tolist()  # force the result to exist before stopping the clock
            t1 = clock()
            if i >= warmup:
                samples.append((t1 - t0) * 1000.0)
                invocations.append(getattr(pipeline, "generator_invocations", 0))
    arr = np.asarray(samples)
    return LatencyStats(
        mean_ms=float(arr.mean()),
        std_ms=float(arr.std(ddof=1)) if n > 1 else 0.0,
        p50_ms=float(np.percentile(arr, 50)),
        p95_ms=float(np.percentile(arr, 95)),
        samples=n,
        generator_invocations=float(statistics.fmean(invocations)),
        warmup=warmup,
    )


def _call(pipeline, x, rng):
    # plain callables (e.g. benchmark stubs) may not take an rng
    try:
        inspect.signature(pipeline).bind(x, rng)
    except TypeError:
        return pipeline(x)
    except ValueError:  # no introspectable signature
        pass
    return pipeline(x, rng)


# ---------------------------------------------------------------- report files

def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def emit_report(report: EvalReport, out_dir: str | Path) -> list[Path]:
    """Write report.json, tables.csv and plot_data/*.csv (two columns each)."""
    out = Path(out_dir)
    try:
        (out / "plot_data").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise PurifyError(f"cannot create report directory {out}: {e}") from e
    d = report.to_dict()
    files = {}
    files[out / "report.json"] = json.dumps(d, sort_keys=True, indent=2, allow_nan=False) + "\n"

    rows = []
    if report.clean_accuracy is not None:
        rows.append(["clean_accuracy", "clean", _fmt(report.clean_accuracy)])
    for key, val in sorted(report.robust_accuracy.items()):
        rows.append(["robust_accuracy", key, _fmt(val)])
    if report.latency is not None:
        for k in ("mean_ms", "std_ms", "p50_ms", "p95_ms", "samples", "generator_invocations"):
            rows.append(["latency", k, _fmt(getattr(report.latency, k))])
    files[out / "tables.csv"] = _csv_text(["metric", "config", "value"], rows)

    files[out / "plot_data" / "robustness.csv"] = _csv_text(
        ["config", "robust_accuracy"], [[k, _fmt(v)] for k, v in sorted(report.robust_accuracy.items())])
    acc_rows = [["clean", _fmt(report.clean_accuracy)]] if report.clean_accuracy is not None else []
    files[out / "plot_data" / "accuracy.csv"] = _csv_text(["config", "accuracy"], acc_rows)
    lat_rows = [["mean_ms", _fmt(report.latency.mean_ms)]] if report.latency is not None else []
    files[out / "plot_data" / "latency.csv"] = _csv_text(["statistic", "milliseconds"], lat_rows)

    try:
        for path, text in files.items():
            path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise PurifyError(f"cannot write report files in {out}: {e}") from e
    return list(files)


def load_report(path: str | Path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
