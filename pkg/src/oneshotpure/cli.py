"""Command-line entry point: ``oneshotpure {train,attack,eval,bench,purify}``.

Exit codes: 0 success, 2 usage, 3 configuration, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as C
from .attacks import ATTACK_KINDS, THREAT_KINDS, build_threat_model
from .data_io import (Dataset, _load_image, load_checkpoint, load_dataset, make_synthetic, save_checkpoint,
                      save_image_directory)
from .errors import ConfigurationError, PurifyError
from .evaluation import (AttackConfig, EvalReport, adversarial_examples, clean_accuracy, emit_report,
                         latency_benchmark, robust_accuracy)
from .purifier import Pipeline, Purifier, classifier_from_checkpoint
from .training import TRAINERS, write_log_csv

log = logging.getLogger("oneshotpure")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (see README for the schema)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-key override, e.g. train.steps=200; wins over the file")
    common.add_argument("--seed", type=int, help="run seed (overrides the config)")
    common.add_argument("--out", help=f"output directory (default: ${C.OUTPUT_ROOT_ENV} or ./runs, "
                                      "plus the workflow name)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="oneshotpure", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="workflow", required=True, metavar="{train,attack,eval,bench,purify}")

    t = sub.add_parser("train", parents=[common], help="train a purifier or classifier")
    t.add_argument("--mode", choices=C.TRAIN_MODES)
    t.add_argument("--steps", type=int)

    a = sub.add_parser("attack", parents=[common], help="craft adversarial examples")
    a.add_argument("--threat", choices=THREAT_KINDS)
    a.add_argument("--attack", choices=ATTACK_KINDS)

    sub.add_parser("eval", parents=[common], help="clean/robust accuracy and latency report")

    b = sub.add_parser("bench", parents=[common], help="per-image latency")
    b.add_argument("--n", type=int, help="timed images (default 1000)")

    pu = sub.add_parser("purify", parents=[common], help="purify image files")
    pu.add_argument("inputs", nargs="+", help="image files")
    return p


def _resolve(args) -> dict:
    over = list(args.overrides)
    flags = {"mode": "train.mode", "steps": "train.steps", "threat": "attack.threat",
             "attack": "attack.kind", "n": "bench.n", "seed": "seed"}
    extra = {}
    for attr, key in flags.items():
        val = getattr(args, attr, None)
        if val is not None:
            extra[key] = val
    # dedicated flags win over --set
    return C.resolve_config(args.config, over + [f"{k}={json.dumps(v)}" for k, v in extra.items()])


def _out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(C.OUTPUT_ROOT_ENV, "runs")) / args.workflow


def load_data(cfg: dict, split: str) -> Dataset:
    d = cfg["data"]
    if d["source"] == "synthetic":
        n = d["n"] if split == "train" else d["test_n"]
        ds = make_synthetic(n, d["classes"], d["size"], rng=d["seed"] + (0 if split == "train" else 1),
                            separability=d["separability"], noise=d["noise"], split=split)
    else:
        if not d["path"]:
            raise ConfigurationError("data.path is required for file-backed datasets", key="data.path")
        fmt = "cifar10" if d["source"] == "cifar10" else "imagedir"
        kw = {"num_classes": d["classes"]} if fmt == "cifar10" else {
            "size": d["size"], "split_file": d["split_file"], "split": split}
        ds = load_dataset(d["path"], fmt, **kw)
    if d["limit"] is not None:
        ds = ds.subset(range(min(int(d["limit"]), len(ds))))
    return ds


def _registry(cfg: dict) -> dict:
    return {k: v for k, v in cfg["checkpoints"].items() if v is not None}


def _purifier_options(cfg: dict) -> dict:
    p = cfg["purify"]
    return {"noise_beta": p["noise_beta"], "rescale_input": p["rescale_input"], "t_star": p["t_star"]}


def _need(cfg, key):
    path = cfg["checkpoints"][key]
    if path is None:
        raise ConfigurationError(f"checkpoints.{key} must name a checkpoint directory", key=f"checkpoints.{key}")
    return load_checkpoint(path)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- workflows

def run_train(cfg: dict, out: Path) -> None:
    mode = cfg["train"]["mode"]
    ds = load_data(cfg, "train")
    if mode != "classifier":
        ds = ds.unlabeled()
    tc = C.train_config(cfg)

    def on_checkpoint(step, snap):
        save_checkpoint(snap, out / "snapshots" / f"step_{step:06d}")

    ckpt = TRAINERS[mode](ds, tc, on_log=_progress(tc.steps), on_checkpoint=on_checkpoint)
    digest = save_checkpoint(ckpt, out / "checkpoint")
    # the checkpoint directory is bitwise reproducible; this log adds wall-clock seconds
    write_log_csv(ckpt.log, out / "train_log.csv")
    log.info("checkpoint %s (%s)", out / "checkpoint", digest[:12])


def _progress(total):
    every = max(1, total // 10)

    def on_log(rec):
        if rec.step % every == 0 or rec.step == total - 1:
            log.info("step %d/%d d_loss=%.4f g_adv=%.4f ssim_term=%.4f", rec.step + 1, total, rec.d_loss,
                     rec.g_adv, rec.ssim_term)
    return on_log


def run_attack(cfg: dict, out: Path) -> None:
    ds = load_data(cfg, "test")
    a = cfg["attack"]
    attack = AttackConfig(a["kind"], C.budget(cfg))
    if a["kind"] in ("apgd-dlr", "apgd-rand") and ds.num_classes < 4:
        raise ConfigurationError(f"{a['kind']} needs K >= 4 classes (DLR loss); dataset has "
                                 f"K={ds.num_classes}", key="attack.kind")
    grad, target = build_threat_model(a["threat"], _registry(cfg), _purifier_options(cfg))
    adv = adversarial_examples(grad, target, attack, ds, cfg["seed"], a["batch_size"])
    adv_ds = Dataset(adv.images, ds.labels, ds.num_classes, "adversarial", ds.name)
    names = save_image_directory(adv_ds, out / "images")
    np.save(out / "adversarial.npy", adv.images.numpy().astype(np.float32))
    _write_json(out / "manifest.json", {
        "attack": a["kind"], "threat": a["threat"], "seed": cfg["seed"], "epsilon": attack.budget.epsilon,
        "robust_accuracy": 100.0 * float((~adv.fooled).sum()) / len(ds),
        "failures": adv.failures,
        "images": [{"index": i, "file": f"images/{n}", "label": int(ds.labels[i]),
                    "linf": float(adv.linf[i]), "fooled": bool(adv.fooled[i]), "candidate": int(adv.candidate[i])}
                   for i, n in enumerate(names)],
        "note": "adversarial.npy holds the exact float32 images; the PNGs are 8-bit previews",
    })


def _provenance(cfg, ds) -> dict:
    hashes = {}
    for key, path in _registry(cfg).items():
        hashes[key] = load_checkpoint(path).content_hash()
    return {"seed": cfg["seed"], "dataset": ds.name, "dataset_hash": ds.content_hash(), "n_images": len(ds),
            "checkpoints": hashes, "config_hash": _config_hash(cfg)}


def _config_hash(cfg) -> str:
    return hashlib.sha256(C.snapshot_text(cfg).encode()).hexdigest()


def _target_pipeline(cfg) -> Pipeline:
    clf = classifier_from_checkpoint(_need(cfg, "classifier"))
    pur = None
    if cfg["checkpoints"]["purifier"] is not None:
        pur = Purifier(_need(cfg, "purifier"), **_purifier_options(cfg))
    return Pipeline(clf, pur, name="target")


def run_eval(cfg: dict, out: Path) -> None:
    ds = load_data(cfg, "test")
    e = cfg["eval"]
    target = _target_pipeline(cfg)
    report = EvalReport(provenance=_provenance(cfg, ds))
    report.clean_accuracy = clean_accuracy(target, ds, cfg["seed"], e["batch_size"])
    for threat in e["threats"]:
        for kind in e["attacks"]:
            attack = AttackConfig(kind, C.budget(cfg))
            acc = robust_accuracy(threat, attack, _registry(cfg), ds, cfg["seed"], e["batch_size"],
                                  report.failures, _purifier_options(cfg))
            report.robust_accuracy[f"{threat}/{attack.label}"] = acc
            log.info("%s/%s robust accuracy %.2f%%", threat, attack.label, acc)
    if e["latency"]:
        report.latency = latency_benchmark(target, ds, cfg["bench"]["n"], cfg["bench"]["warmup"], cfg["seed"])
    emit_report(report, out)


def run_bench(cfg: dict, out: Path) -> None:
    ds = load_data(cfg, "test")
    target = _target_pipeline(cfg)
    if not cfg["bench"]["with_purifier"]:
        target = Pipeline(target.classifier, None, name="classifier-only")
    stats = latency_benchmark(target, ds, cfg["bench"]["n"], cfg["bench"]["warmup"], cfg["seed"])
    _write_json(out / "latency.json", {**stats.__dict__, "pipeline": target.name})
    log.info("latency mean %.3f ms (p95 %.3f ms) over %d images", stats.mean_ms, stats.p95_ms, stats.samples)


def run_purify(cfg: dict, out: Path, inputs: list[str]) -> None:
    from PIL import Image

    pur = Purifier(_need(cfg, "purifier"), **_purifier_options(cfg))
    c, h, w = pur.generator.cfg.image_shape
    traces = []
    for i, name in enumerate(inputs):
        src = Path(name)
        if not src.is_file():
            raise PurifyError(f"input image {src} not found")
        x = torch.from_numpy(_load_image(src, h, c))
        rng = torch.Generator().manual_seed(int(np.random.SeedSequence([cfg["seed"], i]).generate_state(1)[0]))
        with torch.no_grad():
            y = pur(x, rng)
        arr = np.round(y.numpy() * 255.0).astype(np.uint8)
        arr = arr[0] if c == 1 else arr.transpose(1, 2, 0)
        dst = out / f"{src.stem}_purified.png"
        Image.fromarray(arr).save(dst)
        t = pur.last_trace
        traces.append({"input": str(src), "output": dst.name, "mode": t.mode,
                       "generator_invocations": t.generator_invocations, "wall_seconds": t.wall_seconds,
                       "purifier_hash": pur.hash})
    _write_json(out / "trace.json", traces)


# ---------------------------------------------------------------- dispatch

def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)  # single-threaded runs reproduce bitwise
    try:
        cfg = _resolve(args)
        out = _out_dir(args)
        C.write_snapshot(cfg, out)
        if args.workflow == "train":
            run_train(cfg, out)
        elif args.workflow == "attack":
            run_attack(cfg, out)
        elif args.workflow == "eval":
            run_eval(cfg, out)
        elif args.workflow == "bench":
            run_bench(cfg, out)
        else:
            run_purify(cfg, out, args.inputs)
    except ConfigurationError as e:
        key = f" [key: {e.key}]" if e.key else ""
        print(f"configuration error{key}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (PurifyError, OSError) as e:
        print(f"error ({type(e).__name__}): {e}", file=sys.stderr)
        return EXIT_RUNTIME
    print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
