"""Datasets, synthetic data and checkpoint persistence.

Checkpoints are directories holding ``manifest.json`` plus ``tensors.bin``, a
blob of concatenated row-major little-endian float32 arrays.  The manifest
lists each tensor's name, shape, dtype and byte offset so either file can be
checked against the other.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch

from .errors import IntegrityError, ParameterError, ParseError, ValidationError

CIFAR_RECORD_BYTES = 3073
CHECKPOINT_MODES = ("lightpure", "single_step", "iterative", "classifier")
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "tensors.bin"
FORMAT_VERSION = 1


def to_internal(x: torch.Tensor) -> torch.Tensor:
    """[0, 1] -> [-1, 1]."""
    return x * 2.0 - 1.0


def to_external(x: torch.Tensor) -> torch.Tensor:
    """[-1, 1] -> [0, 1]."""
    return (x + 1.0) * 0.5


@dataclass
class Dataset:
    """Images in [0, 1] with shape (N, C, H, W) and optional integer labels."""

    images: torch.Tensor
    labels: Optional[torch.Tensor]
    num_classes: int
    split: str = "train"
    name: str = "unnamed"

    def __post_init__(self):
        if self.images.dim() != 4:
            raise ValidationError(f"images must be (N, C, H, W), got {tuple(self.images.shape)}")
        if not torch.isfinite(self.images).all():
            raise ValidationError("images contain non-finite values")
        if self.labels is not None:
            if self.labels.shape != (self.images.shape[0],):
                raise ValidationError("labels must be a vector with one entry per image")
            if len(self.labels) and (int(self.labels.min()) < 0 or int(self.labels.max()) >= self.num_classes):
                raise ValidationError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    def unlabeled(self) -> "Dataset":
        """View without labels, handed to purifier trainers."""
        return Dataset(self.images, None, self.num_classes, self.split, self.name)

    def subset(self, idx) -> "Dataset":
        idx = torch.as_tensor(idx, dtype=torch.long)
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.images[idx], labels, self.num_classes, self.split, self.name)

    def batches(self, batch_size: int, seed: int | None = None, shuffle: bool = True) -> Iterator[torch.Tensor]:
        """Index batches for one epoch; order depends only on (len, seed)."""
        n = len(self)
        if shuffle:
            g = torch.Generator().manual_seed(0 if seed is None else seed)
            order = torch.randperm(n, generator=g)
        else:
            order = torch.arange(n)
        for start in range(0, n, batch_size):
            yield order[start:start + batch_size]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.to(torch.float32).contiguous().numpy().tobytes())
        if self.labels is not None:
            h.update(self.labels.to(torch.int64).numpy().tobytes())
        return h.hexdigest()


def infinite_batches(ds: Dataset, batch_size: int, seed: int) -> Iterator[torch.Tensor]:
    """Endless stream of index batches; epoch e is shuffled with seed + e."""
    epoch = 0
    while True:
        for idx in ds.batches(batch_size, seed=seed + epoch):
            yield idx
        epoch += 1


# ---------------------------------------------------------------- synthetic data

SHAPES = ("disc", "square", "triangle", "cross", "ring", "diamond", "hbar", "vbar", "dot_pair", "corner")
PALETTE = np.array([
    [0.90, 0.25, 0.20], [0.20, 0.45, 0.90], [0.25, 0.80, 0.30], [0.95, 0.80, 0.20], [0.70, 0.30, 0.85],
    [0.20, 0.80, 0.80], [0.95, 0.55, 0.15], [0.55, 0.55, 0.55], [0.85, 0.40, 0.65], [0.45, 0.30, 0.15],
])


def _shape_mask(kind: str, u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    """Signed-distance-like field (<0 inside) for a shape of radius r at the origin."""
    if kind == "disc":
        return np.hypot(u, v) - r
    if kind == "square":
        return np.maximum(np.abs(u), np.abs(v)) - 0.8 * r
    if kind == "triangle":
        return np.maximum.reduce([-v - 0.5 * r, 0.866 * u + 0.5 * v - 0.5 * r, -0.866 * u + 0.5 * v - 0.5 * r])
    if kind == "cross":
        return np.minimum(np.maximum(np.abs(u) - 0.3 * r, np.abs(v) - r),
                          np.maximum(np.abs(v) - 0.3 * r, np.abs(u) - r))
    if kind == "ring":
        return np.abs(np.hypot(u, v) - 0.75 * r) - 0.25 * r
    if kind == "diamond":
        return np.abs(u) + np.abs(v) - r
    if kind == "hbar":
        return np.maximum(np.abs(u) - r, np.abs(v) - 0.35 * r)
    if kind == "vbar":
        return np.maximum(np.abs(v) - r, np.abs(u) - 0.35 * r)
    if kind == "dot_pair":
        return np.minimum(np.hypot(u - 0.5 * r, v) - 0.4 * r, np.hypot(u + 0.5 * r, v) - 0.4 * r)
    if kind == "corner":
        return np.minimum(np.maximum(np.abs(u + 0.3 * r) - 0.3 * r, np.abs(v) - r),
                          np.maximum(np.abs(v - 0.7 * r) - 0.3 * r, np.abs(u) - r))
    raise ParameterError(f"unknown shape {kind!r}")


def make_synthetic(n: int, classes: int, size: int = 32, rng: np.random.Generator | int = 0,
                   separability: float = 1.0, noise: float = 0.03, channels: int = 3,
                   split: str = "train") -> Dataset:
    """Render a balanced dataset of parametric shapes.

    Class ``k`` fixes the shape; pose, scale and background are random.
    ``separability`` in [0, 1] sets how strongly the foreground color also
    encodes the class: 1 uses the class color, 0 draws colors at random.
    """
    if classes < 2 or n < classes:
        raise ParameterError("need n >= classes >= 2")
    if classes > len(SHAPES):
        raise ParameterError(f"at most {len(SHAPES)} classes supported")
    if size < 8:
        raise ParameterError("size must be >= 8 to render shapes")
    if not 0.0 <= separability <= 1.0:
        raise ParameterError("separability must lie in [0, 1]")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))

    labels = np.arange(n) % classes
    rng.shuffle(labels)
    grid = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    images = np.empty((n, 3, size, size), dtype=np.float32)
    aa = 1.5 * 2.0 / size  # antialiasing width: 1.5 px
    for i, k in enumerate(labels):
        r = rng.uniform(0.35, 0.6)
        cx, cy = rng.uniform(-0.25, 0.25, size=2)
        theta = rng.uniform(-0.4, 0.4)
        c, s = np.cos(theta), np.sin(theta)
        u = c * (xx - cx) + s * (yy - cy)
        v = -s * (xx - cx) + c * (yy - cy)
        mask = np.clip(0.5 - _shape_mask(SHAPES[k], u, v, r) / aa, 0.0, 1.0)
        fg = separability * PALETTE[k] + (1 - separability) * rng.uniform(0.1, 0.9, size=3)
        bg0, bg1 = rng.uniform(0.0, 0.35, size=3), rng.uniform(0.0, 0.35, size=3)
        ramp = (xx * rng.uniform(-1, 1) + yy * rng.uniform(-1, 1) + 2) / 4
        bg = bg0[:, None, None] * (1 - ramp) + bg1[:, None, None] * ramp
        img = bg * (1 - mask) + fg[:, None, None] * mask
        img += noise * rng.standard_normal(img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    if channels == 1:
        images = images.mean(axis=1, keepdims=True)
    elif channels != 3:
        raise ParameterError("channels must be 1 or 3")
    return Dataset(torch.from_numpy(images), torch.from_numpy(labels.astype(np.int64)),
                   classes, split, name=f"synthetic-{classes}c-{size}px")


# ---------------------------------------------------------------- file formats

def load_cifar_batch(path: str | os.PathLike, num_classes: int = 10) -> Dataset:
    """Read one CIFAR-10 binary batch: 1 label byte + 3072 channel-planar pixel bytes per record."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES:
        offset = (len(raw) // CIFAR_RECORD_BYTES) * CIFAR_RECORD_BYTES
        raise ParseError(f"file size {len(raw)} is not a multiple of {CIFAR_RECORD_BYTES}", path, offset)
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    bad = np.nonzero(labels >= num_classes)[0]
    if len(bad):
        raise ValidationError(f"{path}: label {labels[bad[0]]} at record {bad[0]} "
                              f"(byte {bad[0] * CIFAR_RECORD_BYTES}) outside [0, {num_classes})")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(torch.from_numpy(images), torch.from_numpy(labels), num_classes,
                   split="test" if "test" in path.name else "train", name=path.stem)


def write_cifar_batch(ds: Dataset, path: str | os.PathLike) -> None:
    if ds.labels is None or ds.image_shape != (3, 32, 32):
        raise ParameterError("CIFAR batches need labeled 3x32x32 images")
    pix = np.round(ds.images.numpy() * 255.0).astype(np.uint8).reshape(len(ds), -1)
    rec = np.concatenate([ds.labels.numpy().astype(np.uint8)[:, None], pix], axis=1)
    Path(path).write_bytes(rec.tobytes())


def _load_image(path: Path, size: int, channels: int) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB" if channels == 3 else "L")
        if im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr


def load_image_directory(root: str | os.PathLike, labels_csv: str | os.PathLike | None = None,
                         num_classes: int | None = None, size: int = 32, channels: int = 3,
                         split_file: str | os.PathLike | None = None, split: str = "train") -> Dataset:
    """Images listed in a ``filename,label`` CSV, resized to ``size`` x ``size``.

    ``split_file`` (one filename per line) restricts the rows to an explicit
    subset, for datasets whose train/test assignment is external.
    """
    root = Path(root)
    labels_csv = Path(labels_csv) if labels_csv else root / "labels.csv"
    keep = None
    if split_file is not None:
        keep = {ln.strip() for ln in Path(split_file).read_text(encoding="utf-8").splitlines() if ln.strip()}
    names, labels = [], []
    with open(labels_csv, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["filename", "label"]:
            raise ParseError(f"expected header 'filename,label', got {header}", labels_csv)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise ParseError(f"row {lineno}: expected 2 fields, got {len(row)}", labels_csv)
            name, lab = row
            try:
                lab = int(lab)
            except ValueError:
                raise ParseError(f"row {lineno}: label {lab!r} is not an integer", labels_csv) from None
            if keep is not None and name not in keep:
                continue
            if not (root / name).is_file():
                raise ParseError(f"row {lineno}: image {name!r} not found", labels_csv)
            names.append(name)
            labels.append(lab)
    if not names:
        raise ParseError("no images listed", labels_csv)
    k = num_classes if num_classes is not None else max(labels) + 1
    for name, lab in zip(names, labels):
        if not 0 <= lab < k:
            raise ValidationError(f"{name}: label {lab} outside [0, {k})")
    images = np.stack([_load_image(root / nm, size, channels) for nm in names])
    return Dataset(torch.from_numpy(images), torch.tensor(labels, dtype=torch.int64), k, split, root.name)


def save_image_directory(ds: Dataset, root: str | os.PathLike, names: list[str] | None = None) -> list[str]:
    """Write PNGs and (if labeled) a ``filename,label`` CSV with LF endings."""
    from PIL import Image

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    names = names or [f"{i:05d}.png" for i in range(len(ds))]
    for name, img in zip(names, ds.images):
        arr = np.round(img.clamp(0, 1).numpy() * 255.0).astype(np.uint8)
        arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
        Image.fromarray(arr).save(root / name)
    if ds.labels is not None:
        with open(root / "labels.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["filename", "label"])
            for name, lab in zip(names, ds.labels.tolist()):
                w.writerow([name, lab])
    return names


def load_dataset(path: str | os.PathLike, fmt: str = "auto", **kw) -> Dataset:
    """Dispatch on ``fmt``: ``cifar10`` (binary batch file) or ``imagedir``."""
    path = Path(path)
    if not path.exists():
        raise ParameterError(f"dataset path {path} does not exist")
    if fmt == "auto":
        fmt = "imagedir" if path.is_dir() else "cifar10"
    if fmt == "cifar10":
        return load_cifar_batch(path, **{k: v for k, v in kw.items() if k == "num_classes"})
    if fmt == "imagedir":
        return load_image_directory(path, **kw)
    raise ParameterError(f"unknown dataset format {fmt!r}")


# ---------------------------------------------------------------- checkpoints

@dataclass
class PurifierCheckpoint:
    """Network weights plus everything needed to rebuild and reproduce them.

    ``tensors`` maps prefixed names (``generator.``, ``discriminator.``,
    ``classifier.``) to float32 tensors.  ``configs`` holds the architecture
    configs as plain dicts under the same prefixes.
    """

    mode: str
    tensors: dict[str, torch.Tensor]
    configs: dict[str, dict] = field(default_factory=dict)
    schedule: list[float] = field(default_factory=list)
    train_config: dict = field(default_factory=dict)
    seed: int = 0
    metadata: dict = field(default_factory=dict)
    log: list = field(default_factory=list, compare=False)

    def __post_init__(self):
        if self.mode not in CHECKPOINT_MODES:
            raise ParameterError(f"mode must be one of {CHECKPOINT_MODES}, got {self.mode!r}")

    def state_dict(self, prefix: str) -> dict[str, torch.Tensor]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}

    def manifest(self) -> dict:
        entries, offset = [], 0
        for name, t in self.tensors.items():
            nbytes = t.numel() * 4
            entries.append({"name": name, "shape": list(t.shape), "dtype": "float32le", "offset": offset,
                            "nbytes": nbytes})
            offset += nbytes
        return {
            "format_version": FORMAT_VERSION,
            "mode": self.mode,
            "configs": self.configs,
            "schedule": list(self.schedule),
            "train_config": self.train_config,
            "seed": self.seed,
            "metadata": self.metadata,
            "tensors": entries,
            "blob_bytes": offset,
        }

    def blob(self) -> bytes:
        return b"".join(_tensor_bytes(t) for t in self.tensors.values())

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(_canonical_json(self.manifest()).encode("utf-8"))
        h.update(self.blob())
        return h.hexdigest()


def _tensor_bytes(t: torch.Tensor) -> bytes:
    return t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4", copy=False).tobytes()


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def make_checkpoint(mode: str, modules: dict, schedule=(), train_config=None, seed: int = 0,
                    metadata=None, log=None) -> PurifierCheckpoint:
    """Snapshot ``{"generator": module, ...}`` into a checkpoint."""
    tensors, configs = {}, {}
    for prefix, mod in modules.items():
        for k, v in mod.state_dict().items():
            tensors[f"{prefix}.{k}"] = v.detach().clone().to(torch.float32)
        configs[prefix] = {"kind": type(mod).__name__, **mod.cfg.to_dict()}
    return PurifierCheckpoint(mode, tensors, configs, list(schedule), dict(train_config or {}), seed,
                              dict(metadata or {}), list(log or []))


def save_checkpoint(ckpt: PurifierCheckpoint, path: str | os.PathLike) -> str:
    """Write atomically: build in a temp dir beside ``path``, then rename. Returns the hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=path.name + ".tmp-", dir=path.parent))
    try:
        (tmp / BLOB_NAME).write_bytes(ckpt.blob())
        (tmp / MANIFEST_NAME).write_text(_canonical_json(ckpt.manifest()), encoding="utf-8")
        if ckpt.log:
            from .training import write_log_csv
            write_log_csv(ckpt.log, tmp / "train_log.csv", with_seconds=False)
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return ckpt.content_hash()


def load_checkpoint(path: str | os.PathLike) -> PurifierCheckpoint:
    path = Path(path)
    mpath, bpath = path / MANIFEST_NAME, path / BLOB_NAME
    if not mpath.is_file():
        raise IntegrityError(f"missing {mpath}")
    if not bpath.is_file():
        raise IntegrityError(f"missing {bpath}")
    try:
        man = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise IntegrityError(f"manifest does not parse: {e}") from None
    blob = bpath.read_bytes()
    tensors = {}
    for ent in man["tensors"]:
        name, shape, off, nbytes = ent["name"], ent["shape"], ent["offset"], ent["nbytes"]
        if ent.get("dtype") != "float32le":
            raise IntegrityError(f"unsupported dtype {ent.get('dtype')!r}", tensor=name)
        if int(np.prod(shape, dtype=np.int64)) * 4 != nbytes:
            raise IntegrityError(f"shape {shape} does not match {nbytes} bytes", tensor=name)
        if off + nbytes > len(blob):
            raise IntegrityError(f"tensor {name!r} needs bytes [{off}, {off + nbytes}) but the payload "
                                 f"has {len(blob)} (truncated?)", tensor=name)
        arr = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    if len(blob) != man.get("blob_bytes"):
        raise IntegrityError(f"payload has {len(blob)} bytes, manifest says {man.get('blob_bytes')}")
    log = []
    log_path = path / "train_log.csv"
    if log_path.is_file():
        from .training import read_log_csv
        log = read_log_csv(log_path)
    return PurifierCheckpoint(man["mode"], tensors, man.get("configs", {}), man.get("schedule", []),
                              man.get("train_config", {}), man.get("seed", 0), man.get("metadata", {}), log)


def checkpoint_module(ckpt: PurifierCheckpoint, prefix: str):
    """Rebuild the network stored under ``prefix`` and load its weights."""
    from . import networks as nw

    if prefix not in ckpt.configs:
        raise IntegrityError(f"checkpoint has no network {prefix!r}")
    cfg = dict(ckpt.configs[prefix])
    kind = cfg.pop("kind")
    builders = {
        "Generator": (nw.Generator, nw.GeneratorConfig),
        "Discriminator": (nw.Discriminator, nw.DiscriminatorConfig),
        "Classifier": (nw.Classifier, nw.ClassifierConfig),
    }
    if kind not in builders:
        raise IntegrityError(f"unknown network kind {kind!r}")
    cls, cfg_cls = builders[kind]
    mod = cls(cfg_cls(**cfg))
    state = ckpt.state_dict(prefix)
    expected = mod.state_dict()
    for name, t in expected.items():
        if name not in state:
            raise IntegrityError("tensor missing from checkpoint", tensor=f"{prefix}.{name}")
        if tuple(state[name].shape) != tuple(t.shape):
            raise IntegrityError(f"shape {tuple(state[name].shape)} != expected {tuple(t.shape)}",
                                 tensor=f"{prefix}.{name}")
    extra = set(state) - set(expected)
    if extra:
        raise IntegrityError("unexpected tensors in checkpoint", tensor=sorted(extra)[0])
    mod.load_state_dict(state)
    mod.eval()
    return mod
