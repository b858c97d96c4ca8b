"""Generator, conditional discriminator and classifier architectures.

The generator is a compact U-Net: residual blocks whose normalized features are
modulated per channel (scale/shift) by an embedding of the latent code, skip
connections between encoder and decoder, and self-attention at the coarsest
resolution.  The same class doubles as the noise predictor for the iterative
baseline by swapping the latent code for a sinusoidal timestep embedding, which
keeps the two purifiers at matched size.

A ``ParameterSet`` is simply a module's ``state_dict()``: an ordered mapping of
unique names to tensors whose shapes are fixed by the config.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ParameterError

ParameterSet = Dict[str, torch.Tensor]

REFERENCE_LATENT_DIM = 256
REFERENCE_EMBEDDING_DIM = 512
REFERENCE_PURIFIER_PARAMS = 45_610_598

# Keeps discriminator probabilities strictly inside (0, 1).
PROB_EPS = 1e-7


@dataclass
class GeneratorConfig:
    image_shape: tuple[int, int, int] = (3, 32, 32)
    latent_dim: int = REFERENCE_LATENT_DIM
    embedding_dim: int = REFERENCE_EMBEDDING_DIM
    base_channels: int = 16
    channel_mult: tuple[int, ...] = (1, 2, 2)
    num_res_blocks: int = 1
    attn_resolutions: tuple[int, ...] = (8,)
    mapping_layers: int = 2
    conditioning: str = "latent"  # "latent" or "time"
    output_activation: str = "tanh"  # "tanh" or "none"

    def __post_init__(self):
        self.image_shape = tuple(int(s) for s in self.image_shape)
        self.channel_mult = tuple(int(m) for m in self.channel_mult)
        self.attn_resolutions = tuple(int(r) for r in self.attn_resolutions)
        c, h, w = self.image_shape
        levels = len(self.channel_mult)
        if levels < 1:
            raise ParameterError("channel_mult needs at least one level")
        factor = 2 ** (levels - 1)
        if h % factor or w % factor:
            raise ParameterError(f"image size {h}x{w} not divisible by {factor} ({levels} levels)")
        if self.latent_dim < 1 or self.embedding_dim < 1:
            raise ParameterError("latent_dim and embedding_dim must be >= 1")
        if self.base_channels < 1 or self.num_res_blocks < 1 or self.mapping_layers < 1:
            raise ParameterError("base_channels, num_res_blocks and mapping_layers must be >= 1")
        if self.conditioning not in ("latent", "time"):
            raise ParameterError(f"unknown conditioning {self.conditioning!r}")
        if self.output_activation not in ("tanh", "none"):
            raise ParameterError(f"unknown output_activation {self.output_activation!r}")

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))


@dataclass
class DiscriminatorConfig:
    image_shape: tuple[int, int, int] = (3, 32, 32)
    base_channels: int = 32
    levels: int = 3

    def __post_init__(self):
        self.image_shape = tuple(int(s) for s in self.image_shape)
        if self.levels < 1 or self.base_channels < 1:
            raise ParameterError("levels and base_channels must be >= 1")

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))


@dataclass
class ClassifierConfig:
    image_shape: tuple[int, int, int] = (3, 32, 32)
    num_classes: int = 10
    depth: str = "small"
    widths: tuple[int, ...] = field(default=())

    PRESETS = {"tiny": (8, 16), "small": (16, 32, 64), "medium": (32, 64, 128)}

    def __post_init__(self):
        self.image_shape = tuple(int(s) for s in self.image_shape)
        if self.num_classes < 2:
            raise ParameterError("num_classes must be >= 2")
        if not self.widths:
            if self.depth not in self.PRESETS:
                raise ParameterError(f"unknown depth preset {self.depth!r}")
            self.widths = self.PRESETS[self.depth]
        self.widths = tuple(int(w) for w in self.widths)

    def to_dict(self) -> dict:
        d = asdict(self)
        return _jsonable(d)


def _jsonable(d):
    if isinstance(d, dict):
        return {k: _jsonable(v) for k, v in d.items()}
    if isinstance(d, (tuple, list)):
        return [_jsonable(v) for v in d]
    return d


def _groups(ch: int) -> int:
    for g in (8, 4, 2):
        if ch % g == 0:
            return g
    return 1


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (N, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class MappingNetwork(nn.Module):
    def __init__(self, in_dim, emb_dim, layers):
        super().__init__()
        mods = []
        d = in_dim
        for _ in range(max(layers, 1)):
            mods += [nn.Linear(d, emb_dim), nn.SiLU()]
            d = emb_dim
        self.net = nn.Sequential(*mods)

    def forward(self, z):
        return self.net(z)


class ModulatedResBlock(nn.Module):
    """GroupNorm -> conv -> per-channel scale/shift from the embedding -> conv, plus skip."""

    def __init__(self, c_in, c_out, emb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.style = nn.Linear(emb_dim, 2 * c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.style(emb)[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class SelfAttention(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.qkv = nn.Conv2d(ch, 3 * ch, 1)
        self.proj = nn.Conv2d(ch, ch, 1)

    def forward(self, x):
        n, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(n, 3, c, h * w).unbind(1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        out = (v @ attn.transpose(1, 2)).reshape(n, c, h, w)
        return x + self.proj(out)


class Generator(nn.Module):
    """One-shot denoiser G(x, z) mapping a noisy image to a clean estimate."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        c_img, h, _ = cfg.image_shape
        chans = [cfg.base_channels * m for m in cfg.channel_mult]
        self.mapping = MappingNetwork(cfg.latent_dim, cfg.embedding_dim, cfg.mapping_layers)
        self.conv_in = nn.Conv2d(c_img, chans[0], 3, padding=1)

        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        skip_ch = []
        ch = chans[0]
        res = h
        for i, c in enumerate(chans):
            blocks = nn.ModuleList()
            for _ in range(cfg.num_res_blocks):
                blocks.append(ModulatedResBlock(ch, c, cfg.embedding_dim))
                ch = c
            self.down.append(blocks)
            skip_ch.append(ch)
            if i < len(chans) - 1:
                self.downsample.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
                res //= 2
        self.mid1 = ModulatedResBlock(ch, ch, cfg.embedding_dim)
        self.mid_attn = SelfAttention(ch) if res in cfg.attn_resolutions else nn.Identity()
        self.mid2 = ModulatedResBlock(ch, ch, cfg.embedding_dim)

        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in reversed(range(len(chans))):
            blocks = nn.ModuleList()
            blocks.append(ModulatedResBlock(ch + skip_ch[i], chans[i], cfg.embedding_dim))
            ch = chans[i]
            for _ in range(cfg.num_res_blocks - 1):
                blocks.append(ModulatedResBlock(ch, ch, cfg.embedding_dim))
            self.up.append(blocks)
            if i > 0:
                self.upsample.append(nn.Conv2d(ch, ch, 3, padding=1))
        self.norm_out = nn.GroupNorm(_groups(ch), ch)
        self.conv_out = nn.Conv2d(ch, c_img, 3, padding=1)

    def embed(self, cond: torch.Tensor) -> torch.Tensor:
        if self.cfg.conditioning == "time":
            cond = timestep_embedding(cond, self.cfg.latent_dim).to(self.conv_in.weight.dtype)
        return self.mapping(cond)

    def forward(self, x, cond):
        emb = self.embed(cond)
        h = self.conv_in(x)
        skips = []
        for i, blocks in enumerate(self.down):
            for blk in blocks:
                h = blk(h, emb)
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        h = self.mid2(self.mid_attn(self.mid1(h, emb)), emb)
        for j, blocks in enumerate(self.up):
            h = torch.cat([h, skips.pop()], dim=1)
            for blk in blocks:
                h = blk(h, emb)
            if j < len(self.upsample):
                h = self.upsample[j](F.interpolate(h, scale_factor=2, mode="nearest"))
        out = self.conv_out(F.silu(self.norm_out(h)))
        if self.cfg.output_activation == "tanh":
            out = torch.tanh(out)
        return out


class Discriminator(nn.Module):
    """Time-independent D(x, x_cond); conditioning by channel concatenation."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        c_img = cfg.image_shape[0]
        layers = [nn.Conv2d(2 * c_img, cfg.base_channels, 3, padding=1), nn.LeakyReLU(0.2)]
        ch = cfg.base_channels
        for i in range(cfg.levels):
            nxt = cfg.base_channels * 2 ** min(i + 1, 3)
            layers += [nn.Conv2d(ch, nxt, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            ch = nxt
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(ch, 1)

    def logits(self, x, x_cond):
        h = self.features(torch.cat([x, x_cond], dim=1))
        return self.head(h.mean(dim=(2, 3))).squeeze(1)

    def forward(self, x, x_cond):
        return torch.sigmoid(self.logits(x, x_cond)).clamp(PROB_EPS, 1.0 - PROB_EPS)


class BasicBlock(nn.Module):
    def __init__(self, c_in, c_out, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)
        self.norm1 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.skip = (nn.Conv2d(c_in, c_out, 1, stride=stride)
                     if stride != 1 or c_in != c_out else nn.Identity())

    def forward(self, x):
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.relu(h + self.skip(x))


class Classifier(nn.Module):
    """Small residual network on [0, 1] images; returns logits."""

    def __init__(self, cfg: ClassifierConfig):
        super().__init__()
        self.cfg = cfg
        c_img = cfg.image_shape[0]
        w = cfg.widths
        self.stem = nn.Conv2d(c_img, w[0], 3, padding=1)
        blocks = []
        ch = w[0]
        for i, c in enumerate(w):
            blocks.append(BasicBlock(ch, c, 1 if i == 0 else 2))
            ch = c
        self.blocks = nn.Sequential(*blocks)
        self.fc = nn.Linear(ch, cfg.num_classes)

    def forward(self, x):
        h = self.blocks(F.relu(self.stem(x * 2.0 - 1.0)))
        return self.fc(h.mean(dim=(2, 3)))


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def _check_images(x, shape, what):
    if x.dim() != 4 or tuple(x.shape[1:]) != tuple(shape):
        raise ParameterError(f"{what}: expected (N, {', '.join(map(str, shape))}), got {tuple(x.shape)}")


def generator_forward(gen: Generator, x2: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Validated G(x2, z); ``z`` is (N, latent_dim) or timesteps (N,) for time conditioning."""
    _check_images(x2, gen.cfg.image_shape, "generator input")
    if gen.cfg.conditioning == "latent":
        if z.dim() != 2 or z.shape != (x2.shape[0], gen.cfg.latent_dim):
            raise ParameterError(f"latent must be (N, {gen.cfg.latent_dim}), got {tuple(z.shape)}")
    elif z.shape != (x2.shape[0],):
        raise ParameterError(f"timesteps must be (N,), got {tuple(z.shape)}")
    return gen(x2, z)


def discriminator_forward(disc: Discriminator, x: torch.Tensor, x_cond: torch.Tensor) -> torch.Tensor:
    if x.shape != x_cond.shape:
        raise ParameterError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_cond.shape)}")
    _check_images(x, disc.cfg.image_shape, "discriminator input")
    return disc(x, x_cond)


def classifier_forward(clf: Classifier, x: torch.Tensor) -> torch.Tensor:
    _check_images(x, clf.cfg.image_shape, "classifier input")
    return clf(x)


def sample_latent(n: int, latent_dim: int, rng: torch.Generator | None = None,
                  dtype=torch.float32) -> torch.Tensor:
    return torch.randn((n, latent_dim), generator=rng, dtype=dtype)


def build_generator(cfg: GeneratorConfig, seed: int = 0) -> Generator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Generator(cfg)


def build_discriminator(cfg: DiscriminatorConfig, seed: int = 0) -> Discriminator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Discriminator(cfg)


def build_classifier(cfg: ClassifierConfig, seed: int = 0) -> Classifier:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Classifier(cfg)
