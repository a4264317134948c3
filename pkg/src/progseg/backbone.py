"""TransASPP-UNet: a U-Net encoder/decoder with an ASPP block and a transformer
bottleneck, plus two 1x1 heads (class logits and per-pixel log-variance)."""

from __future__ import annotations

import hashlib
import json
import math
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ._io import read_archive, read_header, write_archive
from .core import ModelOutput, ShapeError, Volume, softmax_over_classes

CHECKPOINT_FORMAT = "progseg-checkpoint/1"


@dataclass
class BackboneConfig:
    in_channels: int = 4
    num_classes: int = 4
    base_width: int = 8
    depth: int = 4
    dilation_rates: tuple = (1, 2, 4, 8)
    token_dim: int = 64
    heads: int = 4
    ff_mult: int = 2
    dropout_rate: float = 0.2
    input_size: int = 64
    norm: str = "group"
    logvar_hidden: int = 16

    def __post_init__(self):
        self.dilation_rates = tuple(int(r) for r in self.dilation_rates)
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if not self.dilation_rates or min(self.dilation_rates) < 1:
            raise ValueError("dilation_rates must be non-empty and strictly positive")
        if self.token_dim % self.heads:
            raise ValueError(f"token_dim {self.token_dim} is not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout_rate <= 0.9:
            raise ValueError("dropout_rate must lie in [0, 0.9]")
        if min(self.in_channels, self.num_classes, self.base_width, self.ff_mult) < 1:
            raise ValueError("channel counts must be positive")
        if self.norm not in ("none", "group"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.input_size % 2 ** (self.depth - 1):
            raise ValueError(f"input_size {self.input_size} not divisible by 2**(depth-1)")

    def width(self, stage: int) -> int:
        return self.base_width * 2**stage

    @property
    def bottleneck_size(self) -> int:
        return self.input_size // 2 ** (self.depth - 1)


def dropout(x: torch.Tensor, p: float, active: bool, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Inverted dropout whose mask can be drawn from an explicit generator."""
    if not active or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= p
    return x * keep / (1.0 - p)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor):
    """Scaled dot-product attention; returns (output, weights)."""
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    weights = torch.softmax(scores, dim=-1)
    return weights @ v, weights


def norm_layer(kind: str, channels: int) -> nn.Module:
    if kind == "none":
        return nn.Identity()
    return nn.GroupNorm(math.gcd(4, channels), channels)


class EncoderStage(nn.Module):
    def __init__(self, cin: int, cout: int, norm: str = "none"):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = norm_layer(norm, cout)
        self.res = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = norm_layer(norm, cout)

    def forward(self, x):
        f = F.relu(self.norm1(self.conv(x)))
        return F.relu(f + self.norm2(self.res(f)))


class ASPP(nn.Module):
    def __init__(self, cin: int, cout: int, rates):
        super().__init__()
        self.rates = tuple(rates)
        self.branches = nn.ModuleList(
            nn.Conv2d(cin, cout, 3, padding=r, dilation=r, padding_mode="replicate") for r in self.rates
        )
        self.project = nn.Conv2d(cout * len(self.rates), cout, 1)

    def forward(self, f):
        extent = min(f.shape[-2:])
        too_wide = [r for r in self.rates if r > extent]
        if too_wide:
            raise ShapeError(f"dilation rates {too_wide} exceed the {tuple(f.shape[-2:])} feature map")
        branches = [F.relu(b(f)) for b in self.branches]
        return F.relu(self.project(torch.cat(branches, dim=1)))


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def _split(self, t):
        b, n, d = t.shape
        return t.view(b, n, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, x, return_weights: bool = False):
        b, n, d = x.shape
        y, w = attention(self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x)))
        y = self.out(y.transpose(1, 2).reshape(b, n, d))
        return (y, w) if return_weights else y


class TransformerBottleneck(nn.Module):
    """Pre-norm transformer block over the flattened ASPP grid.

    The positional embedding enters only the attention input, so with zero
    attention and feed-forward weights the block is exactly the identity.
    """

    def __init__(self, dim: int, heads: int, ff_mult: int, grid: int):
        super().__init__()
        self.grid = grid
        self.pos = nn.Parameter(torch.zeros(grid * grid, dim))
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff_mult * dim), nn.GELU(), nn.Linear(ff_mult * dim, dim))

    def positional(self, h: int, w: int) -> torch.Tensor:
        if (h, w) == (self.grid, self.grid):
            return self.pos
        grid = self.pos.T.reshape(1, -1, self.grid, self.grid)
        grid = F.interpolate(grid, size=(h, w), mode="bilinear", align_corners=False)
        return grid.reshape(-1, h * w).T

    def forward(self, f, p: float = 0.0, stochastic: bool = False, generator=None):
        b, d, h, w = f.shape
        x = f.flatten(2).transpose(1, 2)
        x = x + dropout(self.attn(self.norm1(x) + self.positional(h, w)), p, stochastic, generator)
        x = x + dropout(self.ff(self.norm2(x)), p, stochastic, generator)
        return x.transpose(1, 2).reshape(b, d, h, w)


class DecoderStage(nn.Module):
    def __init__(self, cin: int, cskip: int, cout: int, norm: str = "none"):
        super().__init__()
        self.up = nn.Conv2d(cin, cout, 3, padding=1)
        self.skip = nn.Conv2d(cskip, cout, 1, bias=False)
        self.norm1 = norm_layer(norm, cout)
        self.res = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = norm_layer(norm, cout)

    def forward(self, deeper, skip):
        up = F.interpolate(deeper, scale_factor=2, mode="nearest")
        if up.shape[-2:] != skip.shape[-2:]:
            raise ShapeError(f"upsampled map {tuple(up.shape[-2:])} does not match skip {tuple(skip.shape[-2:])}")
        d = F.relu(self.norm1(self.up(up) + self.skip(skip)))
        return F.relu(d + self.norm2(self.res(d)))


class TransASPPUNet(nn.Module):
    def __init__(self, config: Optional[BackboneConfig] = None):
        super().__init__()
        self.config = cfg = config or BackboneConfig()
        widths = [cfg.width(l) for l in range(cfg.depth)]
        self.encoder = nn.ModuleList(
            EncoderStage(cfg.in_channels if l == 0 else widths[l - 1], widths[l], cfg.norm) for l in range(cfg.depth)
        )
        self.aspp_block = ASPP(widths[-1], cfg.token_dim, cfg.dilation_rates)
        self.bottleneck = TransformerBottleneck(cfg.token_dim, cfg.heads, cfg.ff_mult, cfg.bottleneck_size)
        self.decoder = nn.ModuleList()
        for l in reversed(range(cfg.depth - 1)):
            cin = cfg.token_dim if l == cfg.depth - 2 else widths[l + 1]
            self.decoder.append(DecoderStage(cin, widths[l], widths[l], cfg.norm))
        self.seg_head = nn.Conv2d(widths[0], cfg.num_classes, 1)
        if cfg.logvar_hidden:
            self.logvar_head = nn.Sequential(
                nn.Conv2d(widths[0], cfg.logvar_hidden, 1), nn.ReLU(), nn.Conv2d(cfg.logvar_hidden, 1, 1)
            )
        else:
            self.logvar_head = nn.Conv2d(widths[0], 1, 1)
        for mod in self.modules():
            if isinstance(mod, nn.Conv2d):
                nn.init.kaiming_normal_(mod.weight, nonlinearity="relu")
                if mod.bias is not None:
                    nn.init.zeros_(mod.bias)
        nn.init.normal_(self.bottleneck.pos, std=0.02)

    def encode(self, x: torch.Tensor) -> List[torch.Tensor]:
        factor = 2 ** (self.config.depth - 1)
        h, w = x.shape[-2:]
        if h % factor or w % factor:
            pad_h, pad_w = (-h) % factor, (-w) % factor
            raise ShapeError(
                f"spatial size {(h, w)} is not divisible by {factor}; pad by ({pad_h}, {pad_w}) pixels"
            )
        feats = []
        for l, stage in enumerate(self.encoder):
            if l:
                x = F.max_pool2d(x, 2)
            x = stage(x)
            feats.append(x)
        return feats

    def aspp(self, f: torch.Tensor) -> torch.Tensor:
        return self.aspp_block(f)

    def transformer_bottleneck(self, f, stochastic: bool = False, generator=None) -> torch.Tensor:
        return self.bottleneck(f, self.config.dropout_rate, stochastic, generator)

    def decode(self, features: List[torch.Tensor], stochastic: bool = False, generator=None) -> torch.Tensor:
        """``features[-1]`` is the deepest (post-bottleneck) map, the rest are skips."""
        if len(features) != self.config.depth:
            raise ShapeError(f"expected {self.config.depth} feature maps, got {len(features)}")
        d = features[-1]
        for stage, skip in zip(self.decoder, reversed(features[:-1])):
            d = dropout(stage(d, skip), self.config.dropout_rate, stochastic, generator)
        return d

    def forward(
        self, x, stochastic: bool = False, generator: Optional[torch.Generator] = None, detach_logvar: bool = False
    ) -> ModelOutput:
        if isinstance(x, Volume):
            x = x.tensor()
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        feats = self.encode(x)
        deep = self.transformer_bottleneck(self.aspp(feats[-1]), stochastic, generator)
        d = self.decode(feats[:-1] + [deep], stochastic, generator)
        logits = self.seg_head(d)
        logvar = self.logvar_head(d.detach() if detach_logvar else d)[:, 0]
        if squeeze:
            logits, logvar = logits[0], logvar[0]
        return ModelOutput(logits, softmax_over_classes(logits), logvar)


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def squared_norm(model: nn.Module) -> torch.Tensor:
    return sum((p * p).sum() for p in model.parameters())


def zero_parameters(model: nn.Module) -> nn.Module:
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    return model


def build_model(config: BackboneConfig, seed: int = 0) -> TransASPPUNet:
    torch.manual_seed(seed)
    return TransASPPUNet(config)


# --------------------------------------------------------------------- checkpoints


def _state_arrays(model: nn.Module) -> dict:
    return {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def state_digest(model: nn.Module) -> str:
    """sha256 over the config and every parameter array (name-sorted)."""
    h = hashlib.sha256(json.dumps(asdict(model.config), sort_keys=True).encode())
    for name, arr in sorted(_state_arrays(model).items()):
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def save_checkpoint(path, model: TransASPPUNet, meta: Optional[dict] = None) -> str:
    """Write config + arrays to a byte-reproducible archive; returns the state digest."""
    digest = state_digest(model)
    header = {"format": CHECKPOINT_FORMAT, "config": asdict(model.config), "digest": digest, "meta": meta or {}}
    write_archive(path, header, _state_arrays(model))
    return digest


def load_checkpoint(path) -> TransASPPUNet:
    path = Path(path)
    try:
        header, arrays = read_archive(path)
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unknown checkpoint format {header.get('format')!r}")
        model = TransASPPUNet(BackboneConfig(**header["config"]))
        model.load_state_dict({name: torch.from_numpy(arrays[name]) for name in model.state_dict()})
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, RuntimeError) as exc:
        raise ValueError(f"{path}: corrupt checkpoint ({exc})") from exc
    if state_digest(model) != header["digest"]:
        raise ValueError(f"{path}: digest mismatch, checkpoint is corrupt")
    model.checkpoint_meta = header.get("meta", {})
    model.eval()
    return model


def checkpoint_digest(path) -> str:
    return read_header(path)["digest"]
