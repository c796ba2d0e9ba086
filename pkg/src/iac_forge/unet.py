"""Baseline U-Net with pluggable skip seams, weight freezing, digests and checkpoints."""

from __future__ import annotations

import enum
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .cell import ContinuousCell, DiscreteCell, genotype_from_json, genotype_to_json
from .errors import FrozenWeightsViolation, InvalidArgumentError
from .relaxation import ArchParams
from .search_space import init_conv_weights

# (width factor, convs per block)
BACKBONES = {
    "base": (1.0, 2),
    "narrow": (0.5, 2),
    "wide": (2.0, 1),
}


class SkipMode(str, enum.Enum):
    CONCAT = "concat"
    # concat with the encoder features replaced by zeros: a no-skip control
    ZEROED = "zeroed"
    CONTINUOUS_CELL = "continuous_cell"
    DISCRETE_CELL = "discrete_cell"


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 3
    base_width: int = 8
    width_multiplier: float = 2.0
    in_channels: int = 1
    out_channels: int = 1
    backbone_id: str = "base"

    def __post_init__(self):
        if self.depth < 2:
            raise InvalidArgumentError("depth must be >= 2")
        if self.base_width < 1 or self.width_multiplier <= 0:
            raise InvalidArgumentError("widths must be positive")
        if self.in_channels < 1 or self.out_channels < 1:
            raise InvalidArgumentError("channel counts must be positive")
        if self.backbone_id not in BACKBONES:
            raise InvalidArgumentError(
                f"backbone_id must be one of {sorted(BACKBONES)}, got {self.backbone_id!r}"
            )

    @property
    def widths(self):
        """Channel width at encoder levels 0..depth (the last is the bottleneck)."""
        factor, _ = BACKBONES[self.backbone_id]
        return [max(1, int(round(self.base_width * factor * self.width_multiplier ** l)))
                for l in range(self.depth + 1)]

    @property
    def convs_per_block(self):
        return BACKBONES[self.backbone_id][1]

    def check_resolution(self, h, w):
        step = 2 ** self.depth
        if h % step or w % step:
            raise InvalidArgumentError(
                f"input {h}x{w} not divisible by 2^depth = {step}"
            )

    def to_dict(self):
        return asdict(self)


def _block(cin, cout, n):
    layers = []
    for i in range(n):
        layers += [nn.Conv2d(cin if i == 0 else cout, cout, 3, padding=1, bias=False),
                   nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]
    return nn.Sequential(*layers)


class UNet(nn.Module):
    def __init__(self, config, skip_mode=SkipMode.CONCAT, cell_factory=None, seed=0):
        super().__init__()
        self.config = config
        self.skip_mode = SkipMode(skip_mode)
        plain = self.skip_mode in (SkipMode.CONCAT, SkipMode.ZEROED)
        if plain != (cell_factory is None):
            raise InvalidArgumentError("cell_factory is required iff the skip mode uses cells")
        gen = torch.Generator().manual_seed(seed)
        w = config.widths
        n = config.convs_per_block
        self.encoder = nn.ModuleList(
            _block(config.in_channels if l == 0 else w[l - 1], w[l], n) for l in range(config.depth)
        )
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _block(w[config.depth - 1], w[config.depth], n)
        self.ups = nn.ModuleList(
            nn.ConvTranspose2d(w[l + 1], w[l], 2, stride=2) for l in range(config.depth)
        )
        self.decoder = nn.ModuleList(_block(2 * w[l], w[l], n) for l in range(config.depth))
        self.head = nn.Conv2d(w[0], config.out_channels, 1)
        init_conv_weights(self, gen)

        self.arch = None
        self.cells = None
        if cell_factory is not None:
            self.arch = getattr(cell_factory, "arch", None)
            self.cells = nn.ModuleList(
                cell_factory(l, w[l], w[l], 2 * w[l]) for l in range(config.depth)
            )
        self._frozen = False

    # -- structure -------------------------------------------------------
    @property
    def n_levels(self):
        return self.config.depth

    def base_parameters(self):
        return [p for name, p in self.named_parameters() if scope_of(name) == "base"]

    def cell_parameters(self):
        return list(self.cells.parameters()) if self.cells is not None else []

    def arch_parameters(self):
        return list(self.arch.parameters()) if self.arch is not None else []

    def freeze_base_weights(self):
        for p in self.base_parameters():
            p.requires_grad_(False)
        self._frozen = True
        self.train(self.training)

    @property
    def base_frozen(self):
        return self._frozen

    def train(self, mode=True):
        super().train(mode)
        if self._frozen:
            # frozen BN layers keep their running statistics
            for m in (self.encoder, self.bottleneck, self.ups, self.decoder, self.head):
                m.eval()
        return self

    def trainable_parameter_count(self):
        return sum(p.numel() for p in self.parameters() if p.requires_grad)

    # -- forward ---------------------------------------------------------
    def seam(self, level, up, skip, generator=None):
        if self.skip_mode is SkipMode.CONCAT:
            return torch.cat([up, skip], dim=1)
        if self.skip_mode is SkipMode.ZEROED:
            return torch.cat([up, torch.zeros_like(skip)], dim=1)
        return self.cells[level](up, skip, self.arch, generator)

    def forward(self, x, generator=None):
        self.config.check_resolution(x.shape[-2], x.shape[-1])
        skips = []
        h = x.contiguous(memory_format=torch.channels_last)
        for block in self.encoder:
            h = block(h)
            skips.append(h)
            h = self.pool(h)
        h = self.bottleneck(h)
        for l in reversed(range(self.config.depth)):
            up = self.ups[l](h)
            h = self.decoder[l](self.seam(l, up, skips[l], generator))
        return torch.sigmoid(self.head(h))


def scope_of(name):
    if name.startswith("cells."):
        return "cell"
    if name.startswith("arch."):
        return "arch"
    return "base"


class ContinuousCellFactory:
    """Builds per-level supercells sharing one set of architecture logits."""

    def __init__(self, space_config, seed=0):
        self.config = space_config
        self.arch = ArchParams(space_config, init=1.0)
        self.generator = torch.Generator().manual_seed(seed)

    def __call__(self, level, up_channels, skip_channels, out_channels):
        return ContinuousCell(self.config, up_channels, skip_channels, out_channels, self.generator)


class DiscreteCellFactory:
    def __init__(self, genotype, seed=0):
        self.genotype = genotype
        self.generator = torch.Generator().manual_seed(seed)

    def __call__(self, level, up_channels, skip_channels, out_channels):
        return DiscreteCell(self.genotype, up_channels, skip_channels, out_channels, self.generator)


def build_unet(config, skip_mode=SkipMode.CONCAT, cell_factory=None, seed=0):
    # channels_last: several times faster depthwise convolutions on CPU
    return UNet(config, skip_mode, cell_factory, seed).to(memory_format=torch.channels_last)


def freeze_base_weights(model):
    model.freeze_base_weights()


# -- digests -------------------------------------------------------------

@dataclass(frozen=True)
class WeightDigest:
    blocks: dict = field(default_factory=dict)
    digest: str = ""

    def __eq__(self, other):
        return isinstance(other, WeightDigest) and self.digest == other.digest

    def changed_blocks(self, other):
        names = set(self.blocks) | set(other.blocks)
        return sorted(n for n in names if self.blocks.get(n) != other.blocks.get(n))


def _canonical_blocks(model, scope="all", buffers=True):
    """Float blocks in state-dict order, optionally restricted to a scope."""
    out = []
    params = {name for name, _ in model.named_parameters()}
    for name, t in model.state_dict().items():
        if not torch.is_floating_point(t):
            continue
        if not buffers and name not in params:
            continue
        if scope != "all" and scope_of(name) != scope:
            continue
        out.append((name, t))
    return out


def _block_bytes(t):
    return np.ascontiguousarray(t.detach().cpu().numpy().astype("<f4")).tobytes()


def _digest_of(named_bytes):
    blocks = {}
    h = hashlib.sha256()
    for name, shape, data in named_bytes:
        bh = hashlib.sha256(data).hexdigest()
        blocks[name] = bh
        h.update(f"{name}:{list(shape)}:{bh};".encode())
    return WeightDigest(blocks, h.hexdigest())


def weight_digest(model, scope="all", buffers=True):
    """Content hash over the canonical float blocks of ``model`` in ``scope``.

    ``scope`` is one of ``all``, ``base``, ``cell``, ``arch``; ``buffers=False``
    hashes trainable weights only (no BN running statistics).
    """
    if scope not in ("all", "base", "cell", "arch"):
        raise InvalidArgumentError(f"unknown digest scope {scope!r}")
    return _digest_of((n, tuple(t.shape), _block_bytes(t))
                      for n, t in _canonical_blocks(model, scope, buffers))


def assert_digest_unchanged(before, after, what="base"):
    if before != after:
        raise FrozenWeightsViolation(
            f"{what} weights changed: {', '.join(before.changed_blocks(after)[:5])}"
        )


# -- checkpoints ---------------------------------------------------------

MAGIC = b"IACKPT01"


def save_checkpoint(model, path, extra=None):
    """Write ``model`` as header JSON + raw little-endian float32 blocks."""
    blocks = _canonical_blocks(model)
    entries, payload, offset = [], [], 0
    named = []
    for name, t in blocks:
        data = _block_bytes(t)
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(data)})
        payload.append(data)
        named.append((name, tuple(t.shape), data))
        offset += len(data)
    header = {
        "format": "iac-forge-checkpoint",
        "version": 1,
        "unet": model.config.to_dict(),
        "skip_mode": model.skip_mode.value,
        "blocks": entries,
        "digest": _digest_of(named).digest,
        "base_digest": weight_digest(model, "base").digest,
        "extra": extra or {},
    }
    if model.skip_mode is SkipMode.DISCRETE_CELL:
        header["genotype"] = genotype_to_json(model.cells[0].genotype).decode()
    elif model.skip_mode is SkipMode.CONTINUOUS_CELL:
        header["space"] = model.arch.config.to_dict()
    hbytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for data in payload:
            f.write(data)
    return header["digest"]


def read_checkpoint(path):
    """Return ``(header, {name: float32 array})`` after verifying the stored digest."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise InvalidArgumentError(f"{path}: not an iac-forge checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    base = 16 + hlen
    arrays, named = {}, []
    for e in header["blocks"]:
        data = raw[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(data, dtype="<f4").reshape(e["shape"]).copy()
        named.append((e["name"], tuple(e["shape"]), data))
    if _digest_of(named).digest != header["digest"]:
        raise InvalidArgumentError(f"{path}: digest mismatch, file is corrupt")
    return header, arrays


def load_state(model, arrays, scope="all"):
    """Copy float blocks from ``arrays`` into ``model`` (restricted to ``scope``)."""
    sd = model.state_dict()
    missing = []
    with torch.no_grad():
        for name, t in _canonical_blocks(model, scope):
            if name not in arrays:
                missing.append(name)
                continue
            src = torch.from_numpy(arrays[name])
            if tuple(src.shape) != tuple(t.shape):
                raise InvalidArgumentError(f"shape mismatch for {name}: {tuple(src.shape)} vs {tuple(t.shape)}")
            sd[name].copy_(src)
    if missing:
        raise InvalidArgumentError(f"checkpoint lacks blocks: {', '.join(missing[:5])}")


def load_checkpoint(path, seed=0):
    """Rebuild the model stored at ``path``."""
    header, arrays = read_checkpoint(path)
    config = UNetConfig(**header["unet"])
    mode = SkipMode(header["skip_mode"])
    factory = None
    if mode is SkipMode.DISCRETE_CELL:
        factory = DiscreteCellFactory(genotype_from_json(header["genotype"].encode()), seed)
    elif mode is SkipMode.CONTINUOUS_CELL:
        from .search_space import SearchSpaceConfig
        factory = ContinuousCellFactory(SearchSpaceConfig.from_dict(header["space"]), seed)
    model = build_unet(config, mode, factory, seed)
    load_state(model, arrays)
    return model, header
