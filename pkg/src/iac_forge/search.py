"""Stage II: bi-level alternating search over architecture logits and cell weights."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .cell import discretize, genotype_to_json
from .errors import InvalidArgumentError, NonFiniteLossError
from .pipeline import batches, dice_loss
from .unet import SkipMode, assert_digest_unchanged, save_checkpoint, weight_digest


def lr_schedule_cosine_power(step, total_steps, lr_max, lr_min=0.0, p=2.0):
    """``lr_min + (lr_max - lr_min) * ((1 + cos(pi * step / total)) / 2) ** p``."""
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise InvalidArgumentError(f"step {step} outside [0, {total_steps}]")
    if p < 1:
        raise InvalidArgumentError(f"power must be >= 1, got {p}")
    if lr_min > lr_max:
        raise InvalidArgumentError("lr_min must not exceed lr_max")
    frac = (1.0 + math.cos(math.pi * step / total_steps)) / 2.0
    return lr_min + (lr_max - lr_min) * frac ** p


@dataclass(frozen=True)
class SearchConfig:
    epochs: int = 20
    warmup_epochs: int = 5
    omega_lr: float = 0.01
    omega_lr_min: float = 0.0
    omega_momentum: float = 0.0
    omega_weight_decay: float = 0.0
    lr_power: float = 2.0
    arch_lr: float = 1e-3
    batch_size: int = 16
    snapshot_epochs: tuple = (5, 10, 15, 20)
    seed: int = 0
    arch_first: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidArgumentError("epochs and batch_size must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise InvalidArgumentError("warmup_epochs must lie in [0, epochs)")
        if self.omega_lr < 0 or self.arch_lr < 0:
            raise InvalidArgumentError("learning rates must be non-negative")
        snaps = tuple(sorted(set(int(e) for e in self.snapshot_epochs)))
        if any(not 1 <= e <= self.epochs for e in snaps):
            raise InvalidArgumentError(f"snapshot epochs must lie in [1, {self.epochs}]")
        object.__setattr__(self, "snapshot_epochs", snaps)

    def to_dict(self):
        d = asdict(self)
        d["snapshot_epochs"] = list(self.snapshot_epochs)
        return d


@dataclass
class TraceEntry:
    genotype: object
    val_loss: float
    train_loss: float
    phi: list
    psi: list
    arch_bytes: bytes = b""

    def summary(self):
        return {
            "genotype": json.loads(genotype_to_json(self.genotype)),
            "val_loss": self.val_loss,
            "train_loss": self.train_loss,
            "phi": self.phi,
            "psi": self.psi,
        }


@dataclass
class GenotypeTrace:
    entries: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def add(self, epoch, entry):
        if self.entries and epoch <= max(self.entries):
            raise InvalidArgumentError("trace epochs must be strictly increasing")
        self.entries[epoch] = entry

    @property
    def epochs(self):
        return sorted(self.entries)

    def genotype(self, epoch):
        return self.entries[epoch].genotype

    def to_json(self):
        doc = {"config": self.config,
               "epochs": {str(e): self.entries[e].summary() for e in self.epochs}}
        return json.dumps(doc, sort_keys=True, indent=1)

    def save(self, out_dir, supernet=None):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "trace.json").write_text(self.to_json())
        for e in self.epochs:
            entry = self.entries[e]
            (out / f"genotype_ep{e}.json").write_bytes(genotype_to_json(entry.genotype))
            (out / f"arch_ep{e}.bin").write_bytes(entry.arch_bytes)
        if supernet is not None:
            save_checkpoint(supernet, out / "omega.ckpt")
        return out


class Searcher:
    """Holds optimizer state for one Stage II run.

    ``step_log`` records ``(kind, epoch, z)`` for every update, ``kind`` being
    ``"arch"`` or ``"weight"``.
    """

    def __init__(self, supernet, train_search, val_search, config, lambda_hook=None):
        if supernet.skip_mode is not SkipMode.CONTINUOUS_CELL:
            raise InvalidArgumentError("search needs a supernet with continuous cells")
        if not supernet.base_frozen:
            raise InvalidArgumentError("base weights must be frozen before search")
        if len(train_search[0]) != len(val_search[0]):
            raise InvalidArgumentError(
                f"|train_search_dt| = {len(train_search[0])} != |val_search_dt| = {len(val_search[0])}"
            )
        self.net = supernet
        self.train_search = train_search
        self.val_search = val_search
        self.config = config
        self.lambda_hook = lambda_hook
        self.w_opt = torch.optim.SGD(supernet.cell_parameters(), lr=config.omega_lr,
                                     momentum=config.omega_momentum,
                                     weight_decay=config.omega_weight_decay)
        self.a_opt = torch.optim.Adam(supernet.arch_parameters(), lr=config.arch_lr)
        self.data_gen = torch.Generator().manual_seed(config.seed)
        self.mask_gen = torch.Generator().manual_seed(config.seed + 1)
        self.z_steps = len(batches(len(train_search[0]), config.batch_size))
        self.total_steps = config.epochs * self.z_steps
        self.w_step = 0
        self.step_log = []
        self.base_digest = weight_digest(supernet, "base")

    def _loss(self, split, idx):
        images, masks = split
        loss = dice_loss(self.net(images[idx], self.mask_gen), masks[idx])
        if not math.isfinite(loss.item()):
            raise NonFiniteLossError("non-finite loss during search",
                                     snapshot=discretize(self.net.arch))
        return loss

    def weight_step(self, idx, epoch, z):
        lr = lr_schedule_cosine_power(min(self.w_step, self.total_steps), self.total_steps,
                                      self.config.omega_lr, self.config.omega_lr_min,
                                      self.config.lr_power)
        for g in self.w_opt.param_groups:
            g["lr"] = lr
        self.w_opt.zero_grad()
        self.a_opt.zero_grad()
        loss = self._loss(self.train_search, idx)
        loss.backward()
        self.w_opt.step()
        self.w_step += 1
        self.step_log.append(("weight", epoch, z))
        return loss.item()

    def arch_step(self, idx, epoch, z):
        self.a_opt.zero_grad()
        self.w_opt.zero_grad()
        loss = self._loss(self.val_search, idx)
        loss.backward()
        self.a_opt.step()
        self.step_log.append(("arch", epoch, z))
        return loss.item()

    def warmup_epoch(self, epoch):
        self.net.train()
        n = len(self.train_search[0])
        losses = [self.weight_step(idx, epoch, z)
                  for z, idx in enumerate(batches(n, self.config.batch_size, self.data_gen))]
        return sum(losses) / len(losses)

    def search_epoch(self, epoch):
        self.net.train()
        n = len(self.train_search[0])
        t_batches = batches(n, self.config.batch_size, self.data_gen)
        v_batches = batches(n, self.config.batch_size, self.data_gen)
        t_losses, v_losses = [], []
        for z, (ti, vi) in enumerate(zip(t_batches, v_batches)):
            if self.config.arch_first:
                v_losses.append(self.arch_step(vi, epoch, z))
                t_losses.append(self.weight_step(ti, epoch, z))
            else:
                t_losses.append(self.weight_step(ti, epoch, z))
                v_losses.append(self.arch_step(vi, epoch, z))
        return sum(t_losses) / len(t_losses), sum(v_losses) / len(v_losses)

    @torch.no_grad()
    def val_loss(self):
        images, masks = self.val_search
        self.net.train()
        total = 0.0
        for idx in batches(len(images), self.config.batch_size):
            total += float(dice_loss(self.net(images[idx], self.mask_gen), masks[idx])) * len(idx)
        return total / len(images)

    def snapshot(self, epoch, train_loss, val_loss):
        arch = self.net.arch
        with torch.no_grad():
            phi = [[float(v) for v in row] for row in arch.op_weights()]
            psi = [[float(v) for v in p] for p in arch.edge_weights()]
        g = discretize(arch, meta={"epoch": epoch, "seed": self.config.seed})
        return TraceEntry(g, val_loss, train_loss, phi, psi, arch.to_bytes())

    def run(self):
        cfg = self.config
        trace = GenotypeTrace(config=cfg.to_dict())
        for epoch in range(1, cfg.epochs + 1):
            if self.lambda_hook is not None:
                self.lambda_hook(epoch)
            if epoch <= cfg.warmup_epochs:
                train_loss = self.warmup_epoch(epoch)
                val_loss = self.val_loss() if epoch in cfg.snapshot_epochs else None
            else:
                train_loss, val_loss = self.search_epoch(epoch)
            if epoch in cfg.snapshot_epochs:
                trace.add(epoch, self.snapshot(epoch, train_loss, val_loss))
        assert_digest_unchanged(self.base_digest, weight_digest(self.net, "base"))
        return trace


def warmup(supernet, train_search, config, epochs=None):
    """Cell-weight-only updates for ``config.warmup_epochs`` (architecture untouched)."""
    searcher = Searcher(supernet, train_search, train_search, config)
    for epoch in range(1, (epochs or config.warmup_epochs) + 1):
        searcher.warmup_epoch(epoch)
    assert_digest_unchanged(searcher.base_digest, weight_digest(supernet, "base"))
    return searcher


def run_search(supernet, train_search, val_search, config, lambda_hook=None):
    """Run warm-up then alternating search; return the trace and the searcher."""
    searcher = Searcher(supernet, train_search, val_search, config, lambda_hook)
    return searcher.run(), searcher
