"""Stage I baseline training, Stage III implant-and-train, Dice and evaluation."""

from __future__ import annotations

import copy
import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .errors import InvalidArgumentError, NonFiniteLossError
from .unet import (
    DiscreteCellFactory,
    SkipMode,
    assert_digest_unchanged,
    build_unet,
    load_state,
    read_checkpoint,
    weight_digest,
)

DICE_EPS = 1e-6


def _per_channel_dice(pred, target, eps=DICE_EPS):
    if pred.shape != target.shape:
        raise InvalidArgumentError(
            f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}"
        )
    dims = (-2, -1)
    inter = (pred * target).sum(dim=dims)
    denom = pred.sum(dim=dims) + target.sum(dim=dims)
    return (2 * inter + eps) / (denom + eps)


def dice_score(pred, target, eps=DICE_EPS):
    """Mean over channels (and samples) of the eps-smoothed Dice coefficient."""
    return _per_channel_dice(pred, target, eps).mean()


def dice_loss(pred, target, eps=DICE_EPS):
    return 1.0 - dice_score(pred, target, eps)


@dataclass(frozen=True)
class StageConfig:
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 16
    seed: int = 0
    optimizer: str = "adam"
    checkpoint_policy: str = "best_val_dice"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise InvalidArgumentError("epochs, batch_size and lr must be positive")
        if self.optimizer != "adam":
            raise InvalidArgumentError("stage optimizer is fixed to adam")
        if self.checkpoint_policy != "best_val_dice":
            raise InvalidArgumentError("checkpoint policy is fixed to best_val_dice")


@dataclass
class EvalReport:
    mean_dice: dict = field(default_factory=dict)
    per_class_dice: dict = field(default_factory=dict)
    curves: dict = field(default_factory=lambda: {"train_loss": [], "val_loss": [], "val_dice": []})
    mean_loss: dict = field(default_factory=dict)
    best_epoch: int = 0
    runtime_s: float = 0.0

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        """Stable JSON; runtime is excluded so equal runs give equal bytes."""
        d = self.to_dict()
        d.pop("runtime_s")
        return json.dumps(d, sort_keys=True, indent=1)

    def curves_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_dice"])
        c = self.curves
        for e in range(len(c["val_dice"])):
            w.writerow([e + 1, repr(c["train_loss"][e]), repr(c["val_loss"][e]), repr(c["val_dice"][e])])
        return buf.getvalue()

    def save(self, out_dir, stem):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(self.to_json())
        (out / f"{stem}_curves.csv").write_text(self.curves_csv())


def batches(n, batch_size, generator=None):
    """Index batches over ``range(n)``; shuffled when a generator is given."""
    order = torch.randperm(n, generator=generator) if generator is not None else torch.arange(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _check_finite(loss, where):
    if not math.isfinite(loss.item()):
        raise NonFiniteLossError(f"non-finite loss during {where}")


@torch.no_grad()
def evaluate(model, split, batch_size=16, generator_seed=0, name="val"):
    """Soft Dice loss and hard (0.5-threshold) Dice over ``split = (images, masks)``."""
    images, masks = split
    if len(images) == 0:
        raise InvalidArgumentError("cannot evaluate an empty split")
    was_training = model.training
    model.eval()
    gen = torch.Generator().manual_seed(generator_seed)
    losses, per_class = [], []
    for idx in batches(len(images), batch_size):
        pred = model(images[idx], gen)
        losses.append(float(dice_loss(pred, masks[idx])) * len(idx))
        per_class.append(_per_channel_dice((pred > 0.5).float(), masks[idx]))
    model.train(was_training)
    pc = torch.cat(per_class).mean(dim=0)
    report = EvalReport()
    report.mean_dice[name] = float(pc.mean())
    report.per_class_dice[name] = [float(v) for v in pc]
    report.mean_loss[name] = sum(losses) / len(images)
    return report


def _train_epochs(model, params, stage, train, val, where):
    """Adam over ``params``; restores the best-val-Dice state at the end."""
    opt = torch.optim.Adam(params, lr=stage.lr)
    gen = torch.Generator().manual_seed(stage.seed)
    mask_gen = torch.Generator().manual_seed(stage.seed + 1)
    images, masks = train
    report = EvalReport()
    best, best_state = -1.0, None
    t0 = time.perf_counter()
    for epoch in range(stage.epochs):
        model.train()
        total = 0.0
        for idx in batches(len(images), stage.batch_size, gen):
            opt.zero_grad()
            loss = dice_loss(model(images[idx], mask_gen), masks[idx])
            _check_finite(loss, where)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        ev = evaluate(model, val, stage.batch_size)
        report.curves["train_loss"].append(total / len(images))
        report.curves["val_loss"].append(ev.mean_loss["val"])
        report.curves["val_dice"].append(ev.mean_dice["val"])
        if ev.mean_dice["val"] > best:
            best = ev.mean_dice["val"]
            best_state = copy.deepcopy(model.state_dict())
            report.best_epoch = epoch + 1
            report.per_class_dice["val"] = ev.per_class_dice["val"]
    model.load_state_dict(best_state)
    report.mean_dice["val"] = best
    report.mean_loss["val"] = report.curves["val_loss"][report.best_epoch - 1]
    tr = evaluate(model, train, stage.batch_size, name="train")
    report.mean_dice["train"] = tr.mean_dice["train"]
    report.mean_loss["train"] = tr.mean_loss["train"]
    report.per_class_dice["train"] = tr.per_class_dice["train"]
    report.runtime_s = time.perf_counter() - t0
    return report


def train_baseline(unet_config, stage, train, val, skip_mode=SkipMode.CONCAT):
    """Stage I: train a concat-skip U-Net; return the best-val-Dice model and report.

    ``skip_mode=SkipMode.ZEROED`` trains the same net without encoder skips (a control).
    """
    skip_mode = SkipMode(skip_mode)
    if skip_mode not in (SkipMode.CONCAT, SkipMode.ZEROED):
        raise InvalidArgumentError(f"baseline skip mode must be concat or zeroed, got {skip_mode.value}")
    torch.manual_seed(stage.seed)
    model = build_unet(unet_config, skip_mode, seed=stage.seed)
    report = _train_epochs(model, list(model.parameters()), stage, train, val, "stage I")
    model.eval()
    return model, report


def _base_arrays(baseline):
    if isinstance(baseline, (str, Path)):
        return read_checkpoint(baseline)[1]
    if isinstance(baseline, dict):
        return baseline
    return {k: v.detach().cpu().numpy() for k, v in baseline.state_dict().items()}


def build_implanted(unet_config, baseline, genotype, seed=0):
    """Discrete-cell U-Net with the baseline's weights loaded and frozen; cells start fresh."""
    model = build_unet(unet_config, SkipMode.DISCRETE_CELL, DiscreteCellFactory(genotype, seed), seed)
    load_state(model, _base_arrays(baseline), scope="base")
    model.freeze_base_weights()
    return model


def implant_and_train(baseline, genotype, unet_config, stage, train, val):
    """Stage III: implant the discrete cell into the frozen baseline and train only the cells."""
    if genotype.n_nodes < 1:
        raise InvalidArgumentError("genotype has no nodes")
    torch.manual_seed(stage.seed)
    model = build_implanted(unet_config, baseline, genotype, stage.seed)
    before = weight_digest(model, "base")
    report = _train_epochs(model, model.cell_parameters(), stage, train, val, "stage III")
    assert_digest_unchanged(before, weight_digest(model, "base"))
    model.eval()
    return model, report
