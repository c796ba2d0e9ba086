import json

import pytest
import torch

from iac_forge.cell import Genotype
from iac_forge.data import SyntheticTaskSpec, generate_synthetic, load_arrays, make_splits
from iac_forge.errors import InvalidArgumentError
from iac_forge.pipeline import (
    StageConfig,
    build_implanted,
    dice_loss,
    dice_score,
    evaluate,
    implant_and_train,
    train_baseline,
)
from iac_forge.search_space import OpKind
from iac_forge.unet import SkipMode, UNetConfig, build_unet, weight_digest

G = Genotype((((0, OpKind.SEP_CONV_3X3), (1, OpKind.IDENTITY)),
              ((1, OpKind.DIL_CONV_3X3), (2, OpKind.AVG_POOL_3X3)),
              ((0, OpKind.IDENTITY), (3, OpKind.MAX_POOL_3X3)),
              ((1, OpKind.SEP_CONV_5X5), (4, OpKind.DIL_CONV_5X5))))
CFG = UNetConfig(depth=3, base_width=4)


def test_dice_identical_and_disjoint():
    t = torch.zeros(1, 2, 8, 8)
    t[:, 0, :4] = 1
    t[:, 1, 4:] = 1
    assert dice_score(t, t) == pytest.approx(1.0)
    assert dice_loss(t, t) == pytest.approx(0.0, abs=1e-7)
    assert dice_score(t.flip(1), t) < 1e-6


def test_dice_half_overlap():
    g = torch.zeros(1, 1, 20, 20)
    p = torch.zeros(1, 1, 20, 20)
    g[0, 0, 0:5] = 1
    p[0, 0, 0:5, :10] = 1
    p[0, 0, 10:15, :10] = 1
    assert (g.sum(), p.sum(), (g * p).sum()) == (100, 100, 50)
    assert dice_score(p, g) == pytest.approx(0.5, abs=1e-8)


def test_dice_symmetric_and_bounded(gen):
    a = (torch.rand(3, 2, 8, 8, generator=gen) > 0.5).float()
    b = (torch.rand(3, 2, 8, 8, generator=gen) > 0.5).float()
    assert dice_score(a, b) == dice_score(b, a)
    soft = torch.rand(3, 2, 8, 8, generator=gen)
    assert 0 <= float(dice_loss(soft, b)) <= 1


def test_dice_shape_mismatch():
    with pytest.raises(InvalidArgumentError):
        dice_score(torch.zeros(1, 1, 4, 4), torch.zeros(1, 2, 4, 4))


def test_dice_empty_masks_defined():
    z = torch.zeros(1, 1, 4, 4)
    assert dice_score(z, z) == pytest.approx(1.0)


@pytest.fixture(scope="module")
def splits(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    m = generate_synthetic(SyntheticTaskSpec("skip_dependent", 30, 32, 32, 1, 0.3, 0), root)
    sp = make_splits(m, 0.8, 0.5, 0)
    return load_arrays(m, list(sp.train_dt)), load_arrays(m, list(sp.val_dt))


def test_evaluate_deterministic_and_pure(splits):
    model = build_unet(CFG)
    before = weight_digest(model)
    a, b = evaluate(model, splits[1]), evaluate(model, splits[1])
    assert a.to_json() == b.to_json()
    assert weight_digest(model) == before
    assert 0 <= a.mean_dice["val"] <= 1


def test_evaluate_empty_split():
    with pytest.raises(InvalidArgumentError):
        evaluate(build_unet(CFG), (torch.zeros(0, 1, 32, 32), torch.zeros(0, 1, 32, 32)))


class Background(torch.nn.Module):
    def forward(self, x, generator=None):
        return torch.zeros_like(x)


def test_all_background_predictor(splits):
    r = evaluate(Background(), splits[1])
    assert r.mean_dice["val"] < 1e-6


def test_stage_config_validation():
    with pytest.raises(InvalidArgumentError):
        StageConfig(optimizer="sgd")
    with pytest.raises(InvalidArgumentError):
        StageConfig(epochs=0)
    with pytest.raises(InvalidArgumentError):
        StageConfig(checkpoint_policy="last")


@pytest.fixture(scope="module")
def baseline(splits):
    return train_baseline(CFG, StageConfig(epochs=3, seed=1), *splits)


def test_baseline_report(baseline, splits):
    model, report = baseline
    assert model.skip_mode is SkipMode.CONCAT
    for k in ("train_loss", "val_loss", "val_dice"):
        assert len(report.curves[k]) == 3
    # best-val policy: the returned weights score the curve maximum
    assert report.mean_dice["val"] == max(report.curves["val_dice"])
    assert evaluate(model, splits[1]).mean_dice["val"] == pytest.approx(report.mean_dice["val"], abs=1e-7)
    doc = json.loads(report.to_json())
    assert "runtime_s" not in doc and report.runtime_s > 0
    assert report.curves_csv().splitlines()[0] == "epoch,train_loss,val_loss,val_dice"


def test_baseline_deterministic(baseline, splits):
    model, report = baseline
    again, report2 = train_baseline(CFG, StageConfig(epochs=3, seed=1), *splits)
    assert weight_digest(again) == weight_digest(model)
    assert report2.to_json() == report.to_json()


def test_implant_freeze_contract(baseline, splits, tmp_path):
    model, _ = baseline
    implanted = build_implanted(CFG, model, G, seed=0)
    assert weight_digest(implanted, "base") == weight_digest(model, "base")
    assert implanted.trainable_parameter_count() == sum(p.numel() for p in implanted.cell_parameters())
    assert implanted.arch is None and implanted.arch_parameters() == []
    trained, report = implant_and_train(model, G, CFG, StageConfig(epochs=2, seed=0), *splits)
    assert weight_digest(trained, "base") == weight_digest(model, "base")
    assert weight_digest(trained, "cell") != weight_digest(implanted, "cell")
    assert len(report.curves["val_dice"]) == 2


def test_implant_from_checkpoint(baseline, splits, tmp_path):
    from iac_forge.unet import save_checkpoint
    model, _ = baseline
    save_checkpoint(model, tmp_path / "b.ckpt")
    a = build_implanted(CFG, tmp_path / "b.ckpt", G)
    assert weight_digest(a, "base") == weight_digest(model, "base")


def test_implant_config_mismatch(baseline):
    model, _ = baseline
    with pytest.raises(InvalidArgumentError):
        build_implanted(UNetConfig(depth=3, base_width=8), model, G)


@pytest.mark.slow
def test_shapes_easy_saturates(tmp_path):
    """Trivially separable task at desk settings reaches Dice >= 0.9 on every seed."""
    scores = []
    for seed in range(5):
        m = generate_synthetic(SyntheticTaskSpec("shapes_easy", 250, 64, 64, 1, 0.3, seed), tmp_path / str(seed))
        sp = make_splits(m, 0.8, 0.5, seed)
        tr, va = load_arrays(m, list(sp.train_dt)), load_arrays(m, list(sp.val_dt))
        _, rep = train_baseline(UNetConfig(), StageConfig(epochs=30, seed=seed), tr, va)
        scores.append(rep.mean_dice["val"])
    assert min(scores) >= 0.90, scores


@pytest.mark.slow
def test_skip_dependent_needs_skips(tmp_path):
    """With encoder skips zeroed the same net loses at least 0.05 val Dice."""
    m = generate_synthetic(SyntheticTaskSpec("skip_dependent", 250, 64, 64, 1, 0.3, 0), tmp_path)
    sp = make_splits(m, 0.8, 0.5, 0)
    tr, va = load_arrays(m, list(sp.train_dt)), load_arrays(m, list(sp.val_dt))
    stage = StageConfig(epochs=30, seed=0)
    _, with_skips = train_baseline(UNetConfig(), stage, tr, va)
    _, without = train_baseline(UNetConfig(), stage, tr, va, SkipMode.ZEROED)
    assert with_skips.mean_dice["val"] - without.mean_dice["val"] >= 0.05


def test_baseline_rejects_cell_modes(splits):
    with pytest.raises(InvalidArgumentError):
        train_baseline(CFG, StageConfig(epochs=1), *splits, skip_mode=SkipMode.DISCRETE_CELL)
