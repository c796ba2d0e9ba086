import csv
import io
import json
from decimal import Decimal

import pytest

from iac_forge.cell import Genotype
from iac_forge.errors import InvalidArgumentError
from iac_forge.report import (
    BETTER,
    UNCHANGED,
    WORSE,
    improvement_table,
    paired_statistics,
    plot_genotype,
    plot_learning_curves,
    write_genotype_files,
)
from iac_forge.search_space import OpKind

EPOCHS = ["EP25", "EP50", "EP100", "EP150", "EP200"]


def kits_table():
    # one row: baseline 0.445 and five snapshot columns
    return improvement_table({("KITS", "Base"): 0.445},
                             {("KITS", "Base"): dict(zip(EPOCHS, [0.606, 0.467, 0.630, 0.625, 0.595]))})


def test_kits_base_deltas():
    t = kits_table()
    row = t.rows[0]
    assert [row.delta(c) for c in EPOCHS] == [Decimal(v) for v in
                                               ("0.161", "0.022", "0.185", "0.180", "0.150")]
    rows = list(csv.DictReader(io.StringIO(t.to_csv())))
    assert [rows[0][f"delta_{c}"] for c in EPOCHS] == ["+0.161", "+0.022", "+0.185", "+0.180", "+0.150"]
    assert all(rows[0][f"mark_{c}"] == BETTER for c in EPOCHS)


def test_acdc_worse_and_unchanged():
    t = improvement_table({("ACDC", "Base"): 0.919}, {("ACDC", "Base"): {"EP25": 0.915, "EP50": 0.919}})
    r = t.rows[0]
    assert r.delta("EP25") == Decimal("-0.004")
    assert r.delta("EP50") == 0
    doc = json.loads(t.to_json())
    assert doc["rows"][0]["marks"] == {"EP25": WORSE, "EP50": UNCHANGED}
    assert doc["rows"][0]["deltas"]["EP50"] == "0.000"
    text = t.to_text()
    assert "0.915 (-0.004) v" in text and "0.919 (+0.000) =" in text


def test_values_stored_exactly():
    t = kits_table()
    assert str(t.rows[0].values["EP200"]) == "0.595"
    assert json.loads(t.to_json())["rows"][0]["values"]["EP200"] == "0.595"


def test_summary_mean_variance():
    t = improvement_table({("a", "x"): 0.5, ("b", "x"): 0.5},
                          {("a", "x"): {"E": 0.6}, ("b", "x"): {"E": 0.8}})
    s = t.summary()["E"]
    assert s["mean"] == pytest.approx(0.2) and s["variance"] == pytest.approx(0.02)
    assert s["ci_low"] < 0.2 < s["ci_high"]
    assert "+0.200 +- 0.0200" in t.to_text()


def test_key_mismatch_lists_keys():
    with pytest.raises(InvalidArgumentError, match="KITS"):
        improvement_table({("KITS", "Base"): 0.4, ("ACDC", "Base"): 0.9}, {("ACDC", "Base"): {"E": 0.9}})
    with pytest.raises(InvalidArgumentError):
        improvement_table({("a", "x"): 0.4, ("b", "x"): 0.4}, {("a", "x"): {"E": 1}, ("b", "x"): {"F": 1}})


def test_rendering_deterministic():
    assert kits_table().to_csv() == kits_table().to_csv()
    assert kits_table().to_text() == kits_table().to_text()


def test_paired_statistics_bundle():
    base = [0.5, 0.6, 0.7, 0.55, 0.65]
    better = [0.55, 0.62, 0.74, 0.6, 0.66]
    s = paired_statistics(base, better)
    assert s["n"] == 5 and s["wilcoxon_greater"]["p"] == 0.03125
    assert s["paired_t"]["t"] > 0
    assert paired_statistics([0.5], [0.6]) == {"n": 1, "deltas": [pytest.approx(0.1)]}


def test_figures_byte_identical(tmp_path):
    curves = {"stage I": {"train_loss": [0.9, 0.5], "val_loss": [0.8, 0.6], "val_dice": [0.2, 0.4]}}
    a = plot_learning_curves(curves, tmp_path / "a.svg").read_bytes()
    b = plot_learning_curves(curves, tmp_path / "b.svg").read_bytes()
    assert a == b and a.lstrip().startswith(b"<?xml")
    g = Genotype(tuple(((0, OpKind.IDENTITY), (1, OpKind.SEP_CONV_3X3)) for _ in range(4)))
    dot, svg = write_genotype_files(g, tmp_path / "g")
    assert dot.read_text().startswith("digraph") and svg.suffix == ".svg"
    assert plot_genotype(g, tmp_path / "h.svg").read_bytes() == svg.read_bytes()
