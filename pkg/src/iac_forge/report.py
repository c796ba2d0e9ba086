"""Improvement tables, statistics bundles and static figures (SVG/DOT)."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .cell import N_INPUTS, genotype_to_dot  # noqa: E402
from .errors import InvalidArgumentError  # noqa: E402
from .stats import paired_t_test, summarize, wilcoxon_signed_rank  # noqa: E402

BETTER, WORSE, UNCHANGED = "better", "worse", "unchanged"
SYMBOL = {BETTER: "^", WORSE: "v", UNCHANGED: "="}

# fixed ids and no timestamps so re-rendering gives identical SVG bytes
matplotlib.rcParams["svg.hashsalt"] = "iac-forge"
_SVG_META = {"Date": None, "Creator": None}


def _dec(x):
    """Exact decimal of the shortest repr, so 0.595 - 0.445 is 0.150."""
    if isinstance(x, Decimal):
        return x
    if isinstance(x, str):
        return Decimal(x)
    return Decimal(repr(float(x)))


def marker(delta):
    if delta > 0:
        return BETTER
    if delta < 0:
        return WORSE
    return UNCHANGED


def _fmt(v, places=3, sign=False):
    q = Decimal(1).scaleb(-places)
    v = v.quantize(q)
    return f"{v:+f}" if sign else f"{v:f}"


@dataclass
class ResultsRow:
    dataset: str
    backbone: str
    baseline: Decimal
    values: dict

    def delta(self, column):
        return self.values[column] - self.baseline


@dataclass
class ResultsTable:
    columns: list
    rows: list = field(default_factory=list)

    def deltas(self, column):
        return [r.delta(column) for r in self.rows]

    def summary(self, level=0.95):
        """Per column: mean and variance (and t-interval) of the deltas over rows."""
        out = {}
        for c in self.columns:
            d = [float(x) for x in self.deltas(c)]
            if len(d) >= 2:
                out[c] = summarize(d, level).to_dict()
            else:
                out[c] = {"n": len(d), "mean": d[0] if d else None, "variance": None,
                          "ci_low": None, "ci_high": None, "level": level}
        return out

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["dataset", "backbone", "baseline"]
        for c in self.columns:
            header += [c, f"delta_{c}", f"mark_{c}"]
        w.writerow(header)
        for r in self.rows:
            line = [r.dataset, r.backbone, str(r.baseline)]
            for c in self.columns:
                d = r.delta(c)
                line += [str(r.values[c]), _fmt(d, sign=True), marker(d)]
            w.writerow(line)
        summ = self.summary()
        line = ["summary", "mean_delta", ""]
        for c in self.columns:
            m = summ[c]["mean"]
            line += ["", "" if m is None else repr(m), ""]
        w.writerow(line)
        line = ["summary", "var_delta", ""]
        for c in self.columns:
            v = summ[c]["variance"]
            line += ["", "" if v is None else repr(v), ""]
        w.writerow(line)
        return buf.getvalue()

    def to_text(self):
        head = ["dataset", "backbone", "BSLN"] + list(self.columns)
        body = []
        for r in self.rows:
            cells = [r.dataset, r.backbone, _fmt(r.baseline)]
            for c in self.columns:
                d = r.delta(c)
                cells.append(f"{_fmt(r.values[c])} ({_fmt(d, sign=True)}) {SYMBOL[marker(d)]}")
            body.append(cells)
        summ = self.summary()
        foot = ["mean+-var", "delta", ""]
        for c in self.columns:
            s = summ[c]
            if s["variance"] is None:
                foot.append("n/a" if s["mean"] is None else f"{s['mean']:+.3f}")
            else:
                foot.append(f"{s['mean']:+.3f} +- {s['variance']:.4f}")
        rows = [head] + body + [foot]
        widths = [max(len(row[i]) for row in rows) for i in range(len(head))]
        lines = ["  ".join(cell.ljust(wd) for cell, wd in zip(row, widths)).rstrip() for row in rows]
        lines.insert(1, "  ".join("-" * wd for wd in widths))
        lines.append(f"markers: {SYMBOL[BETTER]} better, {SYMBOL[WORSE]} worse, "
                     f"{SYMBOL[UNCHANGED]} unchanged vs BSLN")
        return "\n".join(lines) + "\n"

    def to_json(self):
        doc = {
            "columns": list(self.columns),
            "rows": [{"dataset": r.dataset, "backbone": r.backbone, "baseline": str(r.baseline),
                      "values": {c: str(r.values[c]) for c in self.columns},
                      "deltas": {c: str(r.delta(c)) for c in self.columns},
                      "marks": {c: marker(r.delta(c)) for c in self.columns}}
                     for r in self.rows],
            "summary": self.summary(),
        }
        return json.dumps(doc, sort_keys=True, indent=1)


def improvement_table(baselines, results):
    """Build a table from ``{(dataset, backbone): dice}`` and
    ``{(dataset, backbone): {column: dice}}``; every row needs the same columns."""
    b_keys, r_keys = set(baselines), set(results)
    if b_keys != r_keys:
        missing = sorted(map(str, (b_keys - r_keys) | (r_keys - b_keys)))
        raise InvalidArgumentError(f"baseline/result keys differ: {', '.join(missing)}")
    if not b_keys:
        raise InvalidArgumentError("no rows to tabulate")
    keys = sorted(b_keys)
    columns = list(results[keys[0]])
    rows = []
    for key in keys:
        if list(results[key]) != columns:
            raise InvalidArgumentError(f"row {key} has columns {list(results[key])}, expected {columns}")
        dataset, backbone = key
        rows.append(ResultsRow(str(dataset), str(backbone), _dec(baselines[key]),
                               {c: _dec(v) for c, v in results[key].items()}))
    return ResultsTable(columns, rows)


def paired_statistics(baseline, improved, level=0.95):
    """Delta summary plus paired tests where the sample is large enough."""
    d = [float(i) - float(b) for b, i in zip(baseline, improved)]
    out = {"n": len(d), "deltas": d}
    if len(d) >= 2:
        out["delta_summary"] = summarize(d, level).to_dict()
    if len(d) >= 5:
        try:
            t, p = paired_t_test(improved, baseline)
            out["paired_t"] = {"t": t, "p_two_sided": p}
        except InvalidArgumentError as exc:
            out["paired_t"] = {"error": str(exc)}
        try:
            w = wilcoxon_signed_rank(improved, baseline, "greater")
            out["wilcoxon_greater"] = {"statistic": w.statistic, "w_plus": w.w_plus,
                                       "p": w.pvalue, "n": w.n, "exact": w.exact}
        except InvalidArgumentError as exc:
            out["wilcoxon_greater"] = {"error": str(exc)}
    return out


# -- figures --------------------------------------------------------------

def plot_learning_curves(curves, path, title=None):
    """``curves``: ``{label: {"train_loss": [...], "val_loss": [...], "val_dice": [...]}}``."""
    fig, (ax_l, ax_d) = plt.subplots(1, 2, figsize=(9, 3.4))
    for label in sorted(curves):
        c = curves[label]
        ep = range(1, len(c["val_dice"]) + 1)
        line, = ax_l.plot(ep, c["train_loss"], label=f"{label} train")
        ax_l.plot(ep, c["val_loss"], ls="--", color=line.get_color(), label=f"{label} val")
        ax_d.plot(ep, c["val_dice"], color=line.get_color(), label=label)
    ax_l.set_xlabel("epoch")
    ax_l.set_ylabel("Dice loss")
    ax_d.set_xlabel("epoch")
    ax_d.set_ylabel("val Dice")
    ax_l.legend(fontsize=7, frameon=False)
    ax_d.legend(fontsize=7, frameon=False)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def plot_genotype(g, path):
    """Layered drawing of the cell DAG: inputs left, nodes by index, output right."""
    pos = {0: (0.0, 1.0), 1: (0.0, 0.0)}
    for j in range(g.n_nodes):
        pos[N_INPUTS + j] = (1.0 + j, 0.5 + 0.35 * (-1) ** j)
    out_pos = (g.n_nodes + 1.0, 0.5)
    names = {0: "in0", 1: "in1", **{N_INPUTS + j: str(j) for j in range(g.n_nodes)}}
    fig, ax = plt.subplots(figsize=(1.6 * (g.n_nodes + 2), 3))
    for j, src, op in g.edges():
        (x0, y0), (x1, y1) = pos[src], pos[N_INPUTS + j]
        ax.annotate("", (x1, y1), (x0, y0),
                    arrowprops={"arrowstyle": "->", "lw": 0.8, "shrinkA": 12, "shrinkB": 12,
                                "connectionstyle": "arc3,rad=0.15"})
        ax.text((x0 + x1) / 2, (y0 + y1) / 2 + 0.05, op.label, fontsize=6, ha="center")
    for j in range(g.n_nodes):
        (x0, y0) = pos[N_INPUTS + j]
        ax.annotate("", out_pos, (x0, y0),
                    arrowprops={"arrowstyle": "->", "lw": 0.5, "color": "0.6",
                                "shrinkA": 12, "shrinkB": 12})
    for k, (x, y) in pos.items():
        ax.text(x, y, names[k], ha="center", va="center", fontsize=8,
                bbox={"boxstyle": "round" if k >= N_INPUTS else "square", "fc": "white"})
    ax.text(*out_pos, "out", ha="center", va="center", fontsize=8, bbox={"boxstyle": "square", "fc": "white"})
    ax.set_xlim(-0.5, out_pos[0] + 0.5)
    ax.set_ylim(-0.4, 1.4)
    ax.axis("off")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def write_genotype_files(g, stem):
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    dot = stem.with_suffix(".dot")
    dot.write_text(genotype_to_dot(g))
    return dot, plot_genotype(g, stem.with_suffix(".svg"))
