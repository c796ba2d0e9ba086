"""``iac-forge`` command line: one subcommand per pipeline stage plus reporting.

Every subcommand reads and writes under ``--out`` using a fixed layout, so a
full run is the stage commands in order with the same ``--out``::

    out/config.json           resolved experiment config
    out/data/                 generated dataset (manifest.json, images/, masks/)
    out/splits.json
    out/stage1/               baseline.ckpt, report.json, curves
    out/stage2/               genotype trace, arch dumps, omega.ckpt, DOT/SVG
    out/stage3/ep{N}/         implanted model per snapshot, report.json, curves
    out/report/               improvement table (CSV/TXT/JSON), stats.json, figures

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .cell import describe, genotype_from_json
from .config import ExperimentConfig, load_config
from .data import (
    SplitSpec,
    SyntheticTaskSpec,
    generate_synthetic,
    load_arrays,
    load_manifest,
    make_splits,
)
from .errors import (
    ConfigError,
    FrozenWeightsViolation,
    GenotypeParseError,
    InvalidArgumentError,
    NonFiniteLossError,
    NumericalDomainError,
)
from .pipeline import EvalReport, evaluate, implant_and_train, train_baseline
from .report import (
    improvement_table,
    paired_statistics,
    plot_learning_curves,
    write_genotype_files,
)
from .search import run_search
from .unet import (
    ContinuousCellFactory,
    SkipMode,
    build_unet,
    load_checkpoint,
    load_state,
    read_checkpoint,
    save_checkpoint,
)

log = logging.getLogger("iac_forge")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_globals(p, suppress):
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", default=d(None), help="experiment config JSON")
    p.add_argument("--seed", type=int, default=d(None), help="override every seed in the config")
    p.add_argument("--out", default=d("runs/default"), help="output directory")
    p.add_argument("--deterministic", action="store_true", default=d(False),
                   help="single thread and deterministic kernels")


def build_parser():
    parser = _Parser(prog="iac-forge", description="Implantable adaptive cell pipeline")
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        _add_globals(p, suppress=True)
        return p

    add("gen-data", "generate the synthetic dataset")
    add("split", "write train/val/search splits")
    add("train-baseline", "Stage I: train the concat-skip U-Net")
    add("search", "Stage II: search the cell on the frozen baseline")
    p = add("implant", "Stage III: implant searched genotypes and train the cells")
    p.add_argument("--genotype", action="append", default=None,
                   help="genotype JSON to implant (default: configured snapshots)")
    p = add("eval", "evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--split", default="val_dt",
                   choices=["train_dt", "val_dt", "train_search_dt", "val_search_dt"])
    p = add("report", "improvement table, statistics and figures")
    p.add_argument("runs", nargs="*", help="run directories (default: --out)")
    add("run", "gen-data, split, train-baseline, search, implant and report in one go")
    g = add("genotype", "inspect a genotype file")
    gsub = g.add_subparsers(dest="gcommand", parser_class=_Parser, required=True)
    for name, help_ in (("show", "print the edge listing"), ("plot", "write DOT and SVG")):
        gp = gsub.add_parser(name, help=help_)
        _add_globals(gp, suppress=True)
        gp.add_argument("file")
    return parser


# -- helpers ----------------------------------------------------------------

def _config(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _write_json(path, doc):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=1))


def _manifest(cfg, out):
    if cfg.dataset.manifest:
        return load_manifest(cfg.dataset.manifest)
    path = out / "data" / "manifest.json"
    if not path.is_file():
        raise InvalidArgumentError(f"{path} missing; run gen-data first")
    return load_manifest(path)


def _splits(cfg, out):
    path = out / "splits.json"
    if not path.is_file():
        raise InvalidArgumentError(f"{path} missing; run split first")
    spec = SplitSpec.from_dict(json.loads(path.read_text()))
    m = _manifest(cfg, out)
    size = (cfg.dataset.H, cfg.dataset.W)
    return {name: load_arrays(m, list(getattr(spec, name)), size)
            for name in ("train_dt", "val_dt", "train_search_dt", "val_search_dt")}


def _baseline_path(out):
    path = out / "stage1" / "baseline.ckpt"
    if not path.is_file():
        raise InvalidArgumentError(f"{path} missing; run train-baseline first")
    return path


def _save_stage(report, model, stage_dir, label, extra):
    stage_dir.mkdir(parents=True, exist_ok=True)
    ckpt = "baseline.ckpt" if label == "stage1" else "model.ckpt"
    digest = save_checkpoint(model, stage_dir / ckpt, extra)
    report.save(stage_dir, "report")
    plot_learning_curves({label: report.curves}, stage_dir / "curves.svg")
    return digest


# -- subcommands ----------------------------------------------------------

def cmd_gen_data(cfg, out, args):
    d = cfg.dataset
    if d.manifest:
        raise ConfigError("dataset.manifest is set; nothing to generate")
    spec = SyntheticTaskSpec(d.task, d.n_samples, d.H, d.W, d.classes, d.noise, d.seed)
    m = generate_synthetic(spec, out / "data")
    print(f"wrote {len(m.samples)} samples to {out / 'data'}")


def cmd_split(cfg, out, args):
    d = cfg.dataset
    spec = make_splits(_manifest(cfg, out), d.train_fraction, d.search_fraction, d.seed)
    _write_json(out / "splits.json", spec.to_dict())
    print(f"train {len(spec.train_dt)} val {len(spec.val_dt)} "
          f"search {len(spec.train_search_dt)}/{len(spec.val_search_dt)}")


def cmd_train_baseline(cfg, out, args):
    s = _splits(cfg, out)
    model, report = train_baseline(cfg.unet, cfg.stage1, s["train_dt"], s["val_dt"])
    digest = _save_stage(report, model, out / "stage1", "stage1", {"stage": 1})
    print(f"stage I best val Dice {report.mean_dice['val']:.4f} "
          f"(epoch {report.best_epoch}), digest {digest[:16]}")


def cmd_search(cfg, out, args):
    s = _splits(cfg, out)
    header, arrays = read_checkpoint(_baseline_path(out))
    supernet = build_unet(cfg.unet, SkipMode.CONTINUOUS_CELL,
                          ContinuousCellFactory(cfg.space_config(), cfg.stage2.seed), cfg.stage2.seed)
    load_state(supernet, arrays, scope="base")
    supernet.freeze_base_weights()
    trace, _ = run_search(supernet, s["train_search_dt"], s["val_search_dt"], cfg.stage2)
    stage_dir = trace.save(out / "stage2", supernet)
    for e in trace.epochs:
        write_genotype_files(trace.genotype(e), stage_dir / f"genotype_ep{e}")
    print(f"stage II snapshots at epochs {trace.epochs}")


def cmd_implant(cfg, out, args):
    s = _splits(cfg, out)
    base = _baseline_path(out)
    if args.genotype:
        jobs = [(Path(p).stem, Path(p)) for p in args.genotype]
    else:
        jobs = [(f"ep{e}", out / "stage2" / f"genotype_ep{e}.json") for e in cfg.implant_epochs()]
    for label, path in jobs:
        if not path.is_file():
            raise InvalidArgumentError(f"{path} missing; run search first")
        g = genotype_from_json(path.read_bytes())
        model, report = implant_and_train(base, g, cfg.unet, cfg.stage3, s["train_dt"], s["val_dt"])
        _save_stage(report, model, out / "stage3" / label, "stage3",
                    {"stage": 3, "genotype_file": path.name})
        print(f"stage III {label}: best val Dice {report.mean_dice['val']:.4f} (epoch {report.best_epoch})")


def cmd_eval(cfg, out, args):
    s = _splits(cfg, out)
    model, _ = load_checkpoint(args.checkpoint)
    report = evaluate(model, s[args.split], cfg.stage1.batch_size, name=args.split)
    stem = Path(args.checkpoint).stem
    (out / "eval").mkdir(parents=True, exist_ok=True)
    (out / "eval" / f"{stem}_{args.split}.json").write_text(report.to_json())
    print(f"{args.split} Dice {report.mean_dice[args.split]:.4f} loss {report.mean_loss[args.split]:.4f}")


def _load_report(path):
    doc = json.loads(Path(path).read_text())
    return EvalReport(**{k: v for k, v in doc.items() if k != "runtime_s"})


def collect_run(run):
    """Baseline and Stage III val Dice (plus curves) from one run directory."""
    run = Path(run)
    cfg_path = run / "config.json"
    cfg = load_config(cfg_path) if cfg_path.is_file() else ExperimentConfig()
    s1 = run / "stage1" / "report.json"
    if not s1.is_file():
        raise InvalidArgumentError(f"{s1} missing")
    base = _load_report(s1)
    snaps = {}
    stage3 = run / "stage3"
    labels = sorted((p.name for p in stage3.iterdir() if (p / "report.json").is_file()),
                    key=lambda n: (not n.startswith("ep"), int(n[2:]) if n[2:].isdigit() else 0, n)) \
        if stage3.is_dir() else []
    for label in labels:
        snaps[label.upper()] = _load_report(stage3 / label / "report.json")
    if not snaps:
        raise InvalidArgumentError(f"{stage3}: no Stage III reports")
    key = (f"{cfg.dataset.task}/seed{cfg.dataset.seed}", cfg.unet.backbone_id)
    return cfg, key, base, snaps


def cmd_report(cfg, out, args):
    runs = [Path(r) for r in (args.runs or [out])]
    baselines, results, curves = {}, {}, {}
    level = cfg.report.level
    for run in runs:
        rcfg, key, base, snaps = collect_run(run)
        if key in baselines:
            raise InvalidArgumentError(f"two runs share the row key {key}")
        baselines[key] = base.mean_dice["val"]
        results[key] = {label: r.mean_dice["val"] for label, r in snaps.items()}
        curves[key] = {"stage I": base.curves, **{f"stage III {k}": r.curves for k, r in snaps.items()}}
    table = improvement_table(baselines, results)
    rdir = out / "report"
    rdir.mkdir(parents=True, exist_ok=True)
    (rdir / "improvement.csv").write_text(table.to_csv())
    (rdir / "improvement.txt").write_text(table.to_text())
    (rdir / "improvement.json").write_text(table.to_json())
    keys = [(r.dataset, r.backbone) for r in table.rows]
    stats = {c: paired_statistics([baselines[k] for k in keys], [results[k][c] for k in keys], level)
             for c in table.columns}
    _write_json(rdir / "stats.json", stats)
    for (dataset, backbone), c in curves.items():
        name = f"{dataset}_{backbone}".replace("/", "_")
        plot_learning_curves(c, rdir / f"curves_{name}.svg", title=f"{dataset} / {backbone}")
    for run in runs:
        for g in sorted((run / "stage2").glob("genotype_ep*.json")):
            rname = run.name if len(runs) > 1 else ""
            write_genotype_files(genotype_from_json(g.read_bytes()), rdir / "genotypes" / rname / g.stem)
    sys.stdout.write(table.to_text())


def cmd_genotype(cfg, out, args):
    path = Path(args.file)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise InvalidArgumentError(f"{path}: {exc.strerror}") from None
    g = genotype_from_json(data)
    if args.gcommand == "show":
        print(describe(g))
    else:
        dot, svg = write_genotype_files(g, out / path.stem)
        print(f"wrote {dot} and {svg}")


def cmd_run(cfg, out, args):
    """Every stage in order, then the single-run report."""
    if not cfg.dataset.manifest:
        cmd_gen_data(cfg, out, args)
    cmd_split(cfg, out, args)
    cmd_train_baseline(cfg, out, args)
    cmd_search(cfg, out, args)
    args.genotype = None
    cmd_implant(cfg, out, args)
    args.runs = [out]
    cmd_report(cfg, out, args)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "split": cmd_split,
    "train-baseline": cmd_train_baseline,
    "search": cmd_search,
    "implant": cmd_implant,
    "eval": cmd_eval,
    "report": cmd_report,
    "genotype": cmd_genotype,
    "run": cmd_run,
}


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        cfg = _config(args)
        if args.deterministic:
            torch.use_deterministic_algorithms(True)
            torch.set_num_threads(1)
        out = Path(args.out)
        if args.command not in ("genotype", "report", "eval"):
            out.mkdir(parents=True, exist_ok=True)
            (out / "config.json").write_text(cfg.to_json())
        COMMANDS[args.command](cfg, out, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (InvalidArgumentError, GenotypeParseError, NonFiniteLossError, NumericalDomainError,
            FrozenWeightsViolation, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
