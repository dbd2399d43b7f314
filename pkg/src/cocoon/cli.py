"""Command-line entry point: ``cocoon <verb> CONFIG [options]``.

Verbs: gen-data, train, cluster, annotate-sim, evaluate, report.  Every
artifact goes under the run's output root (``[run] out_dir``, or the
``COCOON_OUT`` environment variable) and carries the config hash.

Exit codes: 0 success, 2 validation error, 3 numeric failure, 4 IO error.
"""

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from . import __version__
from . import pipeline as pl
from .active import PropagatedLabelSet, assign_clusters, read_csv_hash
from .config import load_config
from .exceptions import (
    CheckpointError,
    CocoonError,
    ConfigError,
    ContractError,
    HashMismatchError,
    NumericError,
)
from .metrics import EvalReport, recovery
from .synth import load_world, read_manifest, save_world
from .trainer import (
    TrainingData,
    checkpoint_hash,
    load_checkpoint,
    run_curriculum,
    save_checkpoint,
    write_history,
)
from .utils import canonical_json

logger = logging.getLogger("cocoon")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
WORLD_FILE = "world.bin"
RESUME_FILE = "resume.ckpt"
HISTORY_FILE = "history.csv"
SUITES = ("qbe", "classifier", "cluster")


class OverwriteError(CocoonError, IOError):
    """Refusing to replace an existing artifact without --force."""


# helpers ----------------------------------------------------------------------

def _root(cfg):
    root = cfg.output_root()
    root.mkdir(parents=True, exist_ok=True)
    return root


def _guard(path, force):
    if Path(path).exists() and not force:
        raise OverwriteError(f"{path} exists (use --force to overwrite)")


def _ckpt_name(loss, tag=""):
    return f"ckpt_{loss.lower()}{'_' + tag if tag else ''}.ckpt"


def _load_splits(cfg, root, force=False):
    path = root / WORLD_FILE
    manifest = read_manifest(path)
    if manifest.get("run_hash") != cfg.hash and not force:
        raise HashMismatchError(f"{path} was generated under a different config "
                                "(regenerate it or pass --force)")
    world = load_world(path)
    if world.config != cfg.world:
        raise HashMismatchError(f"{path} does not match the [world] section")
    return pl.split_world(cfg, world)


def _load_ckpt(cfg, path, force=False):
    return load_checkpoint(path, expected_hash=cfg.hash, force=force)


def _stage_index(cfg, loss):
    for i, s in enumerate(cfg.curriculum.stages):
        if s.loss == loss:
            return i
    raise ConfigError(f"stage {loss} is not in the configured curriculum")


def _default_checkpoint(cfg, root):
    """Latest self-supervised stage checkpoint that exists."""
    for s in reversed(cfg.curriculum.stages):
        if s.loss != "CLASS" and (root / _ckpt_name(s.loss)).exists():
            return root / _ckpt_name(s.loss)
    raise CheckpointError(f"no stage checkpoint found in {root}; run `cocoon train` first")


def _load_labels(cfg, path, n, force):
    found = read_csv_hash(path)
    if found != cfg.hash and not force:
        raise HashMismatchError(f"label set {path} was produced under a different config")
    return PropagatedLabelSet.from_csv(path, n)


def _write_report(report, root, name, force):
    json_path, csv_path = root / f"{name}.json", root / f"{name}.csv"
    _guard(json_path, force)
    json_path.write_text(report.to_json())
    csv_path.write_text(report.to_csv())
    return json_path


def _write_rows(rows, path):
    cols = sorted({k for r in rows for k in r})
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow(r)


# verbs -------------------------------------------------------------------------

def cmd_gen_data(args):
    cfg = load_config(args.config)
    root = _root(cfg)
    path = root / WORLD_FILE
    _guard(path, args.force)
    world = pl.build_world(cfg)
    save_world(world, path, run_hash=cfg.hash)
    print(f"wrote {path} ({len(world)} frames, config {cfg.hash[:12]})")
    return EXIT_OK


def _selected_stages(cfg, which):
    names = [s.loss for s in cfg.curriculum.stages]
    if which == "all":
        return names
    if which == "self":
        return [n for n in names if n != "CLASS"]
    which = which.upper()
    if which not in names:
        raise ConfigError(f"stage {which} is not in the configured curriculum")
    return [which]


def cmd_train(args):
    cfg = load_config(args.config)
    root = _root(cfg)
    splits = _load_splits(cfg, root, args.force)
    selected = _selected_stages(cfg, args.stage)
    indices = [_stage_index(cfg, s) for s in selected]
    start, stop = min(indices), max(indices) + 1
    if indices != list(range(start, stop)):
        raise ConfigError("selected stages must be contiguous in the curriculum")
    tag = args.tag or ""

    labels = None
    if "CLASS" in selected:
        if not args.labels:
            raise ContractError("the CLASS stage needs --labels (run annotate-sim first)")
        labels = _load_labels(cfg, args.labels, len(splits["train"]), args.force).labels
    data = TrainingData(splits["train"], splits["val"], labels, cfg.world.n_classes)

    resume = params = None
    if args.resume:
        resume = _load_ckpt(cfg, root / RESUME_FILE, args.force)
        if not start <= resume.stage_index < stop:
            raise ContractError("the resume checkpoint is outside the requested stages")
        start = resume.stage_index
    elif start > 0 and not (selected[0] == "CLASS" and args.from_scratch):
        prev = cfg.curriculum.stages[start - 1].loss
        params = _load_ckpt(cfg, root / _ckpt_name(prev), args.force).params
    if not args.resume:
        for s in selected:
            _guard(root / _ckpt_name(s, tag), args.force)

    history_path = root / (f"history_{tag}.csv" if tag else HISTORY_FILE)

    def on_checkpoint(ckpt):
        save_checkpoint(ckpt, root / RESUME_FILE)
        logger.info("checkpoint at %s step %d", ckpt.stage, ckpt.step)

    def on_stage_end(ckpt):
        ckpt.meta = {"stage": ckpt.stage, "labels": Path(args.labels).name if args.labels else "",
                     "from_scratch": bool(args.from_scratch)}
        path = save_checkpoint(ckpt, root / _ckpt_name(ckpt.stage, tag))
        write_history(ckpt.history, history_path, append=True)
        print(f"{ckpt.stage}: {ckpt.step} steps -> {path}")

    run_curriculum(cfg.curriculum, data, seed=cfg.seed, model_config=cfg.model, params=params,
                   start=start, stop=stop, config_hash=cfg.hash, on_stage_end=on_stage_end,
                   resume=resume, on_checkpoint=on_checkpoint if args.checkpoint_every else None,
                   checkpoint_every=args.checkpoint_every)
    (root / RESUME_FILE).unlink(missing_ok=True)
    return EXIT_OK


def cmd_cluster(args):
    cfg = load_config(args.config)
    root = _root(cfg)
    splits = _load_splits(cfg, root, args.force)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else _default_checkpoint(cfg, root)
    params = _load_ckpt(cfg, ckpt_path, args.force).params
    world = splits[args.split]
    assignment = assign_clusters(params, pl.embed(params, world))
    out = root / f"clusters_{args.split}.csv"
    _guard(out, args.force)
    with open(out, "w", newline="") as fh:
        fh.write(f"# config_hash={cfg.hash}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["example_id", "cluster_id"])
        writer.writerows(enumerate(assignment.cluster_ids.tolist()))
    metrics = pl.evaluate_clusters(params, world)
    report = EvalReport("cluster", metrics, args.split, cfg.seed, checkpoint_hash(ckpt_path),
                        cfg.hash)
    (root / f"clusters_{args.split}.json").write_text(report.to_json())
    print(f"{metrics['n_active']} active clusters, V-measure {metrics['v_measure']:.4f} -> {out}")
    return EXIT_OK


def cmd_annotate_sim(args):
    cfg = load_config(args.config)
    budgets = args.budget or list(cfg.active.budgets)
    if min(budgets) < 1:
        raise ContractError("budget must be >= 1")
    strategy = args.strategy or cfg.active.strategy
    selection = args.selection or cfg.active.selection
    root = _root(cfg)
    splits = _load_splits(cfg, root, args.force)
    world = splits["train"]
    params = assignment = None
    ckpt_hash = ""
    if strategy == "cluster":
        ckpt_path = Path(args.checkpoint) if args.checkpoint else root / _ckpt_name("JOINT")
        ckpt = _load_ckpt(cfg, ckpt_path, args.force)
        if ckpt.stage != "JOINT" and not args.force:
            raise ContractError("cluster labeling needs the clustering-stage checkpoint")
        params, ckpt_hash = ckpt.params, checkpoint_hash(ckpt_path)
        assignment = assign_clusters(params, pl.embed(params, world))
    rows = []
    for b in budgets:
        labels, row = pl.simulate_annotation(params, world, b, strategy, selection, cfg.seed,
                                             assignment=assignment)
        path = root / f"labels_{strategy}_b{b}.csv"
        _guard(path, args.force)
        labels.to_csv(path, config_hash=cfg.hash)
        row["labels_file"] = path.name
        rows.append(row)
        print(f"budget {b}: {row['n_labeled_examples']} labeled examples, precision "
              f"{row['precision']:.3f}, recall {row['recall']:.3f}, coverage {row['coverage']:.3f}")
    doc = {"config_hash": cfg.hash, "checkpoint_hash": ckpt_hash, "seed": cfg.seed,
           "strategy": strategy, "selection": selection if strategy == "cluster" else None,
           "rows": rows}
    (root / f"annotate_{strategy}.json").write_text(canonical_json(doc, indent=2) + "\n")
    _write_rows(rows, root / f"annotate_{strategy}.csv")
    return EXIT_OK


def cmd_evaluate(args):
    cfg = load_config(args.config)
    root = _root(cfg)
    splits = _load_splits(cfg, root, args.force)
    split_name = args.split or cfg.eval.split
    world = splits[split_name]
    if args.suite == "qbe" and args.raw:
        metrics, ckpt_hash = pl.evaluate_raw_qbe(world, cfg.eval, cfg.seed), ""
    else:
        if args.checkpoint:
            ckpt_path = Path(args.checkpoint)
        elif args.suite == "classifier":
            ckpt_path = root / _ckpt_name("CLASS", args.tag or "")
        else:
            ckpt_path = _default_checkpoint(cfg, root)
        ckpt = _load_ckpt(cfg, ckpt_path, args.force)
        ckpt_hash = checkpoint_hash(ckpt_path)
        if args.suite == "qbe":
            metrics = pl.evaluate_qbe(ckpt.params, world, cfg.eval, cfg.seed)
        elif args.suite == "classifier":
            if ckpt.stage != "CLASS":
                raise ContractError("the classifier suite needs a CLASS-stage checkpoint")
            metrics = pl.evaluate_classifier(ckpt.params, world, cfg.eval)
        else:
            metrics = pl.evaluate_clusters(ckpt.params, world)
    if (args.baseline is None) != (args.topline is None):
        raise ContractError("--baseline and --topline go together")
    if args.baseline is not None:
        key = "qbe_map" if args.suite == "qbe" else "map"
        if key not in metrics:
            raise ContractError("recovery is defined for the qbe and classifier suites")
        metrics["recovery"] = recovery(metrics[key], args.baseline, args.topline)
    report = EvalReport(args.suite, metrics, split_name, cfg.seed, ckpt_hash, cfg.hash)
    name = f"eval_{args.suite}{'_' + args.tag if args.tag else ''}{'_raw' if args.raw else ''}"
    path = _write_report(report, root, name, args.force)
    print(report.to_json(), end="")
    logger.info("wrote %s", path)
    return EXIT_OK


def _collect_reports(paths):
    reports = []
    for p in paths:
        p = Path(p)
        files = sorted(p.glob("eval_*.json")) if p.is_dir() else [p]
        for f in files:
            try:
                reports.append((f, EvalReport.from_dict(json.loads(f.read_text()))))
            except (ValueError, TypeError) as exc:
                raise ContractError(f"malformed report {f}: {exc}") from exc
    return reports


def cmd_report(args):
    reports = _collect_reports(args.runs)
    if args.suite:
        reports = [(f, r) for f, r in reports if r.suite == args.suite]
    if not reports:
        raise ContractError("no reports found")
    suites = {r.suite for _, r in reports}
    if len(suites) > 1:
        raise ContractError(f"reports mix suites {sorted(suites)}; pick one with --suite")
    reports.sort(key=lambda fr: (fr[1].config_hash, fr[1].seed, fr[1].checkpoint_hash, str(fr[0])))
    keys = sorted({k for _, r in reports for k in r.metrics})
    header = ["run", "report", "seed", "config"] + keys
    rows = [[f.parent.name or ".", f.stem, str(r.seed), r.config_hash[:12]]
            + [_fmt_metric(r.metrics.get(k)) for k in keys] for f, r in reports]
    if args.format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        text = buf.getvalue()
    else:
        lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        lines += ["| " + " | ".join(r) + " |" for r in rows]
        text = "\n".join(lines) + "\n"
    if args.output:
        _guard(args.output, args.force)
        Path(args.output).write_text(text)
    print(text, end="")
    return EXIT_OK


def _fmt_metric(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


# argument parsing -----------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="cocoon", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("config", help="experiment config (INI)")
        p.add_argument("--force", action="store_true",
                       help="overwrite outputs and skip config-hash checks")
        return p

    p = with_config("gen-data", "generate the synthetic world")
    p.set_defaults(func=cmd_gen_data)

    p = with_config("train", "run curriculum stages")
    p.add_argument("--stage", default="self",
                   help="av, coin, joint, class, 'self' (all but class) or 'all'")
    p.add_argument("--resume", action="store_true", help="continue from the last mid-stage checkpoint")
    p.add_argument("--labels", help="label CSV from annotate-sim (CLASS stage)")
    p.add_argument("--from-scratch", action="store_true",
                   help="CLASS stage starts from fresh weights instead of the previous stage")
    p.add_argument("--tag", help="suffix for checkpoint and history names")
    p.add_argument("--checkpoint-every", type=int, default=0, metavar="N",
                   help="write a resumable checkpoint every N steps")
    p.set_defaults(func=cmd_train)

    p = with_config("cluster", "assign every frame of a split to a cluster")
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="train", choices=("train", "val", "eval"))
    p.set_defaults(func=cmd_cluster)

    p = with_config("annotate-sim", "simulate budgeted annotation on the training split")
    p.add_argument("--budget", type=int, nargs="+")
    p.add_argument("--strategy", choices=("cluster", "random"))
    p.add_argument("--selection", choices=("size", "random"),
                   help="which clusters receive the budget")
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_annotate_sim)

    p = with_config("evaluate", "score a checkpoint")
    p.add_argument("--suite", required=True, choices=SUITES)
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=("train", "val", "eval"))
    p.add_argument("--tag", help="checkpoint/report suffix (as given to train --tag)")
    p.add_argument("--raw", action="store_true", help="qbe on raw audio features")
    p.add_argument("--baseline", type=float)
    p.add_argument("--topline", type=float)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="tabulate evaluation reports from run directories")
    p.add_argument("runs", nargs="+", help="run directories or report JSON files")
    p.add_argument("--suite", choices=SUITES)
    p.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    p.add_argument("--output")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except HashMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (CheckpointError, OverwriteError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (CocoonError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
