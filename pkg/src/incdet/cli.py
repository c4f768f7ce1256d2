"""``incdet`` command line: train, eval, partition, report, demo.

Exit codes: 0 success, 1 usage, 2 configuration, 3 runtime failure. Heavy
modules are imported only after argument parsing so that ``--threads`` can
cap the BLAS pools before numpy loads.
"""

import argparse
import json
import logging
import os
import sys

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("incdet")

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_common(p):
    p.add_argument("--seed", type=int, default=None, help="root seed; overrides the config value")
    p.add_argument("--threads", type=int, default=None, metavar="N",
                   help="cap on BLAS/OpenMP worker threads (takes effect before numpy loads)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser():
    parser = _Parser(prog="incdet", description="Desk-scale incremental detection experiments and "
                                                "leakage-free benchmark partitioning.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("train", help="run an incremental experiment from a JSON config",
                       description="Run every stage of the configured task split and write report.json, "
                                   "report.csv, timing.json and one checkpoint per stage.")
    p.add_argument("--config", help="run configuration (JSON); see --print-schema")
    p.add_argument("--out", help="output directory (default: $INCDET_OUT_DIR, then the config's out_dir, "
                                 "then runs/<name>)")
    p.add_argument("--print-schema", action="store_true", help="print the configuration JSON schema and exit")
    _add_common(p)

    p = sub.add_parser("eval", help="score a checkpoint on a saved dataset",
                       description="Evaluate a stage checkpoint on a dataset written by `demo` (COCO JSON "
                                   "plus its .npz pixel file).")
    p.add_argument("--checkpoint", required=True, help="checkpoint JSON written by train")
    p.add_argument("--dataset", required=True, help="COCO JSON with a sibling <path>.npz pixel file")
    p.add_argument("--classes", help="comma-separated class ids (default: the checkpoint's task classes)")
    p.add_argument("--out", help="write metrics JSON here instead of stdout")
    _add_common(p)

    p = sub.add_parser("partition", help="split COCO annotations into leakage-free stages",
                       description="Build the co-occurrence graph, cluster categories into stages of the "
                                   "given sizes, assign every image to one stage, and write stage_<k>.json "
                                   "manifests plus stats.json.")
    p.add_argument("--annotations", required=True, help="COCO-format annotation JSON")
    p.add_argument("--sizes", required=True, help="categories per stage, e.g. 40,40 or 20,20,20,20")
    p.add_argument("--out", help="output directory (default: $INCDET_OUT_DIR, then partition/)")
    p.add_argument("--restarts", type=int, default=16, help="random restarts of the swap search")
    _add_common(p)

    p = sub.add_parser("report", help="merge run reports into the component ablation table",
                       description="Group report.json files by module toggles and print per-task and "
                                   "all-class mAP (median over seeds).")
    p.add_argument("runs", nargs="+", help="report.json files or directories containing one")
    p.add_argument("--out", help="also write the table to this file")
    p.add_argument("--json", dest="json_out", help="write the merged rows as JSON")
    _add_common(p)

    p = sub.add_parser("demo", help="generate a synthetic dataset and run the default 4+4 experiment",
                       description="Write a synthetic evaluation set and run the full method on the default "
                                   "eight-category 4+4 split.")
    p.add_argument("--out", help="output directory (default: $INCDET_OUT_DIR, then demo/)")
    p.add_argument("--epochs", type=int, default=None, help="epochs for every training phase")
    p.add_argument("--n-train", type=int, default=None, help="training images per stage")
    _add_common(p)
    return parser


# --------------------------------------------------------------- helpers


def _limit_threads(n):
    if n is None:
        return
    if n < 1:
        raise UsageError("--threads must be at least 1")
    for var in _THREAD_VARS:
        os.environ[var] = str(n)


def _write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _parse_ints(text, flag):
    try:
        return [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise UsageError(f"{flag} expects comma-separated integers, got {text!r}") from None


# -------------------------------------------------------------- commands


def run_training(rc, out_dir, seed=None):
    from .synth import SceneSpec, build_task_sequence, expand_split, hue_palette
    from .trainer import run_incremental_experiment, run_joint

    cfg = rc.stage_config(seed)
    universe = list(range(1, rc.n_classes + 1))
    sizes = expand_split(rc.split, rc.n_classes)
    spec = SceneSpec(palette=hue_palette(universe))
    seq = build_task_sequence(universe, sizes, cfg.seed)
    os.makedirs(out_dir, exist_ok=True)
    cache = {}
    report = run_incremental_experiment(seq, cfg, spec=spec, cache=cache, out_dir=out_dir)
    if rc.joint:
        report.joint_map = run_joint(universe, cfg, len(sizes), spec, cache).final_map
    resolved = rc.to_dict()
    resolved["seed"] = cfg.seed
    resolved["out_dir"] = out_dir
    _write_json(resolved, os.path.join(out_dir, "config.json"))
    report.to_json(os.path.join(out_dir, "report.json"), timing=False)
    report.to_csv(os.path.join(out_dir, "report.csv"))
    _write_json({"total": report.wall_time, "stages": [s["wall_time"] for s in report.stages]},
                os.path.join(out_dir, "timing.json"))
    return report


def cmd_train(args):
    from .config import RunConfig, resolve_out_dir, run_config_schema

    if args.print_schema:
        print(json.dumps(run_config_schema(), indent=2, sort_keys=True))
        return EXIT_OK
    if not args.config:
        raise UsageError("train: --config is required (or use --print-schema)")
    if not os.path.exists(args.config):
        raise FileNotFoundError(f"config file not found: {args.config}")
    rc = RunConfig.load(args.config)
    out = resolve_out_dir(args.out, rc.out_dir, os.path.join("runs", rc.name))
    report = run_training(rc, out, args.seed)
    print(f"{rc.name}: final mAP {100 * report.final_map:.1f} -> {out}")
    return EXIT_OK


def cmd_eval(args):
    from .cpr import GENERAL_VOCAB_BASE
    from .detector import DetectorModel, detect_batch
    from .evaluation import evaluate
    from .synth import annotate_for_task, load_dataset, stack_images

    model = DetectorModel.load(args.checkpoint)
    data = load_dataset(args.dataset)
    if args.classes:
        classes = _parse_ints(args.classes, "--classes")
        missing = sorted(set(classes) - set(model.class_ids()))
        if missing:
            raise UsageError(f"checkpoint has no prototypes for classes {missing}")
    else:
        classes = [c for c in model.class_ids() if c < GENERAL_VOCAB_BASE]
    data = [annotate_for_task(d, classes) for d in data]
    preds = detect_batch(model, stack_images(data), model.vocab(classes), 0.05, 0.5)
    res = evaluate(preds, data, classes)
    out = {"checkpoint": args.checkpoint, "dataset": args.dataset, "n_images": len(data), **res.to_dict()}
    text = json.dumps(out, indent=2, sort_keys=True, default=lambda v: None)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return EXIT_OK


def cmd_partition(args):
    from . import loco
    from .config import resolve_out_dir

    sizes = _parse_ints(args.sizes, "--sizes")
    seed = 0 if args.seed is None else args.seed
    out = resolve_out_dir(args.out, None, "partition")
    dataset = loco.load_annotations(args.annotations)
    graph = loco.build_cooccurrence(dataset)
    cats = loco.partition_categories(graph, len(sizes), sizes, seed, restarts=args.restarts)
    part = loco.assign_overlap_images(dataset, cats, seed)
    paths = loco.emit_stage_manifests(part, dataset, out)
    stats = {
        "seed": seed,
        "sizes": sizes,
        "categories": [sorted(c) for c in cats],
        "manifests": [os.path.basename(p) for p in paths],
        "loco": loco.leakage_stats(dataset, part, graph),
        "naive": loco.leakage_stats(dataset, loco.naive_partition(dataset, cats), graph),
    }
    _write_json(stats, os.path.join(out, "stats.json"))
    print(f"{len(paths)} stages -> {out}; naive split averages "
          f"{stats['naive']['avg_stages_per_image']:.3f} stages per image, LoCo 1.000")
    return EXIT_OK


def _load_report(path):
    if os.path.isdir(path):
        path = os.path.join(path, "report.json")
    with open(path) as fh:
        return json.load(fh)


def ablation_rows(reports):
    """Rows of the component table: toggles, per-task and all-class mAP (median over runs)."""
    import numpy as np

    from .trainer import TOGGLE_ROWS

    groups = {}
    for rep in reports:
        cfg = rep["config"]
        key = tuple(bool(cfg.get(f"use_{m}")) for m in ("pseudo", "cpr", "iks", "cakd"))
        groups.setdefault(key, []).append(rep)
    names = {tuple(v[f"use_{m}"] for m in ("pseudo", "cpr", "iks", "cakd")): k for k, v in TOGGLE_ROWS.items()}
    order = list(TOGGLE_ROWS)
    rows = []
    for key, reps in groups.items():
        tasks = reps[0]["tasks"]
        row = {"Model": names.get(key, "custom"), "Pseudo Label": "Y" if key[0] else "",
               "CPR": "Y" if key[1] else "", "IKS": "Y" if key[2] else "", "CAKD": "Y" if key[3] else "",
               "seeds": len(reps)}
        for t, task in enumerate(tasks):
            vals = []
            for rep in reps:
                pc = rep["stages"][-1]["per_class"]
                v = [pc[str(c)] for c in task if pc.get(str(c)) is not None]
                vals.append(float(np.mean(v)) if v else float("nan"))
            row[_task_label(task, t)] = float(np.median(vals))
        row["all"] = float(np.median([rep["stages"][-1]["mAP_all"] for rep in reps]))
        rows.append(row)
    rows.sort(key=lambda r: order.index(r["Model"]) if r["Model"] in order else len(order))
    return rows


def _task_label(task, t):
    task = sorted(task)
    if task == list(range(task[0], task[-1] + 1)):
        return f"{task[0]}-{task[-1]}"
    return f"T{t + 1}"


def cmd_report(args):
    from .evaluation import format_table

    rows = ablation_rows([_load_report(p) for p in args.runs])
    fixed = ["Model", "Pseudo Label", "CPR", "IKS", "CAKD"]
    extra = [k for k in rows[0] if k not in fixed + ["seeds", "all"]] if rows else []
    text = format_table(rows, fixed + extra + ["all", "seeds"])
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    if args.json_out:
        _write_json(rows, args.json_out)
    return EXIT_OK


def cmd_demo(args):
    from .config import RunConfig, resolve_out_dir
    from .synth import SceneSpec, make_stage_dataset, save_dataset

    out = resolve_out_dir(args.out, None, "demo")
    seed = 0 if args.seed is None else args.seed
    training = {}
    if args.epochs is not None:
        training.update(epochs=args.epochs, teacher_epochs=args.epochs, pretrain_epochs=args.epochs)
    if args.n_train is not None:
        training.update(n_train=args.n_train, n_pretrain=args.n_train)
    rc = RunConfig.from_dict({"name": "demo", "split": "4+4", "seed": seed, "training": training,
                              "toggles": {"pseudo": True, "cpr": True, "iks": True, "cakd": True}})
    os.makedirs(out, exist_ok=True)
    spec = SceneSpec()
    data = make_stage_dataset(spec, [], 100, seed, "demo-eval", start_id=2 * 10**6, full_labels=True)
    save_dataset(data, os.path.join(out, "eval.json"), spec)
    report = run_training(rc, os.path.join(out, "run"), seed)
    print(f"demo: final all-class mAP {100 * report.final_map:.1f}; outputs in {out}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "partition": cmd_partition,
            "report": cmd_report, "demo": cmd_demo}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        _limit_threads(args.threads)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    from .config import ConfigValidationError
    from .synth import ConfigError

    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"incdet {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigValidationError, ConfigError) as e:
        print(f"incdet {args.command}: invalid configuration: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"incdet {args.command}: {e}", file=sys.stderr)
        return EXIT_CONFIG if args.command == "train" else EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - surfaced as a runtime failure
        log.debug("failure", exc_info=True)
        print(f"incdet {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
