"""Command-line interface: one executable, one subcommand per pipeline stage.

Every command takes `--seed`, logs `key=value` lines on stderr, prints a
single final status line on stdout, and exits 0/1. All hand-offs between
stages are files: dataset directories, checkpoints, CSV reports.
"""

import argparse
import os
import sys
from dataclasses import replace

from . import __version__, detector, evaluation, numerics as nm, pipeline, scoring, synthdata
from .config import ConfigError, RunConfig, load_grid
from .synthdata import derive_seed


def _log(msg):
    print(msg, file=sys.stderr)


def _load_config(path):
    return RunConfig.load(path) if path else RunConfig()


def cmd_gen_data(args):
    cfg = _load_config(args.config)
    spec = cfg.scene_spec()
    total_gold = cfg.get("data.gold_size") * spec.num_classes
    sizes = {
        "gold": total_gold,
        "unlabeled": int(round(total_gold * cfg.get("data.unlabeled_factor"))),
        "test": cfg.get("data.test_size"),
    }
    gold, unlabeled, test = synthdata.generate_splits(
        spec, sizes, derive_seed(args.seed, "data"))
    for ds, name in ((gold, "gold"), (unlabeled, "unlabeled"), (test, "test")):
        synthdata.write_dataset(ds, os.path.join(args.out, name))
        _log(f"split={name} images={len(ds.items)}")
    return f"wrote {sum(sizes.values())} images under {args.out}"


def cmd_train_teacher(args):
    cfg = _load_config(args.config)
    gold = synthdata.read_dataset(args.data)
    det_cfg = cfg.detector_config()
    train_cfg = cfg.train_config("teacher", seed=derive_seed(args.seed, "teacher"))
    params, history = pipeline.train_teacher(gold, det_cfg, train_cfg)
    nm.save_checkpoint(params, args.out)
    detector.write_loss_history(history, args.out + ".loss.csv")
    _log(f"epochs={len(history)} final_loss={history[-1]['total']:.6f}")
    return f"teacher checkpoint written to {args.out}"


def cmd_pseudolabel(args):
    cfg = _load_config(args.config)
    det_cfg = cfg.detector_config()
    teacher = nm.load_checkpoint(args.teacher)
    unlabeled = synthdata.read_dataset(args.unlabeled)
    silver, counters = pipeline.generate_silver(teacher, unlabeled, det_cfg)
    if not silver.items:
        _log("warning=empty_silver_set")
    _log(f"silver_images={len(silver.items)} blank={counters['blank']} "
         f"capped={counters['capped']}")
    synthdata.write_dataset(silver, args.out)
    return f"silver dataset ({len(silver.items)} images) written to {args.out}"


def cmd_train_classifiers(args):
    cfg = _load_config(args.config)
    gold = synthdata.read_dataset(args.gold)
    clf_cfg = cfg.classifier_config(seed=derive_seed(args.seed, "classifiers"))
    ensemble = scoring.train_classifiers(gold, clf_cfg.crop_size, clf_cfg)
    scoring.save_ensemble(ensemble, args.out)
    for k, acc in enumerate(ensemble.holdout_accuracy):
        _log(f"classifier={k} holdout_accuracy={acc:.4f}")
    return f"classifier ensemble written to {args.out}"


def cmd_score(args):
    silver = synthdata.read_dataset(args.silver)
    ensemble = None
    if args.classifiers:
        ensemble = scoring.load_ensemble(args.classifiers)
    elif args.combiner != "const1":
        raise ValueError(f"--classifiers is required for combiner '{args.combiner}'")

    audit = ["image,box_index,class,s0,s1,s2,s3,det_conf,alpha,combiner"]
    items = []
    for item in silver.items:
        anns = []
        for k, sa in enumerate(item.annotations):
            if ensemble is not None:
                s = scoring.classifier_scores(ensemble, item.image, sa.annotation)
                s_cols = ",".join(f"{v:.6f}" for v in s)
            else:
                s, s_cols = [], ",,,"
            alpha = scoring.combine(s, sa.detector_confidence, args.combiner) \
                if s else 1.0
            anns.append(synthdata.ScoredAnnotation(
                sa.annotation, alpha, sa.detector_confidence))
            audit.append(f"{item.stem},{k},{sa.annotation.class_id},{s_cols},"
                         f"{sa.detector_confidence:.6f},{alpha:.6f},{args.combiner}")
        items.append(synthdata.DatasetItem(item.stem, item.image, anns))
    scored = synthdata.Dataset(role=synthdata.ROLE_SILVER, items=items,
                               class_names=silver.class_names, seed=silver.seed)
    synthdata.write_dataset(scored, args.out)
    with open(os.path.join(args.out, "scores.csv"), "w") as f:
        f.write("\n".join(audit) + "\n")
    _log(f"scored_boxes={len(audit) - 1} mean_alpha={pipeline.mean_silver_alpha(scored):.4f}")
    return f"scored silver dataset written to {args.out}"


def cmd_train_student(args):
    cfg = _load_config(args.config)
    det_cfg = cfg.detector_config()
    silver = synthdata.read_dataset(args.silver)
    teacher = nm.load_checkpoint(args.teacher) if args.teacher else None
    train_cfg = cfg.train_config("student", seed=derive_seed(args.seed, "student"),
                                 alpha_weighting="on")
    params, history = pipeline.train_student(silver, args.init, teacher,
                                             det_cfg, train_cfg)
    nm.save_checkpoint(params, args.out)
    detector.write_loss_history(history, args.out + ".loss.csv")
    if history:
        _log(f"epochs={len(history)} final_loss={history[-1]['total']:.6f}")
    return f"student checkpoint written to {args.out}"


def cmd_eval(args):
    cfg = _load_config(args.config)
    det_cfg = cfg.detector_config()
    params = nm.load_checkpoint(args.model)
    test = synthdata.read_dataset(args.test)
    report = evaluation.evaluate(params, test, det_cfg, iou_threshold=args.iou)
    report.write_csv(args.out)
    _log(f"mAP={report.map:.6f}")
    return f"evaluation report written to {args.out} (mAP={report.map:.4f})"


def cmd_sweep(args):
    cfg = _load_config(args.config)
    grid = load_grid(args.grid)
    pcfg = pipeline.PipelineConfig(
        detector=cfg.detector_config(),
        teacher=cfg.train_config("teacher"),
        student=cfg.train_config("student", alpha_weighting="on"),
        classifier=cfg.classifier_config(),
        seed=args.seed,
    )
    grid = replace(grid, seeds=[derive_seed(args.seed, "sweep", s) for s in grid.seeds])
    os.makedirs(args.out, exist_ok=True)
    out_csv = os.path.join(args.out, "results.csv")
    pipeline.run_experiment(grid, pcfg, spec=cfg.scene_spec(), out_path=out_csv,
                            log=_log, jobs=args.jobs, audit=args.audit)
    with open(os.path.join(args.out, "run_manifest.txt"), "w") as f:
        f.write(cfg.serialize())
        f.write(f"sweep.seed = {args.seed}\n")
    return f"sweep results written to {out_csv}"


def build_parser():
    p = argparse.ArgumentParser(
        prog="silverdet",
        description="Semi-supervised object detection with classifier feedback")
    p.add_argument("--version", action="version", version=f"silverdet {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        sp = sub.add_parser(name, **kw)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--config", default=None, help="run config file")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, help="render gold/unlabeled/test splits")
    sp.add_argument("--out", required=True)

    sp = add("train-teacher", cmd_train_teacher, help="phase-1 detector on gold")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)

    sp = add("pseudolabel", cmd_pseudolabel, help="teacher labels the unlabeled pool")
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--unlabeled", required=True)
    sp.add_argument("--out", required=True)

    sp = add("train-classifiers", cmd_train_classifiers, help="score ensemble on gold crops")
    sp.add_argument("--gold", required=True)
    sp.add_argument("--out", required=True)

    sp = add("score", cmd_score, help="attach confidence metric to silver boxes")
    sp.add_argument("--silver", required=True)
    sp.add_argument("--classifiers", default=None)
    sp.add_argument("--combiner", default="max", choices=scoring.COMBINERS)
    sp.add_argument("--out", required=True)

    sp = add("train-student", cmd_train_student, help="phase-2 detector on scored silver")
    sp.add_argument("--silver", required=True)
    sp.add_argument("--init", required=True, choices=pipeline.INIT_MODES)
    sp.add_argument("--teacher", default=None)
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, help="per-class AP and mAP on a test split")
    sp.add_argument("--model", required=True)
    sp.add_argument("--test", required=True)
    sp.add_argument("--iou", type=float, default=0.5)
    sp.add_argument("--out", required=True)

    sp = add("sweep", cmd_sweep, help="experiment grid harness")
    sp.add_argument("--grid", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--audit", action="store_true",
                    help="add hidden-truth analysis columns to the results")

    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        status = args.fn(args)
    except (ConfigError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(status)
    return 0


if __name__ == "__main__":
    sys.exit(main())
