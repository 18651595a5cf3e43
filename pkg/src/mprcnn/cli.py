"""Command-line entry point: ``mprcnn <command> [flags]``.

Exit codes: 0 success, 1 other failure, 2 unknown flag or bad usage,
3 missing file, 4 schema mismatch. Failures print one JSON line on stderr.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import evaluation as ev
from . import forest as fo
from . import pipeline as pl
from .anchors import BRANCHES
from .checkpoint import CheckpointError, load_params, save_params
from .config import FIELD_INFO, FIELDS, ConfigError, load_config, render
from .features import feature_length, part_columns, read_feature_dump, write_feature_dump
from .layers import ShapeError
from .rpn import MPRPN, NetConfig
from .synth import AnnotationError, SceneSpec, generate, load_dataset, save_dataset

EXIT_OTHER, EXIT_USAGE, EXIT_MISSING, EXIT_SCHEMA = 1, 2, 3, 4
SCHEMA_ERRORS = (AnnotationError, ev.DetectionsFormatError, ConfigError, CheckpointError,
                 fo.ForestError, ShapeError)


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fail(kind, code, message):
    sys.stderr.write(json.dumps({"error": kind, "code": code, "message": str(message)}) + "\n")
    return code


def _add_config_flags(p):
    g = p.add_argument_group("run configuration (flags override --config)")
    g.add_argument("--config", help="key = value config file [default: none] (decision)")
    for name, default, _, prov, help_ in FIELDS:
        g.add_argument("--" + name.replace("_", "-"), dest=name, default=None, metavar="V",
                       help=f"{help_} [default: {render(default)}] ({prov})")


def _cfg(args):
    return load_config(args.config, {k: getattr(args, k) for k in FIELD_INFO})


def _need(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return path


# -- model files ---------------------------------------------------------------------

def save_model(path, model):
    save_params(path, model.state_dict())
    c = model.cfg
    with open(path + ".json", "w") as f:
        json.dump({"trunk_widths": list(c.trunk_widths), "det_channels": c.det_channels,
                   "path_channels": c.path_channels, "atrous": c.atrous}, f, sort_keys=True)
        f.write("\n")


def load_model(path, cfg):
    """Checkpoint plus its architecture sidecar (falls back to the run config)."""
    params = load_params(_need(path))
    net = pl.net_config(cfg)
    side = path + ".json"
    if os.path.exists(side):
        with open(side) as f:
            meta = json.load(f)
        try:
            net = NetConfig(trunk_widths=tuple(meta["trunk_widths"]), det_channels=meta["det_channels"],
                            path_channels=meta["path_channels"], atrous=meta["atrous"])
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"{side}: bad architecture sidecar ({exc})") from None
    model = MPRPN(net)
    model.load_state_dict(params)
    return model


def _samples(data_dir, split, cfg):
    _need(os.path.join(data_dir, f"{split}.txt"))
    return pl.resized(load_dataset(data_dir, split), cfg.image_size)


# -- commands --------------------------------------------------------------------------

def cmd_gen_data(args, cfg):
    spec = SceneSpec(seed=cfg.seed, image_size=cfg.image_size)
    if args.scene:
        with open(_need(args.scene)) as f:
            spec = SceneSpec.loads(f.read())
    for split, n in (("train", cfg.n_train), ("val", cfg.n_val)):
        save_dataset(args.out, generate(spec, n, split), split)
    with open(os.path.join(args.out, "scene.cfg"), "w") as f:
        f.write(spec.dumps())
    return {"out": args.out, "train": cfg.n_train, "val": cfg.n_val}


def cmd_train_rpn(args, cfg):
    samples = _samples(args.data, "train", cfg)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    model = pl.train_rpn(cfg, samples, args.log, progress=args.progress)
    save_model(args.out, model)
    return {"model": args.out, "steps": cfg.steps}


def cmd_propose(args, cfg):
    samples = _samples(args.data, args.split, cfg)
    model = load_model(args.model, cfg)
    dets = pl.detections_for(model, samples, cfg)
    ev.write_detections(args.out, dets)
    counts = {b.name: sum(d.branch == i for d in dets) for i, b in enumerate(BRANCHES)}
    return {"detections": len(dets), "per_branch": counts}


def cmd_extract_features(args, cfg):
    samples = _samples(args.data, args.split, cfg)
    model = load_model(args.model, cfg)
    X, s, y = pl.bf_dataset(model, samples, cfg)
    write_feature_dump(args.out, X, s, y)
    return {"rows": int(len(y)), "positives": int(y.sum()), "features": int(X.shape[1])}


def cmd_train_bf(args, cfg):
    _need(args.features + ".hdr")
    X, s, y = read_feature_dump(_need(args.features))
    ca, cb = cfg.trunk_widths[0], cfg.trunk_widths[1]
    if X.shape[1] != feature_length(ca, cb):
        raise ShapeError(f"feature dump has {X.shape[1]} columns; trunk widths {ca},{cb} imply "
                         f"{feature_length(ca, cb)}")
    cols = part_columns(args.parts, ca, cb)
    forest = pl.fit_bf(X, s, y, cfg, cols)
    fo.save_forest(args.out, forest)
    return {"forest": args.out, "trees": len(forest.trees), "features": int(len(cols))}


def cmd_detect(args, cfg):
    samples = _samples(args.data, args.split, cfg)
    model = load_model(args.model, cfg)
    forest = fo.load_forest(_need(args.forest)) if args.forest else None
    dets = pl.detections_for(model, samples, cfg, forest, args.parts)
    ev.write_detections(args.out, dets)
    return {"detections": len(dets)}


def cmd_evaluate(args, cfg):
    gts = pl.gts_by_image(_samples(args.data, args.split, cfg))
    dets = ev.read_detections(_need(args.detections))
    report = ev.evaluate(dets, gts, score_thr=cfg.recall_score_thr)
    ev.write_report(args.out, report)
    if args.svg:
        ev.pr_svg(args.svg, [(os.path.basename(args.detections), report.pr_points, report.ap)])
    if args.branch_table:
        ev.write_recall_table(args.branch_table, ev.branch_recall_table(dets, gts, score_thr=cfg.recall_score_thr))
    return {"ap": round(report.ap, 6), "recall": {k: v for k, v in report.recall_by_bin.items()}}


def cmd_ablate(args, cfg):
    grid = tuple(g.strip() for g in args.grid.split(",") if g.strip())
    data = None
    if args.data:
        data = (_samples(args.data, "train", cfg), _samples(args.data, "val", cfg))
    results = pl.ablate(cfg, args.out, grid, data, progress=args.progress)
    return {"table": os.path.join(args.out, "ablation.csv"),
            "ap": {"_".join(str(int(v)) for v in k): round(r.ap, 6) for k, (_, r) in results.items()}}


def cmd_run(args, cfg):
    data = None
    if args.data:
        data = (_samples(args.data, "train", cfg), _samples(args.data, "val", cfg))
    s = pl.run_pipeline(cfg, args.out, data=data, progress=args.progress)
    return {"rpn_ap": round(s["rpn"].ap, 6), "bf_ap": {k: round(r.ap, 6) for k, r in s["bf"].items()}}


def build_parser():
    p = Parser(prog="mprcnn", description="Multi-path proposal network + boosted forest, desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr [default: off]")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    def command(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(fn=fn)
        _add_config_flags(sp)
        return sp

    sp = command("gen-data", cmd_gen_data, "write synthetic train/val splits (PGM + annotation lists)")
    sp.add_argument("--out", required=True, help="output dataset directory [required]")
    sp.add_argument("--scene", help="SceneSpec key=value file [default: derived from seed/size] (decision)")

    sp = command("train-rpn", cmd_train_rpn, "train the proposal network on a dataset's train split")
    sp.add_argument("--data", required=True, help="dataset directory [required]")
    sp.add_argument("--out", required=True, help="checkpoint path [required]")
    sp.add_argument("--log", help="training-loss CSV path [default: none]")
    sp.add_argument("--progress", type=int, default=None, help="log every N steps [default: off]")

    for name, fn, help_ in (("propose", cmd_propose, "write rpn proposals as a detections file"),
                            ("extract-features", cmd_extract_features,
                             "dump labelled region features of training proposals")):
        sp = command(name, fn, help_)
        sp.add_argument("--data", required=True, help="dataset directory [required]")
        sp.add_argument("--split", default="train" if name == "extract-features" else "val",
                        help=f"dataset split [default: {'train' if name == 'extract-features' else 'val'}]")
        sp.add_argument("--model", required=True, help="rpn checkpoint [required]")
        sp.add_argument("--out", required=True, help="output path [required]")

    sp = command("train-bf", cmd_train_bf, "train the cascaded boosted forest from a feature dump")
    sp.add_argument("--features", required=True, help="feature dump path [required]")
    sp.add_argument("--parts", choices=("face", "context", "both"), default="both",
                    help="feature parts [default: both] (decision)")
    sp.add_argument("--out", required=True, help="forest model path [required]")

    sp = command("detect", cmd_detect, "proposals optionally rescored by a forest")
    sp.add_argument("--data", required=True, help="dataset directory [required]")
    sp.add_argument("--split", default="val", help="dataset split [default: val]")
    sp.add_argument("--model", required=True, help="rpn checkpoint [required]")
    sp.add_argument("--forest", help="forest model [default: none, rpn scores only]")
    sp.add_argument("--parts", choices=("face", "context", "both"), default="both",
                    help="feature parts the forest was trained on [default: both] (decision)")
    sp.add_argument("--out", required=True, help="detections file [required]")

    sp = command("evaluate", cmd_evaluate, "AP, PR points and recall by height for a detections file")
    sp.add_argument("--data", required=True, help="dataset directory [required]")
    sp.add_argument("--split", default="val", help="dataset split [default: val]")
    sp.add_argument("--detections", required=True, help="detections file [required]")
    sp.add_argument("--out", required=True, help="report CSV [required]")
    sp.add_argument("--svg", help="PR plot path [default: none]")
    sp.add_argument("--branch-table", help="per-branch recall CSV [default: none]")

    sp = command("ablate", cmd_ablate, "train one rpn per on/off combination and tabulate recall")
    sp.add_argument("--grid", default="atrous,ohem", help="options to toggle [default: atrous,ohem] (paper)")
    sp.add_argument("--data", help="dataset directory [default: generate from seed]")
    sp.add_argument("--out", required=True, help="run directory [required]")
    sp.add_argument("--progress", type=int, default=None, help="log every N steps [default: off]")

    sp = command("run", cmd_run, "full pipeline: rpn, three forest variants, reports")
    sp.add_argument("--data", help="dataset directory [default: generate from seed]")
    sp.add_argument("--out", required=True, help="run directory [required]")
    sp.add_argument("--progress", type=int, default=None, help="log every N steps [default: off]")
    for parser in [p, *sub.choices.values()]:
        _tag_provenance(parser)
    return p


def _tag_provenance(parser):
    # flags without an explicit tag are implementation choices
    for action in parser._actions:
        if action.help and not action.help.endswith(("(paper)", "(decision)")):
            if "[" not in action.help:
                action.help += " [default: off]" if action.option_strings == ["-h", "--help"] else ""
            action.help += " (decision)"


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _cfg(args)
        result = args.fn(args, cfg)
    except FileNotFoundError as exc:
        return _fail("missing_file", EXIT_MISSING, exc.filename or exc)
    except SCHEMA_ERRORS as exc:
        return _fail("schema_mismatch", EXIT_SCHEMA, exc)
    except Exception as exc:   # noqa: BLE001 - every failure maps to one line and a code
        return _fail(type(exc).__name__, EXIT_OTHER, exc)
    print(json.dumps({"command": args.command, **result}, sort_keys=True, default=_jsonable))
    return 0


def _jsonable(v):
    if isinstance(v, (np.integer, np.floating)):
        return v.item()
    raise TypeError(type(v))


if __name__ == "__main__":
    sys.exit(main())
