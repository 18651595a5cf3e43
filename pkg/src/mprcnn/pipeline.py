"""End-to-end runs: data, proposal-network training, boosted-forest rescoring, reports, ablations."""

import json
import logging
import os
import platform
import time

import numpy as np

from . import __version__
from . import evaluation as ev
from . import forest as fo
from .boxes import as_boxes
from .checkpoint import save_params
from .config import config_hash, dumps
from .features import extract, part_columns
from .rpn import MPRPN, NetConfig, ProposalConfig, propose
from .synth import SceneSpec, generate, resize_shorter_edge
from .train import TrainConfig, train

log = logging.getLogger(__name__)

BF_VARIANTS = ("face", "context", "both")
NEG_PER_IMAGE = 32   # highest-scoring negative proposals kept per training image for the forest


# -- config adapters ------------------------------------------------------------------

def net_config(cfg):
    return NetConfig(trunk_widths=tuple(cfg.trunk_widths), det_channels=cfg.det_channels,
                     atrous=cfg.atrous, seed=cfg.seed)


def train_config(cfg):
    return TrainConfig(steps=cfg.steps, lr=cfg.lr, lr_drop_at=cfg.lr_drop_at,
                       lr_drop_factor=cfg.lr_drop_factor, momentum=cfg.momentum,
                       weight_decay=cfg.weight_decay, ohem=cfg.ohem, batch_per_branch=cfg.ohem_batch,
                       alphas=tuple(cfg.alphas), lam=cfg.lam, grad_clip=cfg.grad_clip, seed=cfg.seed)


def proposal_config(cfg):
    return ProposalConfig(nms_branch=cfg.nms_branch, top_k=tuple(cfg.top_k), nms_merge=cfg.nms_merge)


def forest_config(cfg):
    return fo.ForestConfig(divisor=cfg.bf_divisor, max_depth=cfg.bf_depth, n_bins=cfg.bf_bins,
                           mine_per_stage=max(1, cfg.bf_mine // cfg.bf_divisor),
                           init_from_rpn=cfg.bf_init_from_rpn, shrinkage=cfg.bf_shrinkage)


def make_data(cfg):
    spec = SceneSpec(seed=cfg.seed, image_size=cfg.image_size)
    return generate(spec, cfg.n_train, "train"), generate(spec, cfg.n_val, "val")


def resized(samples, n):
    """Rescale loaded samples so the shorter edge is ``n`` (no-op for generated data)."""
    out = []
    for s in samples:
        img, boxes = resize_shorter_edge(s.image, s.boxes, n)
        out.append(type(s)(s.image_id, img, boxes))
    return out


def gts_by_image(samples):
    return {s.image_id: as_boxes(s.boxes) for s in samples}


# -- stage 1 ------------------------------------------------------------------------------

def train_rpn(cfg, samples, log_path=None, progress=None):
    model = MPRPN(net_config(cfg))
    train(model, samples, train_config(cfg), log_path, progress)
    return model


def proposals(model, samples, cfg):
    pcfg = proposal_config(cfg)
    return {s.image_id: propose(model, s.image, pcfg) for s in samples}


# -- stage 2 ------------------------------------------------------------------------------

def proposal_features(model, image, boxes, atrous=True):
    h, w = np.asarray(image).shape
    return extract(boxes, model.feature_maps(image, atrous=atrous), w, h)


def feature_columns(model, parts):
    ca, cb = model.cfg.trunk_widths[0], model.cfg.trunk_widths[1]
    return part_columns(parts, ca, cb)


def bf_dataset(model, samples, cfg, props=None):
    """Features, rpn scores and labels of training proposals.

    A proposal is positive when it is a true positive under the evaluation's greedy
    one-to-one matching, so there is at most one positive per gt. A second proposal
    on an already matched gt is a double detection and is labelled negative.
    Every positive is kept; negatives are capped per image at the highest-scoring ones.
    """
    props = props or proposals(model, samples, cfg)
    xs, ss, ys = [], [], []
    for s in samples:
        boxes, scores, _ = props[s.image_id]
        if len(boxes) == 0:
            continue
        order, tp, _ = ev.match(boxes, scores, s.boxes)
        pos = np.zeros(len(boxes), dtype=bool)
        pos[order[tp]] = True
        neg = np.flatnonzero(~pos)[:NEG_PER_IMAGE]   # proposals arrive sorted by score
        idx = np.sort(np.concatenate([np.flatnonzero(pos), neg]))
        feats, kept = proposal_features(model, s.image, boxes[idx], cfg.atrous)
        xs.append(feats)
        ss.append(scores[idx][kept])
        ys.append(pos[idx][kept].astype(np.int64))
    return np.concatenate(xs), np.concatenate(ss), np.concatenate(ys)


def fit_bf(X, s, y, cfg, cols=None):
    """Cascade training: all positives plus a seeded random draw of negatives to start,
    the remaining negatives form the mining pool."""
    if cols is not None:
        X = X[:, cols]
    rng = np.random.default_rng([cfg.seed, 7])
    neg = np.flatnonzero(y == 0)
    pos = np.flatnonzero(y == 1)
    start = np.sort(rng.permutation(neg)[:cfg.bf_init_neg])
    pool = np.setdiff1d(neg, start)
    return fo.train_forest(X[pos], s[pos], X[start], s[start], X[pool], s[pool], forest_config(cfg))


def detect(model, image, forest=None, cfg=None, parts="both", props=None):
    """Proposals, optionally rescored by the forest and re-ranked.

    Returns ``(boxes, scores, branch_ids)`` in descending score order.
    """
    pcfg = proposal_config(cfg) if cfg is not None else ProposalConfig()
    boxes, scores, ids = props if props is not None else propose(model, image, pcfg)
    if forest is None or len(boxes) == 0:
        return boxes, scores, ids
    atrous = cfg.atrous if cfg is not None else True
    feats, kept = proposal_features(model, image, boxes, atrous)
    boxes, scores, ids = boxes[kept], scores[kept], ids[kept]
    prob = fo.probability(fo.score(forest, feats[:, feature_columns(model, parts)], scores))
    order = np.argsort(-prob, kind="stable")
    return boxes[order], prob[order], ids[order]


def to_detections(image_id, boxes, scores, ids):
    return [ev.Detection(image_id, tuple(float(v) for v in b), float(sc), int(i))
            for b, sc, i in zip(boxes, scores, ids)]


def detections_for(model, samples, cfg, forest=None, parts="both", props=None):
    dets = []
    for s in samples:
        p = props.get(s.image_id) if props else None
        dets.extend(to_detections(s.image_id, *detect(model, s.image, forest, cfg, parts, p)))
    return dets


# -- run directories -----------------------------------------------------------------------

def write_manifest(out_dir, cfg, extra=None):
    """Config hash, seed and library versions; deliberately no timestamps."""
    import numba
    import scipy
    info = {"config_hash": config_hash(cfg), "seed": cfg.seed, "package": __version__,
            "python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__}
    info.update(extra or {})
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(info, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(out_dir, "config.txt"), "w") as f:
        f.write(dumps(cfg))


def write_ap_table(path, rows):
    with open(path, "w") as f:
        f.write("method,ap\n")
        for name, ap in rows:
            f.write(f"{name},{ev.fmt(ap)}\n")


def evaluate_rpn(model, val, cfg, out_dir=None, props=None):
    """Report for the rpn alone plus the per-branch recall table."""
    props = props or proposals(model, val, cfg)
    dets = detections_for(model, val, cfg, props=props)
    gts = gts_by_image(val)
    report = ev.evaluate(dets, gts, score_thr=cfg.recall_score_thr)
    table = ev.branch_recall_table(dets, gts, score_thr=cfg.recall_score_thr)
    if out_dir:
        ev.write_detections(os.path.join(out_dir, "detections_rpn.txt"), dets)
        ev.write_report(os.path.join(out_dir, "report_rpn.csv"), report)
        ev.write_recall_table(os.path.join(out_dir, "branch_recall.csv"), table)
    return report, table, dets


def run_pipeline(cfg, out_dir, model=None, data=None, progress=None):
    """Train (unless ``model`` is given) and evaluate the rpn, then the three forest variants.

    Writes every artifact under ``out_dir`` and returns a summary dict.
    """
    os.makedirs(out_dir, exist_ok=True)
    train_set, val = data or make_data(cfg)
    if model is None:
        model = train_rpn(cfg, train_set, os.path.join(out_dir, "train_log.csv"), progress)
    save_params(os.path.join(out_dir, "rpn.ckpt"), model.state_dict())
    val_props = proposals(model, val, cfg)
    rpn_report, table, _ = evaluate_rpn(model, val, cfg, out_dir, val_props)
    X, s, y = bf_dataset(model, train_set, cfg)
    log.info("forest data: %d rows (%d positive), %d features", len(y), int(y.sum()), X.shape[1])
    gts = gts_by_image(val)
    summary = {"rpn": rpn_report, "branch_recall": table, "bf": {}, "forests": {}}
    curves = [("MP-RPN", rpn_report.pr_points, rpn_report.ap)]
    ap_rows = [("MP-RPN", rpn_report.ap)]
    for parts in BF_VARIANTS:
        forest = fit_bf(X, s, y, cfg, feature_columns(model, parts))
        fo.save_forest(os.path.join(out_dir, f"bf_{parts}.mpbf"), forest)
        dets = detections_for(model, val, cfg, forest, parts, val_props)
        report = ev.evaluate(dets, gts, score_thr=cfg.recall_score_thr)
        ev.write_detections(os.path.join(out_dir, f"detections_bf_{parts}.txt"), dets)
        ev.write_report(os.path.join(out_dir, f"report_bf_{parts}.csv"), report)
        summary["bf"][parts] = report
        summary["forests"][parts] = forest
        label = f"MP-RPN + BF({parts.replace('both', 'face+context')})"
        curves.append((label, report.pr_points, report.ap))
        ap_rows.append((label, report.ap))
    write_ap_table(os.path.join(out_dir, "bf_ap.csv"), ap_rows)
    ev.pr_svg(os.path.join(out_dir, "pr.svg"), curves)
    write_manifest(out_dir, cfg, {"forest_rows": int(len(y)), "forest_positives": int(y.sum())})
    summary["model"] = model
    return summary


def ablate(cfg, out_dir, grid=("atrous", "ohem"), data=None, progress=None, timings=None):
    """Train one rpn per on/off combination of the ``grid`` options.

    Writes ``ablation.csv`` (option flags, recall per height bin and overall)
    and ``ablation_ap.csv``; returns {flags tuple: (model, report)}. Wall-clock
    seconds per run go into ``timings`` when a dict is passed.
    """
    from dataclasses import replace

    for g in grid:
        if g not in ("atrous", "ohem"):
            raise ValueError(f"unknown ablation option {g!r}")
    os.makedirs(out_dir, exist_ok=True)
    train_set, val = data or make_data(cfg)
    gts = gts_by_image(val)
    results, rows = {}, []
    combos = [()]
    for _ in grid:
        combos = [c + (v,) for c in combos for v in (False, True)]
    for flags in combos:
        run_cfg = replace(cfg, **dict(zip(grid, flags)))
        name = "_".join(f"{g}{int(v)}" for g, v in zip(grid, flags))
        run_dir = os.path.join(out_dir, name)
        os.makedirs(run_dir, exist_ok=True)
        log.info("ablation run %s", name)
        start = time.perf_counter()
        model = train_rpn(run_cfg, train_set, os.path.join(run_dir, "train_log.csv"), progress)
        save_params(os.path.join(run_dir, "rpn.ckpt"), model.state_dict())
        report, _, _ = evaluate_rpn(model, val, run_cfg, run_dir)
        write_manifest(run_dir, run_cfg)
        results[flags] = (model, report)
        if timings is not None:
            timings[flags] = time.perf_counter() - start
        rows.append((tuple("yes" if v else "no" for v in flags), report.recall_by_bin))
    ev.write_recall_table(os.path.join(out_dir, "ablation.csv"), rows, first_cols=grid)
    with open(os.path.join(out_dir, "ablation_ap.csv"), "w") as f:
        f.write(",".join(grid) + ",ap\n")
        for flags in combos:
            f.write(",".join("yes" if v else "no" for v in flags) + f",{ev.fmt(results[flags][1].ap)}\n")
    write_manifest(out_dir, cfg, {"grid": list(grid)})
    return results
