"""SGD training of the proposal network with per-branch hard example mining."""

import csv
import logging
from dataclasses import dataclass

import numpy as np

from . import anchors as anchor_mod
from .losses import branch_loss_and_grad, cross_entropy, total_loss
from .ohem import mine_branch, random_select
from .rpn import MIN_SIDE

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 4000
    lr: float = 0.01
    lr_drop_at: float = 0.75       # fraction of steps after which lr is divided
    lr_drop_factor: float = 5.0
    momentum: float = 0.9
    weight_decay: float = 0.0005
    ohem: bool = True
    batch_per_branch: int = 256
    alphas: tuple = (1.0, 1.0, 1.0)
    lam: float = 1.0
    force_best: bool = True
    grad_clip: float = 10.0
    seed: int = 0


class SGD:
    """Momentum SGD with L2 weight decay on convolution weights only."""

    def __init__(self, model, momentum=0.9, weight_decay=0.0005):
        self.model = model
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(layer.params[p])
                         for name, layer, p in model.named_params_and_grads()}

    def step(self, lr, clip=None):
        gnorm = np.sqrt(sum(float(np.sum(np.square(layer.grads[p], dtype=np.float64)))
                            for _, layer, p in self.model.named_params_and_grads()))
        scale = 1.0
        if clip is not None and gnorm > clip:
            scale = clip / gnorm
        for name, layer, p in self.model.named_params_and_grads():
            g = layer.grads[p] * scale
            if p == "weight" and layer.params[p].ndim == 4:
                g = g + self.weight_decay * layer.params[p]
            v = self.velocity[name]
            v *= self.momentum
            v -= lr * g
            layer.params[p] += v
        return gnorm


def image_labels(anchor_sets, gts, force_best=True):
    return anchor_mod.label_branches(anchor_sets, gts, force_best=force_best)


def compute_step(model, image, gts, cfg, rng, labels=None):
    """Forward, mine, loss and backward for one image. Gradients are left in the layers.

    Returns ``(total, per_branch_losses, selections)``.
    """
    outs = model.forward(image)
    if labels is None:
        labels = image_labels([o.anchor_set for o in outs], gts, cfg.force_best)
    model.zero_grad()
    dlogits, dregs, losses, selections = [], [], [], []
    for out, lab in zip(outs, labels):
        y = np.where(lab.label == anchor_mod.POSITIVE, 1, 0)
        # tiny grids (e.g. Det-32 on a 160px image) hold fewer anchors than a batch
        batch = max(1, min(cfg.batch_per_branch, int(np.sum(lab.label != anchor_mod.IGNORE))))
        if cfg.ohem:
            per_anchor = cross_entropy(out.probs, y)
            shape = (out.anchor_set.feat_h, out.anchor_set.feat_w, out.anchor_set.num_scales)
            sel = mine_branch(per_anchor, lab.label, shape, batch, forced=lab.forced)
        else:
            sel = random_select(lab.label, batch, rng)
        loss, dl, dr = branch_loss_and_grad(out.logits, y, out.reg, lab.reg_target, sel, cfg.lam)
        losses.append(loss)
        selections.append(sel)
        dlogits.append(dl)
        dregs.append(dr)
    for i, a in enumerate(cfg.alphas):
        dlogits[i] = dlogits[i] * a
        dregs[i] = dregs[i] * a
    model.backward(dlogits, dregs)
    return total_loss(losses, cfg.alphas), losses, selections


def train_step(model, image, gts, opt, cfg, lr, rng, labels=None):
    total, losses, _ = compute_step(model, image, gts, cfg, rng, labels)
    if not np.isfinite(total):
        raise FloatingPointError(f"training diverged: loss={total}, branch losses={losses}, lr={lr}")
    opt.step(lr, cfg.grad_clip)
    return total, losses


def lr_at(step, cfg):
    return cfg.lr if step < cfg.lr_drop_at * cfg.steps else cfg.lr / cfg.lr_drop_factor


def train(model, samples, cfg, log_path=None, progress=None):
    """Train on a list of :class:`~mprcnn.synth.Sample`, one image per step,
    reshuffled every epoch. Returns the per-step loss history."""
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(model, cfg.momentum, cfg.weight_decay)
    label_cache = {}
    history = []
    writer = None
    fh = None
    if log_path:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss_det4", "loss_det16", "loss_det32", "total"])
    try:
        order = []
        for step in range(cfg.steps):
            if not order:
                order = list(rng.permutation(len(samples)))
            s = samples[order.pop()]
            if min(s.image.shape) < MIN_SIDE:
                raise ValueError(f"{s.image_id}: image smaller than {MIN_SIDE}px")
            labels = label_cache.get(s.image_id)
            if labels is None:
                sets = [anchor_mod.generate(b, *_grid(s.image.shape, b.stride)) for b in anchor_mod.BRANCHES]
                labels = label_cache[s.image_id] = image_labels(sets, s.boxes, cfg.force_best)
            lr = lr_at(step, cfg)
            total, losses = train_step(model, s.image, s.boxes, opt, cfg, lr, rng, labels)
            history.append(total)
            if writer:
                writer.writerow([step] + [f"{v:.6f}" for v in losses] + [f"{total:.6f}"])
            if progress and (step + 1) % progress == 0:
                log.info("step %d lr %.4g loss %.4f (recent mean %.4f)", step + 1, lr, total,
                         float(np.mean(history[-progress:])))
    finally:
        if fh:
            fh.close()
    return history


def _grid(shape, stride):
    h, w = shape
    hp, wp = -(-h // MIN_SIDE) * MIN_SIDE, -(-w // MIN_SIDE) * MIN_SIDE
    return hp // stride, wp // stride
