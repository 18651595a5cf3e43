"""Three-branch region proposal network over a small convolutional trunk.

Trunk taps sit at strides 4, 8, 16 and 32. Det-4 fuses the stride-4 tap with
the upsampled stride-8 tap; Det-16 and Det-32 run a normal, a dilation-2 and a
dilation-4 3x3 convolution in parallel on their tap, concatenate them and
reduce with a 1x1 convolution. Each branch ends in a 3x3 detection conv and
two 1x1 heads (2k scores, 4k box offsets).
"""

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import anchors as anchor_mod
from .boxes import clip_to_image, decode, iou_matrix, nms
from .layers import (Conv2D, L2Normalize, MaxPool2, ReLU, ShapeError, Upsample2x,
                     concat_channels, max_filter2, softmax_pair, split_channels)

IMAGE_MEAN = 128.0
IMAGE_SCALE = 64.0
MIN_SIDE = 32


@dataclass
class NetConfig:
    trunk_widths: tuple = (16, 32, 64, 64)
    det_channels: int = 64
    path_channels: int = 32
    atrous: bool = True
    l2_scale: float = 10.0
    head_std: float = 0.01
    seed: int = 0


@dataclass
class BranchOutput:
    name: str
    logits: np.ndarray   # (n, 2)
    reg: np.ndarray      # (n, 4)
    anchor_set: anchor_mod.AnchorSet

    @property
    def probs(self):
        return softmax_pair(self.logits.astype(np.float64))


def he_std(in_ch, k):
    return float(np.sqrt(2.0 / (in_ch * k * k)))


def preprocess(image):
    """uint8/float (H, W) image -> normalised (1, 1, H', W') map, zero-padded to a multiple of 32."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 2:
        raise ShapeError(f"image must be 2-D grayscale, got shape {img.shape}")
    h, w = img.shape
    if h < MIN_SIDE or w < MIN_SIDE:
        raise ShapeError(f"image {h}x{w} is smaller than one stride-32 cell")
    hp, wp = -(-h // MIN_SIDE) * MIN_SIDE, -(-w // MIN_SIDE) * MIN_SIDE
    x = np.zeros((1, 1, hp, wp), dtype=np.float32)
    x[0, 0, :h, :w] = (img - IMAGE_MEAN) / IMAGE_SCALE
    return x


class _Seq:
    """A chain of layers sharing one forward/backward."""

    def __init__(self, *layers):
        self.layers = layers

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


class _MultiPath:
    """Parallel 3x3 convolutions at several dilations, channel-concatenated."""

    def __init__(self, paths):
        self.paths = paths

    def forward(self, x):
        outs = [p.forward(x) for p in self.paths]
        self._sizes = [o.shape[1] for o in outs]
        return np.concatenate(outs, axis=1)

    def backward(self, dy):
        parts = split_channels(dy, self._sizes)
        return sum(p.backward(g) for p, g in zip(self.paths, parts))


class MPRPN:
    def __init__(self, cfg=None, dtype=np.float32):
        self.cfg = cfg = cfg or NetConfig()
        rng = np.random.default_rng(cfg.seed)
        w1, w2, w3, w4 = cfg.trunk_widths
        dc, pc = cfg.det_channels, cfg.path_channels
        L = OrderedDict()

        def conv(name, cin, cout, k=3, pad=None, dilation=1, std=None):
            pad = dilation * (k // 2) if pad is None else pad
            L[name] = Conv2D(cin, cout, k, 1, pad, dilation, std if std is not None else he_std(cin, k),
                             rng, dtype)
            return L[name]

        # trunk
        self.stem = _Seq(conv("conv1", 1, w1), ReLU(), MaxPool2(),
                         conv("conv2", w1, w1), ReLU(), MaxPool2(),
                         conv("conv3", w1, w1), ReLU())
        self.stage2 = _Seq(MaxPool2(), conv("conv4", w1, w2), ReLU())
        self.stage3 = _Seq(MaxPool2(), conv("conv5", w2, w3), ReLU())
        self.stage4 = _Seq(MaxPool2(), conv("conv6", w3, w4), ReLU())

        nk = [len(b.scales) for b in anchor_mod.BRANCHES]
        # Det-4
        L["det4.l2_a"] = L2Normalize(w1, cfg.l2_scale, dtype)
        L["det4.up"] = Upsample2x(w2, dtype)
        L["det4.l2_b"] = L2Normalize(w2, cfg.l2_scale, dtype)
        self.det4_body = _Seq(conv("det4.conv", w1 + w2, dc), ReLU())
        # Det-16 / Det-32
        dilations = (1, 2, 4) if cfg.atrous else (1,)
        self.l2_16 = L["det16.l2"] = L2Normalize(w3, cfg.l2_scale, dtype)
        self.det16_paths = _MultiPath([_Seq(conv(f"det16.path_d{d}", w3, pc, dilation=d), ReLU())
                                       for d in dilations])
        self.det16_body = _Seq(conv("det16.reduce", pc * len(dilations), dc, k=1), ReLU(),
                               conv("det16.conv", dc, dc), ReLU())
        self.det32_paths = _MultiPath([_Seq(conv(f"det32.path_d{d}", w4, pc, dilation=d), ReLU())
                                       for d in dilations])
        self.det32_body = _Seq(conv("det32.reduce", pc * len(dilations), dc, k=1), ReLU(),
                               conv("det32.conv", dc, dc), ReLU())
        self.heads = []
        for tag, k in zip(("det4", "det16", "det32"), nk):
            cls = conv(f"{tag}.cls", dc, 2 * k, k=1, std=cfg.head_std)
            reg = conv(f"{tag}.reg", dc, 4 * k, k=1, std=cfg.head_std)
            self.heads.append((cls, reg))
        self.layers = L

    # -- parameters -------------------------------------------------------
    def state_dict(self):
        out = OrderedDict()
        for lname, layer in self.layers.items():
            for pname, arr in layer.params.items():
                out[f"{lname}.{pname}"] = arr
        return out

    def load_state_dict(self, params):
        own = self.state_dict()
        missing = set(own) - set(params)
        extra = set(params) - set(own)
        if missing or extra:
            raise ShapeError(f"checkpoint mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for lname, layer in self.layers.items():
            for pname in layer.params:
                arr = np.asarray(params[f"{lname}.{pname}"])
                if arr.shape != layer.params[pname].shape:
                    raise ShapeError(f"{lname}.{pname}: shape {arr.shape} != {layer.params[pname].shape}")
                layer.params[pname] = arr.astype(layer.params[pname].dtype).copy()
        self.zero_grad()

    def named_params_and_grads(self):
        for lname, layer in self.layers.items():
            for pname in layer.params:
                yield f"{lname}.{pname}", layer, pname

    def zero_grad(self):
        for layer in self.layers.values():
            layer.zero_grad()

    def astype(self, dtype):
        for layer in self.layers.values():
            layer.astype(dtype)
        return self

    # -- forward / backward ----------------------------------------------
    def trunk(self, x):
        t4 = self.stem.forward(x)
        t8 = self.stage2.forward(t4)
        t16 = self.stage3.forward(t8)
        t32 = self.stage4.forward(t16)
        return t4, t8, t16, t32

    def forward_map(self, x):
        """Forward a preprocessed (1, C, H, W) map. Returns three BranchOutputs."""
        L = self.layers
        t4, t8, t16, t32 = self.trunk(x)
        self._taps = (t4, t8, t16, t32)
        a = L["det4.l2_a"].forward(t4)
        b = L["det4.l2_b"].forward(L["det4.up"].forward(t8))
        self._det4_sizes = (a.shape[1], b.shape[1])
        feats = [
            self.det4_body.forward(concat_channels(a, b)),
            self.det16_body.forward(self.det16_paths.forward(self.l2_16.forward(t16))),
            self.det32_body.forward(self.det32_paths.forward(t32)),
        ]
        outs = []
        for feat, (cls, reg), branch in zip(feats, self.heads, anchor_mod.BRANCHES):
            n, _, h, w = feat.shape
            k = len(branch.scales)
            c = cls.forward(feat)
            r = reg.forward(feat)
            logits = c.reshape(k, 2, h, w).transpose(2, 3, 0, 1).reshape(-1, 2)
            deltas = r.reshape(k, 4, h, w).transpose(2, 3, 0, 1).reshape(-1, 4)
            outs.append(BranchOutput(branch.name, logits, deltas, anchor_mod.generate(branch, h, w)))
        self._feat_shapes = [f.shape for f in feats]
        return outs

    def forward(self, image):
        return self.forward_map(preprocess(image))

    def backward(self, dlogits, dregs):
        """Backpropagate per-branch gradients (anchor order) into all parameters.
        Returns the gradient w.r.t. the input map."""
        L = self.layers
        dfeats = []
        for (cls, reg), shape, branch, dl, dr in zip(self.heads, self._feat_shapes,
                                                      anchor_mod.BRANCHES, dlogits, dregs):
            _, _, h, w = shape
            k = len(branch.scales)
            dc = dl.reshape(h, w, k, 2).transpose(2, 3, 0, 1).reshape(1, 2 * k, h, w)
            drr = dr.reshape(h, w, k, 4).transpose(2, 3, 0, 1).reshape(1, 4 * k, h, w)
            dfeats.append(cls.backward(np.ascontiguousarray(dc)) + reg.backward(np.ascontiguousarray(drr)))

        da, db = split_channels(self.det4_body.backward(dfeats[0]), self._det4_sizes)
        dt4 = L["det4.l2_a"].backward(da)
        dt8 = L["det4.up"].backward(L["det4.l2_b"].backward(db))
        dt16 = self.l2_16.backward(self.det16_paths.backward(self.det16_body.backward(dfeats[1])))
        dt32 = self.det32_paths.backward(self.det32_body.backward(dfeats[2]))

        dt16 = dt16 + self.stage4.backward(dt32)
        dt8 = dt8 + self.stage3.backward(dt16)
        dt4 = dt4 + self.stage2.backward(dt8)
        return self.stem.backward(dt4)

    # -- stage-2 feature maps ----------------------------------------------
    def feature_maps(self, image, atrous=True):
        """Stride-4 tap and the stride-8 tap used for region features.

        With ``atrous`` the stride-8 stage is recomputed without its pooling
        step and with dilation 2, which doubles its resolution (stride 4).
        Returns ``((map_a, stride_a), (map_b, stride_b))``.
        """
        x = preprocess(image)
        t4 = self.stem.forward(x)
        conv4 = self.layers["conv4"]
        if not atrous:
            return (t4, 4), (self.stage2.forward(t4), 8)
        out_ch, in_ch, k, _ = conv4.weight.shape
        dense = Conv2D(in_ch, out_ch, k, stride=1, pad=2, dilation=2, dtype=conv4.weight.dtype)
        dense.params = conv4.params
        t8 = np.maximum(dense.forward(max_filter2(t4)), 0)
        return (t4, 4), (t8, 4)


@dataclass
class ProposalConfig:
    nms_branch: float = 0.7
    top_k: tuple = (150, 40, 10)
    nms_merge: float = 0.5
    min_size: float = 1.0


def branch_proposals(out, img_w, img_h, cfg):
    """Decode, clip, NMS and keep the top-k of one branch.
    Returns (boxes (m, 4), scores (m,))."""
    k = cfg.top_k[[b.name for b in anchor_mod.BRANCHES].index(out.name)]
    scores = out.probs[:, 1]
    boxes = clip_to_image(decode(out.reg.astype(np.float64), out.anchor_set.boxes), img_w, img_h)
    ok = (boxes[:, 2] >= cfg.min_size) & (boxes[:, 3] >= cfg.min_size)
    idx = np.flatnonzero(ok)
    keep = nms_topk(boxes[idx], scores[idx], cfg.nms_branch, k)
    idx = idx[keep]
    return boxes[idx], scores[idx]


def nms_topk(boxes, scores, threshold, k):
    """Greedy NMS stopped after ``k`` kept boxes (identical to ``nms(...)[:k]``)."""
    if len(boxes) == 0 or k <= 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    keep = []
    # process in chunks so the early stop avoids NMS over thousands of boxes
    chunk = max(4 * k, 256)
    pending = order
    while len(keep) < k and pending.size:
        head, pending = pending[:chunk], pending[chunk:]
        cand = head
        if keep:
            ov = iou_matrix(boxes[cand], boxes[np.array(keep)]).max(axis=1)
            cand = cand[ov <= threshold]
        sub = nms(boxes[cand], scores[cand], threshold)
        keep.extend(cand[sub][:k - len(keep)].tolist())
    return np.array(keep, dtype=np.int64)


def propose(model, image, cfg=None, with_branch=True):
    """Post-processed proposals: per-branch NMS + top-k, union, merge NMS.

    Returns ``(boxes (m, 4), scores (m,), branch_ids (m,))`` in descending score order.
    """
    cfg = cfg or ProposalConfig()
    img = np.asarray(image)
    h, w = img.shape
    outs = model.forward(img)
    all_b, all_s, all_id = [], [], []
    for bi, out in enumerate(outs):
        b, s = branch_proposals(out, w, h, cfg)
        all_b.append(b)
        all_s.append(s)
        all_id.append(np.full(len(s), bi, dtype=np.int64))
    boxes = np.concatenate(all_b)
    scores = np.concatenate(all_s)
    ids = np.concatenate(all_id)
    keep = nms(boxes, scores, cfg.nms_merge)
    return boxes[keep], scores[keep], ids[keep]
