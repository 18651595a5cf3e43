"""Procedural multi-scale detection scenes, PGM images and WIDER-style annotations.

Targets are an outlined ellipse with two dark dots inside it, drawn over
smooth noise together with distractors built from the same parts (rings
without dots, dot pairs without rings, blobs, squares), so the detector has to
learn the combination. Target heights are drawn log-uniformly from three bands
(8-32, 32-360, 360-900 px); bands that do not fit the image are dropped and the
remaining band weights renormalised.
"""

import logging
import os
from dataclasses import dataclass, fields

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

DEFAULT_BANDS = ((8.0, 32.0), (32.0, 360.0), (360.0, 900.0))


class AnnotationError(ValueError):
    pass


@dataclass
class SceneSpec:
    seed: int = 0
    image_size: int = 160
    targets_min: int = 1
    targets_max: int = 3
    bands: tuple = DEFAULT_BANDS
    band_weights: tuple = (1.0, 1.0, 1.0)
    max_target_frac: float = 0.9
    aspect_min: float = 0.8
    aspect_max: float = 1.0
    clutter: float = 3.0
    noise_std: float = 6.0
    blur: bool = True
    occlusion: bool = False
    max_retries: int = 50

    def effective_bands(self):
        """Bands clipped to the largest placeable target, with normalised weights."""
        hi_cap = self.max_target_frac * self.image_size
        bands, weights = [], []
        for (lo, hi), wgt in zip(self.bands, self.band_weights):
            if lo >= hi_cap or wgt <= 0:
                continue
            bands.append((lo, min(hi, hi_cap)))
            weights.append(wgt)
        if not bands:
            raise ValueError(f"no height band fits a {self.image_size}px image")
        weights = np.asarray(weights, dtype=np.float64)
        return bands, weights / weights.sum()

    # flat key=value config
    def dumps(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "bands":
                v = ",".join(f"{lo:g}-{hi:g}" for lo, hi in v)
            elif isinstance(v, tuple):
                v = ",".join(f"{x:g}" for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text):
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"line {lineno}: unknown scene key {key!r}")
            kw[key] = _parse_field(key, val, cls)
        return cls(**kw)


def _parse_field(key, val, cls):
    default = getattr(cls, key) if not key == "bands" else DEFAULT_BANDS
    if key == "bands":
        return tuple(tuple(float(x) for x in part.split("-")) for part in val.split(","))
    if isinstance(default, bool):
        return val.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(val)
    if isinstance(default, float):
        return float(val)
    if isinstance(default, tuple):
        return tuple(float(x) for x in val.split(","))
    return val


@dataclass
class Sample:
    image_id: str
    image: np.ndarray      # uint8 (H, W)
    boxes: np.ndarray      # (n, 4) float64, l t w h


# -- rendering -------------------------------------------------------------

def _background(rng, size):
    base = rng.standard_normal((size, size))
    smooth = ndimage.gaussian_filter(base, sigma=rng.uniform(2.0, 6.0))
    smooth = (smooth - smooth.mean()) / (smooth.std() + 1e-9)
    return 125.0 + 28.0 * smooth + rng.uniform(-15, 15)


def _unit_coords(box, size, ss=2):
    """Supersampled normalised coordinates of pixels touched by ``box``."""
    l, t, w, h = box
    x0, y0 = max(int(np.floor(l)), 0), max(int(np.floor(t)), 0)
    x1, y1 = min(int(np.ceil(l + w)), size), min(int(np.ceil(t + h)), size)
    offs = (np.arange(ss) + 0.5) / ss
    xs = (np.arange(x0, x1)[:, None] + offs[None]).reshape(-1)
    ys = (np.arange(y0, y1)[:, None] + offs[None]).reshape(-1)
    u = (xs - (l + w / 2)) / (w / 2)
    v = (ys - (t + h / 2)) / (h / 2)
    return (x0, y0, x1, y1), np.meshgrid(u, v, indexing="xy")


def _paint(canvas, box, parts, rng):
    """Draw a pattern made of ``parts`` ("ring", "fill", "dots", "square") into ``box``."""
    size = canvas.shape[0]
    (x0, y0, x1, y1), (u, v) = _unit_coords(box, size)
    if x1 <= x0 or y1 <= y0:
        return
    ss = 2
    r = np.sqrt(u * u + v * v)
    layer = np.full(u.shape, np.nan)
    ring_w = rng.uniform(0.2, 0.3)
    if "square" in parts:
        inside = (np.abs(u) <= 1) & (np.abs(v) <= 1)
        layer[inside] = rng.uniform(150, 230)
    if "fill" in parts:
        layer[r <= 1] = rng.uniform(90, 160)
    if "ring" in parts:
        layer[(r <= 1) & (r > 1 - ring_w)] = rng.uniform(195, 240)
    if "dots" in parts:
        dot_r = rng.uniform(0.15, 0.2)
        dy = rng.uniform(-0.3, -0.1)
        for dx in (-0.38, 0.38):
            layer[(u - dx) ** 2 + (v - dy) ** 2 <= dot_r ** 2] = rng.uniform(15, 50)
    region = canvas[y0:y1, x0:x1]
    hh, ww = region.shape
    sub = layer.reshape(hh, ss, ww, ss)
    painted = ~np.isnan(sub)
    frac = painted.mean(axis=(1, 3))
    val = np.where(painted, sub, 0.0).sum(axis=(1, 3)) / np.maximum(painted.sum(axis=(1, 3)), 1)
    region[:] = region * (1 - frac) + val * frac


def _overlaps(box, placed, margin=1.0):
    l, t, w, h = box
    for pl, pt, pw, ph in placed:
        if (l < pl + pw + margin and pl < l + w + margin and
                t < pt + ph + margin and pt < t + h + margin):
            return True
    return False


def _sample_height(rng, bands, weights):
    b = int(rng.choice(len(bands), p=weights))
    lo, hi = bands[b]
    return b, float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def render_scene(spec, rng, image_id=""):
    size = spec.image_size
    bands, weights = spec.effective_bands()
    canvas = _background(rng, size)
    n_targets = int(rng.integers(spec.targets_min, spec.targets_max + 1))
    heights = sorted((_sample_height(rng, bands, weights) for _ in range(n_targets)),
                     key=lambda bh: -bh[1])
    placed = []
    for band, h in heights:
        ok = False
        lo, hi = bands[band]
        for _ in range(spec.max_retries):
            w = h * rng.uniform(spec.aspect_min, spec.aspect_max)
            h_lo = int(np.ceil(lo)) if band == 0 else int(np.floor(lo)) + 1
            h_i = int(np.clip(round(h), h_lo, np.floor(hi)))
            w_i = max(int(round(w)), 2)
            if h_i > size or w_i > size:
                break
            l = int(rng.integers(0, size - w_i + 1))
            t = int(rng.integers(0, size - h_i + 1))
            if not _overlaps((l, t, w_i, h_i), placed):
                placed.append((l, t, w_i, h_i))
                ok = True
                break
            # shrink within the same band so crowded images keep the band mix
            h = float(np.exp(rng.uniform(np.log(lo), np.log(max(h, lo * 1.0001)))))
        if not ok:
            log.info("%s: could not place a %.0fpx target, emitting fewer", image_id, h)

    n_clutter = int(rng.poisson(spec.clutter))
    kinds = (("ring",), ("fill", "ring"), ("dots",), ("fill",), ("square",), ("square", "dots"))
    lo_all, hi_all = bands[0][0], bands[-1][1]
    occupied = list(placed)
    for _ in range(n_clutter):
        for _ in range(10):
            h = float(np.exp(rng.uniform(np.log(lo_all), np.log(hi_all))))
            w = h * rng.uniform(0.6, 1.4)
            l, t = rng.uniform(-w / 3, size - w / 1.5), rng.uniform(-h / 3, size - h / 1.5)
            if not _overlaps((l, t, w, h), placed):
                _paint(canvas, (l, t, w, h), kinds[int(rng.integers(len(kinds)))], rng)
                occupied.append((l, t, w, h))
                break
    for box in placed:
        _paint(canvas, box, ("fill", "ring", "dots"), rng)
        if spec.occlusion and rng.random() < 0.3:
            l, t, w, h = box
            ow, oh = w * rng.uniform(0.2, 0.5), h * rng.uniform(0.2, 0.5)
            ox, oy = l + rng.uniform(0, w - ow), t + rng.uniform(0, h - oh)
            y0, y1, x0, x1 = int(oy), int(np.ceil(oy + oh)), int(ox), int(np.ceil(ox + ow))
            canvas[y0:y1, x0:x1] = rng.uniform(60, 190)
    if spec.blur and rng.random() < 0.3:
        canvas = ndimage.gaussian_filter(canvas, sigma=rng.uniform(0.4, 1.0))
    canvas = canvas + rng.standard_normal(canvas.shape) * spec.noise_std
    img = np.clip(np.round(canvas), 0, 255).astype(np.uint8)
    boxes = np.asarray(placed, dtype=np.float64).reshape(-1, 4)
    return img, boxes


SPLIT_CODES = {"train": 0, "val": 1, "test": 2}


def generate(spec, n_images, split="train"):
    """Deterministic dataset: image i uses its own generator seeded by (seed, split, i)."""
    code = SPLIT_CODES.get(split, sum(split.encode()) + 3)
    out = []
    for i in range(n_images):
        rng = np.random.default_rng([spec.seed, code, i])
        image_id = f"{split}_{i:04d}"
        img, boxes = render_scene(spec, rng, image_id)
        out.append(Sample(image_id, img, boxes))
    return out


def band_histogram(samples, bands=DEFAULT_BANDS):
    """Fraction of gt boxes per height band (lower edge exclusive except the first)."""
    heights = np.concatenate([s.boxes[:, 3] for s in samples]) if samples else np.zeros(0)
    counts = np.array([np.sum(((heights > lo) | ((i == 0) & (heights == lo))) & (heights <= hi))
                       for i, (lo, hi) in enumerate(bands)], dtype=np.float64)
    return counts / max(len(heights), 1)


# -- PGM --------------------------------------------------------------------

def write_pgm(path, image):
    img = np.asarray(image, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        data = f.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM not supported")
    pos += 1
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w).copy()


def resize_shorter_edge(image, boxes, n):
    """Bilinear resize so the shorter side is ``n`` pixels; boxes scale with it."""
    h, w = image.shape
    s = n / min(h, w)
    if s == 1:
        return image, np.asarray(boxes, dtype=np.float64)
    out_h, out_w = int(round(h * s)), int(round(w * s))
    resized = ndimage.zoom(image.astype(np.float32), (out_h / h, out_w / w), order=1)
    img = np.clip(np.round(resized), 0, 255).astype(np.uint8)
    return img, np.asarray(boxes, dtype=np.float64) * np.array([out_w / w, out_h / h, out_w / w, out_h / h])


# -- annotations ----------------------------------------------------------------

def write_annotations(path, entries):
    """``entries``: iterable of (image_path, boxes). WIDER-style: path line, count line, box lines."""
    with open(path, "w") as f:
        for image_path, boxes in entries:
            boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
            f.write(f"{image_path}\n{len(boxes)}\n")
            for b in boxes:
                f.write(" ".join(f"{v:.17g}" for v in b) + "\n")


def read_annotations(path):
    """Inverse of :func:`write_annotations`. Also accepts ``image_path count`` on one line."""
    with open(path) as f:
        lines = [ln.strip() for ln in f]
    out, i = [], 0

    def next_line():
        nonlocal i
        while i < len(lines) and not lines[i]:
            i += 1
        if i >= len(lines):
            return None, None
        i += 1
        return i, lines[i - 1]

    while True:
        lineno, line = next_line()
        if line is None:
            break
        parts = line.split()
        if len(parts) == 2 and _is_int(parts[1]):
            image_path, count = parts[0], int(parts[1])
        elif len(parts) == 1:
            image_path = parts[0]
            cno, cline = next_line()
            if cline is None or not _is_int(cline):
                raise AnnotationError(f"{path}:{cno or lineno}: expected box count after {image_path!r}")
            count = int(cline)
        else:
            raise AnnotationError(f"{path}:{lineno}: expected image path, got {line!r}")
        if count < 0:
            raise AnnotationError(f"{path}:{lineno}: negative box count")
        boxes = []
        for _ in range(count):
            bno, bline = next_line()
            if bline is None:
                raise AnnotationError(f"{path}:{lineno}: expected {count} boxes, file ended")
            vals = bline.split()
            try:
                box = [float(v) for v in vals[:4]]
            except ValueError:
                raise AnnotationError(f"{path}:{bno}: non-numeric box {bline!r}") from None
            if len(box) != 4:
                raise AnnotationError(f"{path}:{bno}: box needs 4 numbers, got {bline!r}")
            boxes.append(box)
        out.append((image_path, np.asarray(boxes, dtype=np.float64).reshape(-1, 4)))
    return out


def _is_int(s):
    try:
        int(s)
        return True
    except ValueError:
        return False


def save_dataset(root, samples, split):
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    entries = []
    for s in samples:
        rel = f"images/{s.image_id}.pgm"
        write_pgm(os.path.join(root, rel), s.image)
        entries.append((rel, s.boxes))
    write_annotations(os.path.join(root, f"{split}.txt"), entries)


def load_dataset(root, split):
    out = []
    for rel, boxes in read_annotations(os.path.join(root, f"{split}.txt")):
        image_id = os.path.splitext(os.path.basename(rel))[0]
        out.append(Sample(image_id, read_pgm(os.path.join(root, rel)), boxes))
    return out
