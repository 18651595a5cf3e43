"""Run configuration: one flat table of fields, each tagged with where its default comes from.

"paper" marks values published for the original detector (IoU thresholds,
mini-batch sizes, NMS settings, optimiser constants); "decision" marks
desk-scale choices made for this implementation.
"""

import hashlib
from dataclasses import field, fields, make_dataclass


class ConfigError(ValueError):
    """Malformed config file or value (reported as a schema mismatch)."""


def _ints(s):
    return tuple(int(v) for v in str(s).split(",") if v.strip())


def _bool(s):
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# name, default, parser, provenance, help
FIELDS = (
    ("seed", 0, int, "decision", "master random seed"),
    ("image_size", 160, int, "decision", "shorter image edge N in pixels"),
    ("n_train", 500, int, "decision", "number of synthetic training images"),
    ("n_val", 100, int, "decision", "number of synthetic validation images"),
    ("trunk_widths", (16, 32, 64, 64), _ints, "decision", "channel widths of the four trunk stages"),
    ("det_channels", 64, int, "decision", "channels of each branch's detection conv"),
    ("atrous", True, _bool, "paper", "parallel dilated paths in Det-16/Det-32 and dilated stage-2 features"),
    ("ohem", True, _bool, "paper", "online hard example mining (off = random 1:3 sampling)"),
    ("steps", 6000, int, "decision", "SGD steps (one image each)"),
    ("lr", 0.01, float, "decision", "initial learning rate"),
    ("lr_drop_at", 0.75, float, "decision", "fraction of steps after which the learning rate drops"),
    ("lr_drop_factor", 5.0, float, "paper", "learning-rate divisor after the drop"),
    ("momentum", 0.9, float, "paper", "SGD momentum"),
    ("weight_decay", 0.0005, float, "paper", "L2 weight decay on conv weights"),
    ("alphas", (1.0, 1.0, 1.0), lambda s: tuple(float(v) for v in str(s).split(",")), "decision",
     "per-branch loss weights (det4,det16,det32)"),
    ("lam", 1.0, float, "decision", "regression loss weight"),
    ("ohem_batch", 256, int, "paper", "sampled anchors per branch per image"),
    ("grad_clip", 10.0, float, "decision", "global gradient-norm clip"),
    ("nms_branch", 0.7, float, "paper", "per-branch proposal NMS IoU"),
    ("top_k", (150, 40, 10), _ints, "paper", "proposals kept per branch (det4,det16,det32)"),
    ("nms_merge", 0.5, float, "paper", "NMS IoU when merging branches"),
    ("bf_divisor", 8, int, "decision", "divides the cascade tree counts and mining quota"),
    ("bf_depth", 5, int, "paper", "boosted tree depth"),
    ("bf_bins", 32, int, "decision", "quantile bins per feature for split search"),
    ("bf_shrinkage", 0.1, float, "decision", "multiplier on every tree's leaf values"),
    ("bf_mine", 10000, int, "paper", "hard negatives mined per stage before division"),
    ("bf_init_neg", 2000, int, "decision", "random negatives in the first stage"),
    ("bf_init_from_rpn", True, _bool, "decision", "start boosting from the rpn logit"),
    ("bf_parts", "both", str, "decision", "feature parts for detect: face, context or both"),
    ("recall_score_thr", 0.0, float, "decision", "score threshold for recall-by-height"),
)

FIELD_INFO = {name: (default, parser, prov, help_) for name, default, parser, prov, help_ in FIELDS}


RunConfig = make_dataclass(
    "RunConfig", [(name, type(default), field(default=default)) for name, default, _, _, _ in FIELDS])


def provenance(name):
    return FIELD_INFO[name][2]


def parse_value(name, raw):
    if name not in FIELD_INFO:
        raise ConfigError(f"unknown config key {name!r}")
    try:
        return FIELD_INFO[name][1](raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {name}: {raw!r} ({exc})") from None


def render(value):
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value).lower() if isinstance(value, bool) else str(value)


def load_config(path=None, overrides=None):
    """Defaults, then ``key = value`` lines from ``path``, then ``overrides`` (flags win)."""
    values = {}
    if path:
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key = value")
                k, v = (p.strip() for p in line.split("=", 1))
                values[k] = parse_value(k, v)
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = parse_value(k, v) if isinstance(v, str) else v
    return RunConfig(**values)


def dumps(cfg):
    return "".join(f"{f.name} = {render(getattr(cfg, f.name))}\n" for f in fields(cfg))


def config_hash(cfg):
    return hashlib.sha256(dumps(cfg).encode()).hexdigest()[:16]
