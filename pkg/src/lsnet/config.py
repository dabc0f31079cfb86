"""Flat key=value run configuration.

One ``key = value`` pair per line, ``#`` starts a comment, unknown keys are
rejected.  Keys are grouped by prefix (net.*, train.*, cascade.*,
phantom.*) plus a few toplevel switches; every key has a typed parser and
a default taken from the corresponding dataclass.
"""

from dataclasses import dataclass, field

from .cascade import CascadeConfig
from .errors import ConfigError, UsageError
from .network import NetSpec
from .phantom import PhantomConfig
from .train import TrainConfig


def _parse_int(s):
    return int(s)


def _parse_float(s):
    return float(s)


def _parse_bool(s):
    v = s.strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_ints(s):
    return tuple(int(v) for v in s.replace(",", " ").split())


def _parse_floats(s):
    return tuple(float(v) for v in s.replace(",", " ").split())


def _parse_pairs(s):
    vals = _parse_floats(s)
    if len(vals) % 2:
        raise ValueError("need an even number of values (lo hi pairs)")
    return tuple((vals[i], vals[i + 1]) for i in range(0, len(vals), 2))


# key -> (parser, help text)
KNOWN_KEYS = {
    "net.seed": (_parse_int, "seed for parameter initialization"),
    "net.in_slices": (_parse_int, "input slab thickness (odd)"),
    "net.level_channels": (_parse_ints, "channels per resolution level"),
    "net.encoder_convs": (_parse_ints, "convs per encoder level"),
    "net.decoder_convs": (_parse_ints, "convs per decoder level"),
    "net.crop_train": (_parse_int, "nominal training crop recorded in the spec"),

    "train.lr0": (_parse_float, "initial learning rate"),
    "train.lr_gamma": (_parse_float, "per-epoch learning-rate factor"),
    "train.epochs": (_parse_int, "number of training epochs"),
    "train.weight_decay": (_parse_float, "L2 weight decay"),
    "train.momentum": (_parse_float, "SGD momentum"),
    "train.batch_size": (_parse_int, "samples per optimization step"),
    "train.crop": (_parse_int, "in-plane crop size (multiple of 16)"),
    "train.flip_prob": (_parse_float, "left-right flip probability"),
    "train.seed": (_parse_int, "seed for sampling and augmentation"),
    "train.class_weights": (_parse_floats,
                            "loss weights (2 values for the liver stage, "
                            "3 for the lesion stage)"),

    "cascade.coarse_spacing": (_parse_floats, "coarse grid spacing in mm"),
    "cascade.window": (_parse_int, "deployment tile size (multiple of 16)"),
    "cascade.window_overlap": (_parse_int, "tile overlap in pixels"),
    "cascade.roi_margin_mm": (_parse_float, "liver ROI margin in mm"),
    "cascade.lesion_prob_threshold": (_parse_float,
                                      "lesion component suppression threshold"),
    "cascade.connectivity": (_parse_int, "3-D connectivity, 6 or 26"),

    "phantom.dims": (_parse_ints, "phantom grid size nx ny nz"),
    "phantom.spacing": (_parse_floats, "phantom voxel spacing in mm"),
    "phantom.liver_semiaxes_mm": (_parse_pairs,
                                  "liver semi-axis ranges, lo hi per axis"),
    "phantom.center_jitter_mm": (_parse_float, "liver center jitter"),
    "phantom.lesion_count": (_parse_ints, "min max lesions per phantom"),
    "phantom.lesion_radius_mm": (_parse_floats, "lesion radius range in mm"),
    "phantom.mean_background": (_parse_float, "background HU mean"),
    "phantom.mean_liver": (_parse_float, "liver HU mean"),
    "phantom.mean_lesion": (_parse_float, "lesion HU mean"),
    "phantom.noise_sigma": (_parse_float, "intensity noise sigma"),

    "threads": (_parse_int, "1 forces the bit-deterministic serial path"),
    "emit_probs": (_parse_bool, "write the lesion probability volume"),
}


@dataclass
class RunConfig:
    """Parsed configuration; values() holds only keys present in the file."""

    values: dict = field(default_factory=dict)

    @classmethod
    def parse(cls, text, source="<config>"):
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(
                    f"{source}:{lineno}: expected key=value, got {raw!r}")
            key, _, val = line.partition("=")
            key = key.strip()
            val = val.strip()
            if key not in KNOWN_KEYS:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
            parser, _help = KNOWN_KEYS[key]
            try:
                values[key] = parser(val)
            except ValueError as e:
                raise ConfigError(
                    f"{source}:{lineno}: bad value for {key!r}: {e}") from e
        return cls(values=values)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.parse(f.read(), source=str(path))

    def get(self, key, default=None):
        if key not in KNOWN_KEYS:
            raise UsageError(f"unregistered config key {key!r}")
        return self.values.get(key, default)


def net_spec_from(cfg, num_classes):
    kwargs = {"num_classes": num_classes}
    for key, attr in (("net.in_slices", "in_slices"),
                      ("net.level_channels", "level_channels"),
                      ("net.encoder_convs", "encoder_convs"),
                      ("net.decoder_convs", "decoder_convs"),
                      ("net.crop_train", "crop_train")):
        if key in cfg.values:
            kwargs[attr] = cfg.values[key]
    return NetSpec(**kwargs)


def train_config_from(cfg, num_classes):
    kwargs = {}
    for key, attr in (("train.lr0", "lr0"), ("train.lr_gamma", "lr_gamma"),
                      ("train.epochs", "epochs"),
                      ("train.weight_decay", "weight_decay"),
                      ("train.momentum", "momentum"),
                      ("train.batch_size", "batch_size"),
                      ("train.crop", "crop"), ("train.flip_prob", "flip_prob"),
                      ("train.seed", "seed"),
                      ("train.class_weights", "class_weights")):
        if key in cfg.values:
            kwargs[attr] = cfg.values[key]
    if "class_weights" not in kwargs:
        kwargs["class_weights"] = (0.2, 1.2) if num_classes == 2 else (0.2, 1.2, 2.2)
    tc = TrainConfig(**kwargs)
    if len(tc.class_weights) != num_classes:
        raise ConfigError(
            f"train.class_weights has {len(tc.class_weights)} values for a "
            f"{num_classes}-class stage")
    return tc


def cascade_config_from(cfg):
    kwargs = {}
    for key, attr in (("cascade.coarse_spacing", "coarse_spacing"),
                      ("cascade.window", "window"),
                      ("cascade.window_overlap", "window_overlap"),
                      ("cascade.roi_margin_mm", "roi_margin_mm"),
                      ("cascade.lesion_prob_threshold", "lesion_prob_threshold"),
                      ("cascade.connectivity", "connectivity")):
        if key in cfg.values:
            kwargs[attr] = cfg.values[key]
    return CascadeConfig(**kwargs)


def phantom_config_from(cfg):
    kwargs = {}
    for key, attr in (("phantom.dims", "dims"), ("phantom.spacing", "spacing"),
                      ("phantom.liver_semiaxes_mm", "liver_semiaxes_mm"),
                      ("phantom.center_jitter_mm", "center_jitter_mm"),
                      ("phantom.lesion_count", "lesion_count"),
                      ("phantom.lesion_radius_mm", "lesion_radius_mm"),
                      ("phantom.mean_background", "mean_background"),
                      ("phantom.mean_liver", "mean_liver"),
                      ("phantom.mean_lesion", "mean_lesion"),
                      ("phantom.noise_sigma", "noise_sigma")):
        if key in cfg.values:
            kwargs[attr] = cfg.values[key]
    return PhantomConfig(**kwargs)


def reference_text():
    """Human-readable listing of every config key (kept in docs/)."""
    lines = ["lsnet configuration reference",
             "",
             "Format: one `key = value` line each; `#` starts a comment;",
             "unknown keys are rejected.  Unset keys fall back to the",
             "defaults below.",
             ""]
    defaults = {}
    spec = NetSpec()
    defaults.update({
        "net.seed": 17, "net.in_slices": spec.in_slices,
        "net.level_channels": spec.level_channels,
        "net.encoder_convs": spec.encoder_convs,
        "net.decoder_convs": spec.decoder_convs,
        "net.crop_train": spec.crop_train,
    })
    tc = TrainConfig()
    defaults.update({
        "train.lr0": tc.lr0, "train.lr_gamma": tc.lr_gamma,
        "train.epochs": tc.epochs, "train.weight_decay": tc.weight_decay,
        "train.momentum": tc.momentum, "train.batch_size": tc.batch_size,
        "train.crop": tc.crop, "train.flip_prob": tc.flip_prob,
        "train.seed": tc.seed, "train.class_weights": "per stage",
    })
    cc = CascadeConfig()
    defaults.update({
        "cascade.coarse_spacing": cc.coarse_spacing,
        "cascade.window": cc.window,
        "cascade.window_overlap": cc.window_overlap,
        "cascade.roi_margin_mm": cc.roi_margin_mm,
        "cascade.lesion_prob_threshold": cc.lesion_prob_threshold,
        "cascade.connectivity": cc.connectivity,
    })
    pc = PhantomConfig()
    defaults.update({
        "phantom.dims": pc.dims, "phantom.spacing": pc.spacing,
        "phantom.liver_semiaxes_mm": pc.liver_semiaxes_mm,
        "phantom.center_jitter_mm": pc.center_jitter_mm,
        "phantom.lesion_count": pc.lesion_count,
        "phantom.lesion_radius_mm": pc.lesion_radius_mm,
        "phantom.mean_background": pc.mean_background,
        "phantom.mean_liver": pc.mean_liver,
        "phantom.mean_lesion": pc.mean_lesion,
        "phantom.noise_sigma": pc.noise_sigma,
        "threads": 1, "emit_probs": False,
    })
    for key in KNOWN_KEYS:
        _parser, help_text = KNOWN_KEYS[key]
        lines.append(f"{key}")
        lines.append(f"    {help_text}")
        lines.append(f"    default: {defaults.get(key, '-')}")
        lines.append("")
    return "\n".join(lines) + "\n"
