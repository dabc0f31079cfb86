"""Command-line entry points: phantom generation, two-stage training,
cascade inference, and evaluation.

Exit codes: 0 success, 1 runtime/data error, 2 command-line usage error.
All outputs are byte-deterministic for fixed seeds.
"""

import argparse
import os
import sys

import numpy as np

from . import config as cfgmod
from . import metrics, network, train
from .cascade import run_cascade
from .errors import DataError, LsnetError, UsageError
from .phantom import generate_phantom
from .volume import (Volume, clip_hu, liver_region_slices, load_mvol,
                     load_volume, merge_labels, resample_to_grid,
                     resample_trilinear, save_mask, save_mvol)

DEFAULT_BUILD_SEED = 17

MANIFEST_NAME = "manifest.txt"


def _load_config(path):
    if path is None:
        return cfgmod.RunConfig()
    if not os.path.isfile(path):
        raise UsageError(f"config file not found: {path}")
    return cfgmod.RunConfig.load(path)


def cmd_phantom(args):
    cfg = _load_config(args.config)
    pcfg = cfgmod.phantom_config_from(cfg)
    os.makedirs(args.out, exist_ok=True)
    names = []
    children = np.random.SeedSequence(args.seed).spawn(args.count)
    for i in range(args.count):
        img, lab = generate_phantom(children[i], pcfg)
        name = f"case_{i:04d}"
        save_mvol(img, os.path.join(args.out, f"{name}_img.mvol"))
        save_mask(lab, os.path.join(args.out, f"{name}_lab.mvol"))
        names.append(name)
    with open(os.path.join(args.out, MANIFEST_NAME), "w") as f:
        for name in names:
            f.write(name + "\n")
    print(f"wrote {args.count} phantom case(s) to {args.out}")
    return 0


def _read_manifest(data_dir):
    path = os.path.join(data_dir, MANIFEST_NAME)
    if not os.path.isfile(path):
        raise DataError(f"manifest not found: {path}")
    with open(path) as f:
        names = [line.strip() for line in f if line.strip()]
    if not names:
        raise DataError(f"manifest {path} lists no cases")
    return names


def _load_cases(data_dir):
    cases = []
    for name in _read_manifest(data_dir):
        img = load_mvol(os.path.join(data_dir, f"{name}_img.mvol"))
        lab = load_mvol(os.path.join(data_dir, f"{name}_lab.mvol"))
        if img.dims != lab.dims:
            raise DataError(f"case {name}: image dims {img.dims} != "
                            f"label dims {lab.dims}")
        cases.append((name, img, lab))
    return cases


def build_stage_dataset(raw_cases, stage, cascade_cfg):
    """Stage 'liver': HU-clipped volumes resampled to the coarse grid with
    merged 2-class labels, all slices eligible.  Stage 'lesion': original
    resolution, 3-class labels, liver-region slices only."""
    out = []
    for _name, img, lab in raw_cases:
        img = clip_hu(img)
        if stage == "liver":
            img_c = resample_trilinear(img, cascade_cfg.coarse_spacing)
            lab_c = resample_to_grid(lab, img_c.dims, img_c.spacing)
            lab_c = merge_labels(lab_c)
            out.append(train.TrainingCase(image=img_c, labels=lab_c))
        else:
            z_lo, z_hi = liver_region_slices(lab)
            out.append(train.TrainingCase(image=img, labels=lab,
                                          zs=range(z_lo, z_hi + 1)))
    return out


def cmd_train(args):
    cfg = _load_config(args.config)
    num_classes = 2 if args.stage == "liver" else 3
    spec = cfgmod.net_spec_from(cfg, num_classes)
    tcfg = cfgmod.train_config_from(cfg, num_classes)
    ccfg = cfgmod.cascade_config_from(cfg)

    try:
        raw = _load_cases(args.data)
        cases = build_stage_dataset(raw, args.stage, ccfg)
        for case in cases:
            nx, ny, _ = case.image.dims
            if nx < tcfg.crop or ny < tcfg.crop:
                raise DataError(
                    f"volume in-plane dims ({nx},{ny}) smaller than "
                    f"train.crop {tcfg.crop}")

        net = network.build_network(spec,
                                    cfg.get("net.seed", DEFAULT_BUILD_SEED))
        log_path = args.out + ".log"
        with open(log_path, "w") as log:
            class _Tee:
                def write(self, s):
                    sys.stdout.write(s)
                    log.write(s)

                def flush(self):
                    sys.stdout.flush()
                    log.flush()

            net, _reports = train.train_model(net, cases, tcfg, log=_Tee())
    except LsnetError as e:
        raise type(e)(f"[{args.stage}] {e}") from e
    network.save_checkpoint(net, args.out)
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_infer(args):
    cfg = _load_config(args.config)
    ccfg = cfgmod.cascade_config_from(cfg)
    net_a = network.load_checkpoint(args.liver_ckpt)
    net_b = network.load_checkpoint(args.lesion_ckpt)
    if net_a.spec.num_classes != 2:
        raise DataError(f"{args.liver_ckpt} is not a 2-class liver checkpoint")
    if net_b.spec.num_classes != 3:
        raise DataError(f"{args.lesion_ckpt} is not a 3-class lesion checkpoint")
    vol = load_volume(args.input, kind="intensity")
    liver, lesion, prob = run_cascade(net_a, net_b, vol, ccfg)

    os.makedirs(args.out, exist_ok=True)
    stem = os.path.basename(args.input)
    for suffix in (".mvol", ".nii"):
        if stem.endswith(suffix):
            stem = stem[: -len(suffix)]
    # write via temp names so a failure never leaves partial masks behind
    outputs = [(f"{stem}_liver.mvol", liver), (f"{stem}_lesion.mvol", lesion)]
    if cfg.get("emit_probs", False):
        outputs.append((f"{stem}_lesionprob.mvol",
                        Volume(prob.probs[2], prob.spacing, "intensity")))
    tmp_paths = []
    for fname, v in outputs:
        tmp = os.path.join(args.out, fname + ".tmp")
        if v.kind == "labels":
            save_mask(v, tmp)
        else:
            save_mvol(v, tmp)
        tmp_paths.append((tmp, os.path.join(args.out, fname)))
    for tmp, final in tmp_paths:
        os.replace(tmp, final)
    print(f"wrote {len(tmp_paths)} file(s) to {args.out}")
    return 0


def cmd_eval(args):
    def mvol_names(d):
        if not os.path.isdir(d):
            raise UsageError(f"not a directory: {d}")
        return {f for f in os.listdir(d) if f.endswith(".mvol")}

    pred_names = mvol_names(args.pred)
    ref_names = mvol_names(args.ref)
    common = sorted(pred_names & ref_names)
    if not common:
        raise DataError(
            "no matching case names between directories; "
            f"predictions: {sorted(pred_names)}, references: {sorted(ref_names)}")
    missing = sorted(pred_names ^ ref_names)
    if missing:
        raise DataError(f"unmatched case files: {missing}")

    rows = []
    for fname in common:
        pred = load_mvol(os.path.join(args.pred, fname))
        ref = load_mvol(os.path.join(args.ref, fname))
        if pred.dims != ref.dims:
            raise DataError(f"{fname}: grids differ {pred.dims} vs {ref.dims}")
        try:
            rep = metrics.evaluate_case(pred.data != 0, ref.data != 0,
                                        ref.spacing)
        except LsnetError as e:
            raise type(e)(f"case {fname}: {e}") from e
        rows.append((fname[: -len(".mvol")], rep))
    metrics.write_report_csv(args.out, rows)
    print(f"wrote {len(rows)} case row(s) + mean to {args.out}")
    return 0


def _build_parser():
    p = argparse.ArgumentParser(
        prog="lsnet",
        description="2.5D residual U-Net cascade for liver/lesion segmentation")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("phantom", help="generate synthetic labeled volumes")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--count", type=int, required=True, help="number of cases")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--config", default=None, help="key=value config file")
    sp.set_defaults(fn=cmd_phantom)

    sp = sub.add_parser("train", help="train one cascade stage")
    sp.add_argument("--data", required=True, help="phantom/data directory")
    sp.add_argument("--stage", required=True, choices=("liver", "lesion"))
    sp.add_argument("--config", default=None)
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("infer", help="run the two-model cascade")
    sp.add_argument("--liver-ckpt", required=True)
    sp.add_argument("--lesion-ckpt", required=True)
    sp.add_argument("--in", dest="input", required=True,
                    help="input volume (.mvol or uncompressed .nii)")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--config", default=None)
    sp.set_defaults(fn=cmd_infer)

    sp = sub.add_parser("eval", help="score predictions against references")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--out", required=True, help="report CSV path")
    sp.set_defaults(fn=cmd_eval)
    return p


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if e.code is not None else 0
    try:
        return args.fn(args)
    except LsnetError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
