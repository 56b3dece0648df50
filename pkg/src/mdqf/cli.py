"""Command line entry point: ``mdqf {gen-data,train,eval,report}``.

Every command writes into an output directory (``--out``, defaulting to a
subdirectory of ``$MDQF_OUT`` or ``./runs``) and leaves a ``manifest.json``
there recording the effective configuration, input and output hashes and
timestamps. Config files are JSON or YAML documents with the sections of
:data:`DEFAULTS`; command line flags override file values.
"""

from __future__ import annotations

import argparse
import copy
import datetime
import hashlib
import json
import logging
import os
import sys

import torch

from .archive import load_archive
from .datagen import SceneSpec, export_coco, generate_dataset, import_coco, single_modality
from .detector import BranchDetector, DetectorConfig
from .evaluation import (
    SWAPS,
    detect_fused,
    evaluate,
    render_detections,
    run_decoupled_update,
    run_fusion_comparison,
    run_k_ablation,
    run_robustness,
    write_pr_curves,
    write_table,
)
from .fusion import FusionConfig
from .model import MdqfModel
from .training import TrainConfig, separate_to_joint_loop, train_image_baseline, train_joint, train_separate

log = logging.getLogger("mdqf")

ENV_OUT = "MDQF_OUT"
SCHEMA_VERSION = 1

# desk-scale settings that train the default synthetic task in a few CPU minutes
DEFAULTS = {
    "version": SCHEMA_VERSION,
    "scene": {},
    "data": {"train": 200, "test": 50, "test_start": 10000},
    "model": {},
    "fusion": {},
    "separate": {"max_steps": 800, "lr": 1e-3, "batch_size": 4, "clip_norm": 0.1, "hflip": True},
    "joint": {"max_steps": 400, "lr": 5e-4, "batch_size": 4, "clip_norm": 0.1, "hflip": True},
    "loop": {"rounds": 1},
}


class CliError(Exception):
    """User-facing failure; reported on stderr with a nonzero exit code."""


# config and manifest


def load_config(path):
    """Read a JSON or YAML config and merge it over :data:`DEFAULTS`."""
    cfg = copy.deepcopy(DEFAULTS)
    if not path:
        return cfg
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise CliError(f"cannot read config {path}: {e}") from None
    try:
        if path.endswith((".yaml", ".yml")):
            import yaml

            doc = yaml.safe_load(text) or {}
        else:
            doc = json.loads(text)
    except Exception as e:
        raise CliError(f"cannot parse config {path}: {e}") from None
    if not isinstance(doc, dict):
        raise CliError(f"config {path} must be a mapping")
    version = doc.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise CliError(f"unsupported config version {version} (expected {SCHEMA_VERSION})")
    unknown = sorted(set(doc) - set(DEFAULTS))
    if unknown:
        raise CliError(f"invalid config section(s): {', '.join(unknown)}")
    for key, value in doc.items():
        if isinstance(cfg.get(key), dict):
            if not isinstance(value, dict):
                raise CliError(f"config section {key!r} must be a mapping")
            cfg[key].update(value)
        else:
            cfg[key] = value
    return cfg


def _ints(text):
    """Parse ``"10,20,all"`` into ``[10, 20, None]``."""
    if text is None:
        return None
    try:
        return [None if t in ("", "all", "none") else int(t) for t in str(text).split(",")]
    except ValueError:
        raise CliError(f"expected comma-separated integers, got {text!r}") from None


def apply_overrides(cfg, args):
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg["scene"]["seed"] = seed
        cfg["model"]["seed"] = seed
        for phase in ("separate", "joint"):
            cfg[phase]["seed"] = seed
    fusion = cfg["fusion"]
    for flag, key in (("k1", "k_train"), ("postproc", "postprocess"), ("nms_iou", "nms_iou")):
        value = getattr(args, flag, None)
        if value is not None:
            fusion[key] = value
    k2 = _ints(getattr(args, "k2", None))
    if k2 and len(k2) == 1:
        fusion["k_test"] = k2[0]
    return cfg


def git_hash(path):
    """Git blob id of a file: sha1 over ``b"blob <size>\\0" + content``."""
    h = hashlib.sha1()
    with open(path, "rb") as f:
        data = f.read()
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


def hash_tree(path):
    if path is None or not os.path.exists(path):
        return {}
    if os.path.isfile(path):
        return {os.path.abspath(path): git_hash(path)}
    out = {}
    for root, _, files in sorted(os.walk(path)):
        for name in sorted(files):
            if name == "manifest.json":
                continue
            p = os.path.join(root, name)
            out[os.path.abspath(p)] = git_hash(p)
    return out


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    def __init__(self, command, config, seed, inputs):
        self.record = {"command": command, "config": config, "seed": seed, "started": _now(),
                       "inputs": {}, "outputs": {}}
        for p in inputs:
            self.record["inputs"].update(hash_tree(p))

    def finish(self, out_dir, outputs):
        missing = [p for p in outputs if not os.path.exists(p)]
        if missing:
            raise CliError(f"expected outputs were not written: {missing}")
        for p in outputs:
            self.record["outputs"].update(hash_tree(p))
        self.record["finished"] = _now()
        path = os.path.join(out_dir, "manifest.json")
        with open(path, "w") as f:
            json.dump(self.record, f, indent=1, sort_keys=True)
        return path


def _out_dir(args, name):
    out = args.out or os.path.join(os.environ.get(ENV_OUT, "runs"), name)
    os.makedirs(out, exist_ok=True)
    return out


def _require_dir(path, what):
    if not path or not os.path.isdir(path):
        raise CliError(f"{what} directory not found: {path}")
    return path


def _paired(path):
    return import_coco(_require_dir(path, "data"))


def _threads():
    torch.set_num_threads(int(os.environ.get("MDQF_THREADS", "1")))


# commands


def cmd_gen_data(args):
    cfg = apply_overrides(load_config(args.config), args)
    try:
        spec = SceneSpec.from_dict(cfg["scene"])
    except (TypeError, ValueError) as e:
        raise CliError(str(e)) from None
    out = _out_dir(args, "data")
    data = cfg["data"]
    n_train = args.train if args.train is not None else data["train"]
    n_test = args.test if args.test is not None else data["test"]
    manifest = RunManifest(args.argv, cfg, spec.seed, [args.config] if args.config else [])
    train_dir, test_dir = os.path.join(out, "train"), os.path.join(out, "test")
    export_coco(generate_dataset(spec, n_train), train_dir, spec.classes)
    export_coco(generate_dataset(spec, n_test, data["test_start"]), test_dir, spec.classes)
    return out, manifest, [train_dir, test_dir]


def _train_config(cfg, phase, out):
    try:
        return TrainConfig.from_dict({**cfg[phase], "log_path": os.path.join(out, f"{phase}_log.jsonl")})
    except (TypeError, ValueError) as e:
        raise CliError(str(e)) from None


def _model_config(cfg, modality):
    model = dict(cfg["model"])
    seed = model.pop("seed", 0)
    try:
        return DetectorConfig(modality=modality, seed=seed + (modality == "tir"), **model)
    except (TypeError, ValueError) as e:
        raise CliError(str(e)) from None


def _load_composite_or_branches(paths, fusion_cfg):
    """One composite checkpoint, or one branch checkpoint per modality."""
    branches = {}
    for p in paths or []:
        if not os.path.exists(p):
            raise CliError(f"checkpoint not found: {p}")
        _, meta = load_archive(p)
        if meta.get("kind") == "mdqf":
            model = MdqfModel.load(p)
            if fusion_cfg:
                model.fusion = FusionConfig(**{**vars(model.fusion), **fusion_cfg})
            return model
        branches[meta.get("modality")] = p
    if set(branches) != {"rgb", "tir"}:
        raise CliError("need both an RGB and a TIR branch checkpoint (or one composite checkpoint); "
                       f"got {sorted(k for k in branches if k)}")
    rgb, tir = BranchDetector.load(branches["rgb"]), BranchDetector.load(branches["tir"])
    return MdqfModel(rgb, tir, FusionConfig(**fusion_cfg))


def cmd_train(args):
    cfg = apply_overrides(load_config(args.config), args)
    out = _out_dir(args, f"train-{args.phase}")
    _threads()
    inputs = [args.data] + list(args.checkpoint or []) + ([args.config] if args.config else [])
    manifest = RunManifest(args.argv, cfg, args.seed, [p for p in inputs if p])
    if args.phase == "separate":
        if args.modality not in ("rgb", "tir"):
            raise CliError("train separate needs --modality rgb or --modality tir")
        samples = import_coco(_require_dir(args.data, "data"), modality=args.modality, visible_only=True)
        branch = BranchDetector(_model_config(cfg, args.modality))
        path = os.path.join(out, f"branch_{args.modality}.npz")
        train_separate(branch, samples, _train_config(cfg, "separate", out), checkpoint=path)
        return out, manifest, [path]
    if args.phase == "image-baseline":
        paired = _paired(args.data)
        det = BranchDetector(_model_config(cfg, "rgb"))
        path = os.path.join(out, "image_baseline.npz")
        train_image_baseline(det, paired, _train_config(cfg, "separate", out), checkpoint=path)
        return out, manifest, [path]
    model = _load_composite_or_branches(args.checkpoint, cfg["fusion"])
    paired = _paired(args.data)
    path = os.path.join(out, "mdqf.npz")
    if args.phase == "joint":
        train_joint(model, paired, _train_config(cfg, "joint", out), checkpoint=path)
    else:
        rgb = single_modality(paired, "rgb")
        tir = single_modality(paired, "tir")
        separate_to_joint_loop(model, rgb, tir, paired, rounds=int(cfg["loop"]["rounds"]),
                               separate_config=_train_config(cfg, "separate", out),
                               joint_config=_train_config(cfg, "joint", out), checkpoint=path)
    return out, manifest, [path]


def cmd_eval(args):
    cfg = apply_overrides(load_config(args.config), args)
    out = _out_dir(args, f"eval-{args.protocol}")
    _threads()
    inputs = [args.data] + list(args.checkpoint or []) + [args.test, args.image_baseline]
    manifest = RunManifest(args.argv, cfg, args.seed, [p for p in inputs if p])
    model = _load_composite_or_branches(args.checkpoint, cfg["fusion"])
    outputs = []
    if args.protocol == "compare":
        test = _paired(args.data)
        rows = run_fusion_comparison(model, test)
        result, curves = evaluate(detect_fused(model, test), test, model.rgb.config.num_classes,
                                  return_curves=True)
        pr = os.path.join(out, "pr_curves.csv")
        write_pr_curves(curves, pr)
        outputs.append(pr)
    elif args.protocol == "robustness":
        test = _paired(args.data)
        image = BranchDetector.load(args.image_baseline) if args.image_baseline else None
        degrade = ("rgb", "tir") if args.degrade in (None, "both") else (args.degrade,)
        rows = run_robustness(model, test, image_baseline=image, box_baseline=(model.rgb, model.tir),
                              factor=args.factor, degrade=degrade)
    elif args.protocol == "ablate-k":
        test = _paired(args.data)
        k2 = _ints(args.k2) or [None]
        modes = (args.postproc,) if args.postproc else ("nms", "topk")
        rows = run_k_ablation(model, test, k2, modes, k1=args.k1, topk_n=args.topk_n)
    else:
        paired = _paired(args.data)
        test = import_coco(_require_dir(args.test, "test data"))
        rows, models = run_decoupled_update(
            model, single_modality(paired, "rgb"), single_modality(paired, "tir"), paired, test,
            _train_config(cfg, "joint", out), _train_config(cfg, "separate", out),
            swaps=tuple(args.swaps.split(",")) if args.swaps else tuple(SWAPS))
        for name, m in models.items():
            if name != "initial":
                p = os.path.join(out, f"{name}.npz")
                m.save(p)
                outputs.append(p)
    csv_path, md_path = write_table(rows, out, args.protocol)
    print(open(md_path).read(), end="")
    return out, manifest, outputs + [csv_path, md_path]


def cmd_report(args):
    """Collect the markdown tables of finished runs and render example detections."""
    out = _out_dir(args, "report")
    manifest = RunManifest(args.argv, {}, args.seed, list(args.runs))
    parts = ["# MDQF report\n"]
    for run in args.runs:
        mpath = os.path.join(run, "manifest.json")
        if not os.path.exists(mpath):
            raise CliError(f"{run} has no manifest.json")
        with open(mpath) as f:
            m = json.load(f)
        parts.append(f"## {' '.join(m['command'])}\n")
        for name in sorted(os.listdir(run)):
            if name.endswith(".md"):
                parts.append(open(os.path.join(run, name)).read())
    outputs = []
    if args.checkpoint and args.data:
        model = _load_composite_or_branches(args.checkpoint, {})
        samples = _paired(args.data)[: args.render]
        for s in samples:
            (dets,) = model.predict(s.rgb[None], s.tir[None])
            p = os.path.join(out, f"detections_{s.image_id:06d}.png")
            render_detections(s, dets, p)
            outputs.append(p)
            parts.append(f"![detections {s.image_id}]({os.path.basename(p)})\n")
    path = os.path.join(out, "report.md")
    with open(path, "w") as f:
        f.write("\n".join(parts))
    return out, manifest, outputs + [path]


# argument parsing


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or YAML config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help=f"output directory (default: ${ENV_OUT}/<command> or ./runs/<command>)")
    common.add_argument("--data", help="dataset directory written by gen-data")
    common.add_argument("--checkpoint", action="append",
                        help="checkpoint path; repeat to pass one branch checkpoint per modality")
    common.add_argument("--modality", choices=("rgb", "tir"))
    common.add_argument("--k1", type=int, help="top-k during training")
    common.add_argument("--k2", help="top-k at test time; comma-separated list for ablate-k")
    common.add_argument("--degrade", choices=("rgb", "tir", "both"))
    common.add_argument("--factor", type=float, default=0.0, help="contrast factor for --degrade")
    common.add_argument("--postproc", choices=("nms", "topk"))
    common.add_argument("--nms-iou", type=float)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mdqf", description="RGB-thermal query-fusion detector")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="render a synthetic paired dataset")
    p.add_argument("--train", type=int, help="number of training pairs")
    p.add_argument("--test", type=int, help="number of test pairs")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train branches, the fused model or a baseline")
    p.add_argument("phase", choices=("separate", "joint", "loop", "image-baseline"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="run an evaluation protocol")
    p.add_argument("protocol", choices=("compare", "robustness", "ablate-k", "decoupled"))
    p.add_argument("--test", help="held-out data for the decoupled protocol")
    p.add_argument("--image-baseline", help="image-fusion baseline checkpoint for robustness")
    p.add_argument("--topk-n", type=int, help="detections kept by topk post-processing")
    p.add_argument("--swaps", help=f"comma-separated subset of {','.join(SWAPS)}")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common], help="merge run tables into one report")
    p.add_argument("runs", nargs="+", help="run directories to include")
    p.add_argument("--render", type=int, default=4, help="number of test pairs to draw")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        out, manifest, outputs = args.func(args)
        path = manifest.finish(out, outputs)
    except CliError as e:
        print(f"mdqf {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as e:
        print(f"mdqf {args.command}: error: {e}", file=sys.stderr)
        return 1
    for p in outputs:
        print(p)
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
