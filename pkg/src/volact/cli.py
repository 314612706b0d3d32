"""Command-line entry point: synth, split, train, render, correspond, eval."""
from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import splits as splits_mod
from .fields import FieldConfig
from .files import write_image, write_planes
from .renderer import Camera, RenderConfig, render_image
from .rootfind import RootFindConfig
from .skeleton import Pose
from .synth import (analytic_skinning, analytic_warp, default_render_config, oracle_render, read_dataset,
                    synthesize)
from .training import (Adam, CorrPair, EmptyForeground, NonFiniteLoss, TrainConfig, TrainingData, fit,
                       load_checkpoint, match_correspondences, p2p_error, psnr)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 0,
    "synth": {"n_poses": 20, "n_cameras": 8, "H": 64, "W": 64},
    "split": {"K": 10, "ratio": [2, 1], "withhold": None},
    "field": asdict(FieldConfig()),
    "rootfind": {},
    "train": {},
    "render": {"near": 1.0, "far": 4.5, "n_samples": 64, "failure_strategy": "interp", "ao_enabled": True,
               "delta_enabled": True},
}


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def parse_override(text: str):
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def load_config(path: str | None, overrides: list[str] | None = None) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS))
    if path:
        try:
            with open(path) as fh:
                cfg = _merge(cfg, json.load(fh))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
    for item in overrides or []:
        keys, value = parse_override(item)
        node = cfg
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot set {item!r}: {k} is not a section")
        node[keys[-1]] = value
    return cfg


def _sections(cfg: dict):
    try:
        field = FieldConfig.from_dict(cfg["field"])
        rf = RootFindConfig.from_dict(cfg["rootfind"])
        tr = TrainConfig.from_dict({"seed": cfg["seed"], **cfg["train"]})
        rd = RenderConfig.from_dict({"seed": cfg["seed"], **cfg["render"]})
    except TypeError as e:
        raise ConfigError(str(e)) from e
    return field, rf, tr, rd


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _load_model(checkpoint, ds=None):
    model, skeleton, meta, _ = load_checkpoint(checkpoint)
    if meta.get("analytic_skinning"):
        if ds is None:
            raise ConfigError("checkpoint uses analytic skinning; pass --dataset")
        model.skinning_override = analytic_skinning(ds.actor)
    return model, skeleton, meta


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args, cfg):
    s = cfg["synth"]
    render_cfg = default_render_config(**{k: v for k, v in cfg["render"].items()
                                          if k in ("near", "far", "n_samples")})
    man = synthesize(args.out, int(s["n_poses"]), int(s["n_cameras"]), int(s["H"]), int(s["W"]), int(cfg["seed"]),
                     render_cfg=render_cfg)
    print(f"wrote {len(man['frames'])} frames to {args.out}")


def cmd_split(args, cfg):
    ds = read_dataset(args.dataset)
    sc = cfg["split"]
    K = int(args.K if args.K is not None else sc["K"])
    withhold = sc.get("withhold")
    if args.withhold:
        start, length = args.withhold.split(":")
        withhold = (int(start), int(length))
    probes = splits_mod.capsule_surface_probes(ds.actor.skeleton, ds.actor.radius)
    res, D = splits_mod.split_poses(ds.poses, probes, K, int(cfg["seed"]), ds.actor.skeleton.root,
                                    tuple(withhold) if withhold else None)
    res.save(args.out)
    if args.csv:
        frames = [f for f in range(len(ds.poses)) if f not in set(res.test)]
        splits_mod.write_distance_csv(args.csv, D, frames)
    print(f"train {len(res.train)} val_ind {len(res.val_ind)} val_ood {len(res.val_ood)} test {len(res.test)}")


def cmd_train(args, cfg):
    from .fields import ActorModel

    field, rf, tr, rd = _sections(cfg)
    ds = read_dataset(args.dataset)
    sp = splits_mod.SplitResult.load(args.splits)
    if not sp.train:
        raise ConfigError("train split is empty")
    out = Path(args.out)
    ck = out / "checkpoint.vact"
    start, opt_state = 0, None
    if args.resume and ck.exists():
        model, _, meta, opt_state = load_checkpoint(ck)
        start = int(meta["step"])
    else:
        model = ActorModel(field, ds.actor.B, seed=int(cfg["seed"]))
    recs = ds.records_for(sp.train)
    data = TrainingData.build([ds.image(r) for r in recs], [ds.cameras[r.camera] for r in recs],
                              [r.frame for r in recs], ds.poses)
    opt = Adam(model.params, tr)
    if opt_state is not None:
        opt.load_state(opt_state)
    vrec = ds.records_for(sp.val_ind)[:4] if tr.eval_every and sp.val_ind else []

    def eval_fn(m):
        return float(np.mean([psnr(render_image(ds.cameras[r.camera], ds.poses[r.frame], m, ds.actor.skeleton,
                                                rd, rf).color, ds.image(r)) for r in vrec]))

    _write_json(out / "config.json", cfg)
    try:
        fit(model, ds.actor.skeleton, data, tr, rd, rf, out, start, opt, eval_fn if vrec else None)
    except NonFiniteLoss as e:
        _write_json(out / "nonfinite_dump.json", {"error": str(e), "step_start": start})
        model.params.save(out / "nonfinite_params.vact")
        raise
    print(f"trained to step {max(start, tr.steps)}; checkpoint {ck}")


def cmd_render(args, cfg):
    _, rf, _, rd = _sections(cfg)
    ds = read_dataset(args.dataset) if args.dataset else None
    model, skeleton, _ = _load_model(args.checkpoint, ds)
    pose = Pose.from_json(_read_json(args.pose))
    cam = Camera.from_json(_read_json(args.camera))
    if args.no_ao:
        rd.ao_enabled = False
    if args.no_delta:
        rd.delta_enabled = False
    if args.strategy:
        rd.failure_strategy = args.strategy
    rd.__post_init__()
    out = render_image(cam, pose, model, skeleton, rd, rf)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    write_image(str(prefix) + (".png" if args.png else ".ppm"), out.color)
    write_planes(str(prefix) + "_corr.f32", out.corr)
    write_planes(str(prefix) + "_acc.f32", out.acc)
    _write_json(str(prefix) + "_stats.json", out.stats)
    print(json.dumps(out.stats))


def cmd_correspond(args, cfg):
    _, rf, _, rd = _sections(cfg)
    ds = read_dataset(args.dataset)
    model, skeleton, _ = _load_model(args.checkpoint, ds)
    cam_a = ds.cameras[args.camera_a]
    cam_b = ds.cameras[args.camera_b if args.camera_b is not None else args.camera_a]
    if args.resolution:
        cam_a = cam_a.scaled(args.resolution / cam_a.W)
        cam_b = cam_b.scaled(args.resolution / cam_b.W)
    pa, pb = ds.poses[args.frame_a], ds.poses[args.frame_b]
    ra = render_image(cam_a, pa, model, skeleton, rd, rf)
    rb = render_image(cam_b, pb, model, skeleton, rd, rf)
    fg = np.argwhere(ra.acc > 0.5)
    if len(fg) == 0:
        raise EmptyForeground("image A has no foreground pixels")
    pred = match_correspondences(ra.corr, rb.corr, fg, rb.acc, acc_a=ra.acc)
    report = {"frame_a": args.frame_a, "frame_b": args.frame_b, "n": len(fg)}
    oa, ob = oracle_render(cam_a, ds.actor, pa, rd), oracle_render(cam_b, ds.actor, pb, rd)
    true, vis = analytic_warp(ds.actor, cam_a, pa, oa, cam_b, pb, ob, fg)
    pairs = [CorrPair(tuple(map(int, a)), tuple(map(int, b)), tuple(map(float, t)))
             for a, b, t, v in zip(fg, pred, true, vis) if v]
    report["pairs"] = [{"chi_a": p.chi_a, "chi_b_pred": p.chi_b_pred, "chi_b_true": p.chi_b_true,
                        "distance": float(np.hypot(p.chi_b_true[0] - p.chi_b_pred[0],
                                                   p.chi_b_true[1] - p.chi_b_pred[1]))} for p in pairs]
    report["n_evaluated"] = len(pairs)
    report["p2p"] = p2p_error(pairs) if pairs else None
    _write_json(args.out, report)
    print(json.dumps({k: report[k] for k in ("n", "n_evaluated", "p2p")}))


def cmd_eval(args, cfg):
    _, rf, _, rd = _sections(cfg)
    ds = read_dataset(args.dataset)
    sp = splits_mod.SplitResult.load(args.splits)
    model, skeleton, _ = _load_model(args.checkpoint, ds)
    if args.strategy:
        rd.failure_strategy = args.strategy
        rd.__post_init__()
    table = {}
    for name in args.split:
        frames = sp.split(name)
        recs = ds.records_for(frames)
        if not recs:
            raise ConfigError(f"split {name!r} is empty")
        rows = []
        for r in recs:
            out = render_image(ds.cameras[r.camera], ds.poses[r.frame], model, skeleton, rd, rf)
            rows.append({"frame": r.frame, "camera": r.camera, "psnr": psnr(out.color, ds.image(r)),
                         "failure_fraction": out.stats["failure_fraction"]})
        rows.append({"frame": "mean", "psnr": float(np.mean([r["psnr"] for r in rows]))})
        table[name] = rows
    if "val_ind" in table and "val_ood" in table:
        table["ind_ood_gap"] = table["val_ind"][-1]["psnr"] - table["val_ood"][-1]["psnr"]
    if args.out:
        _write_json(args.out, table)
    print(json.dumps({k: (v[-1]["psnr"] if isinstance(v, list) else v) for k, v in table.items()}))


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="volact", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, dotted keys (e.g. train.steps=100)")
        return p

    p = common(sub.add_parser("synth", help="write a synthetic capsule-actor dataset"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = common(sub.add_parser("split", help="cluster poses and write splits.json"))
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("-K", type=int)
    p.add_argument("--withhold", help="start:length of a test chunk removed before clustering")
    p.add_argument("--csv", help="also dump the pose distance matrix")
    p.set_defaults(func=cmd_split)

    p = common(sub.add_parser("train", help="train on the train split"))
    p.add_argument("--dataset", required=True)
    p.add_argument("--splits", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("render", help="render one image from a checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pose", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--dataset")
    p.add_argument("--no-ao", action="store_true")
    p.add_argument("--no-delta", action="store_true")
    p.add_argument("--strategy", choices=["zero", "interp"])
    p.add_argument("--png", action="store_true")
    p.set_defaults(func=cmd_render)

    p = common(sub.add_parser("correspond", help="match pixels across two frames"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--frame-a", type=int, required=True)
    p.add_argument("--frame-b", type=int, required=True)
    p.add_argument("--camera-a", type=int, default=0)
    p.add_argument("--camera-b", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_correspond)

    p = common(sub.add_parser("eval", help="PSNR table over splits"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--splits", required=True)
    p.add_argument("--split", action="append", required=True)
    p.add_argument("--strategy", choices=["zero", "interp"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        args.func(args, cfg)
    except FloatingPointError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, EmptyForeground, splits_mod.DegenerateInput, OSError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        if "VOLACT_DEBUG" in os.environ:
            traceback.print_exc()
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
