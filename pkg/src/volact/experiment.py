"""Desk-scale toy experiment on the default capsule actor.

Trains a learned model and an analytic-skinning reference under the same
budget, then measures InD/OOD PSNR, the failure-strategy ablation and
correspondence accuracy. Results land in `<workdir>/results.json`.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import splits as splits_mod
from .fields import ActorModel, FieldConfig
from .renderer import RenderConfig, render_image
from .rootfind import RootFindConfig
from .synth import (analytic_skinning, default_render_config, oracle_render, read_dataset, synthesize,
                    analytic_warp)
from .training import (CorrPair, TrainConfig, TrainingData, fit, load_checkpoint, match_correspondences,
                       p2p_error, psnr)


def toy_field_config() -> FieldConfig:
    # reduced widths: a single CPU core cannot train the full-size networks
    return FieldConfig(skinning_layers=3, skinning_width=64, delta_layers=2, delta_width=32,
                       radiance_layers=4, radiance_width=128, radiance_skip=2, ao_layers=1, ao_width=32)


@dataclass
class ToyConfig:
    n_poses: int = 20
    n_cameras: int = 8
    resolution: int = 64
    clusters: int = 4
    seed: int = 0
    steps: int = 6000
    rays_per_batch: int = 256
    corr_resolution: int = 128
    corr_pairs: int = 8
    field: dict = field(default_factory=lambda: asdict(toy_field_config()))

    @classmethod
    def from_dict(cls, d: dict | None) -> "ToyConfig":
        return cls(**(d or {}))


def _render_cfg(strategy: str = "interp") -> RenderConfig:
    # AO and non-linear deformation disabled, as for synthetic subjects
    return default_render_config(ao_enabled=False, delta_enabled=False, failure_strategy=strategy)


def prepare(workdir, cfg: ToyConfig):
    work = Path(workdir)
    data_dir = work / "data"
    if not (data_dir / "manifest.json").exists():
        synthesize(data_dir, cfg.n_poses, cfg.n_cameras, cfg.resolution, cfg.resolution, cfg.seed)
    ds = read_dataset(data_dir)
    split_path = work / "splits.json"
    if split_path.exists():
        sp = splits_mod.SplitResult.load(split_path)
    else:
        probes = splits_mod.capsule_surface_probes(ds.actor.skeleton, ds.actor.radius)
        sp, D = splits_mod.split_poses(ds.poses, probes, cfg.clusters, cfg.seed)
        sp.save(split_path)
        splits_mod.write_distance_csv(work / "distances.csv", D)
    return ds, sp


def training_data(ds, frames) -> TrainingData:
    recs = ds.records_for(frames)
    return TrainingData.build([ds.image(r) for r in recs], [ds.cameras[r.camera] for r in recs],
                              [r.frame for r in recs], ds.poses)


def train_model(ds, sp, cfg: ToyConfig, out_dir, analytic: bool, log=print) -> ActorModel:
    out_dir = Path(out_dir)
    ck = out_dir / "checkpoint.vact"
    tc = TrainConfig(rays_per_batch=cfg.rays_per_batch, steps=cfg.steps, seed=cfg.seed, log_every=50,
                     checkpoint_every=250)
    start, opt = 0, None
    if ck.exists():
        model, _, meta, opt_state = load_checkpoint(ck)
        start = meta["step"]
        if start >= cfg.steps:
            if analytic:
                model.skinning_override = analytic_skinning(ds.actor)
            return model
    else:
        model = ActorModel(FieldConfig.from_dict(cfg.field), ds.actor.B, seed=cfg.seed)
        opt_state = None
    if analytic:
        model.skinning_override = analytic_skinning(ds.actor)
    from .training import Adam

    opt = Adam(model.params, tc)
    if opt_state is not None:
        opt.load_state(opt_state)
    data = training_data(ds, sp.train)

    def progress(row):
        if row["step"] % 50 == 0:
            log(f"[{out_dir.name}] step {row['step']} loss {row['loss']:.5f} psnr {row['psnr_batch']:.2f} "
                f"fail {row['failure_rate']:.3f} {row['seconds']:.2f}s")

    fit(model, ds.actor.skeleton, data, tc, _render_cfg(), RootFindConfig(), out_dir, start, opt,
        extra_meta={"analytic_skinning": analytic}, progress=progress)
    return model


def eval_split(model, ds, frames, strategy: str):
    rows = []
    cfg = _render_cfg(strategy)
    for r in ds.records_for(frames):
        out = render_image(ds.cameras[r.camera], ds.poses[r.frame], model, ds.actor.skeleton, cfg, RootFindConfig())
        rows.append({"frame": r.frame, "camera": r.camera, "psnr": psnr(out.color, ds.image(r)),
                     "failure_fraction": out.stats["failure_fraction"], "n_samples": out.stats["n_samples"],
                     "n_failed": out.stats["n_failed"]})
    return rows


def _summary(rows):
    n_s = sum(r["n_samples"] for r in rows)
    return {"psnr": float(np.mean([r["psnr"] for r in rows])),
            "failure_fraction": sum(r["n_failed"] for r in rows) / n_s if n_s else 0.0, "frames": rows}


def correspondence_eval(model, ds, sp, cfg: ToyConfig):
    """Pairs (camera c, pose A from train, pose B from val_ind) at corr_resolution."""
    scale = cfg.corr_resolution / cfg.resolution
    rcfg = _render_cfg()
    ours, base, per_pair = [], [], []
    for i in range(cfg.corr_pairs):
        cam = ds.cameras[i % len(ds.cameras)].scaled(scale)
        fa, fb = sp.train[i % len(sp.train)], sp.val_ind[i % len(sp.val_ind)]
        pa, pb = ds.poses[fa], ds.poses[fb]
        oa = oracle_render(cam, ds.actor, pa, rcfg)
        ob = oracle_render(cam, ds.actor, pb, rcfg)
        ra = render_image(cam, pa, model, ds.actor.skeleton, rcfg)
        rb = render_image(cam, pb, model, ds.actor.skeleton, rcfg)
        fg = np.argwhere((oa.acc > 0.5) & (ra.acc > 0.5))
        true, vis = analytic_warp(ds.actor, cam, pa, oa, cam, pb, ob, fg)
        px, true = fg[vis], true[vis]
        if len(px) == 0:
            continue
        pred = match_correspondences(ra.corr, rb.corr, px, rb.acc, acc_a=ra.acc)
        bl = match_correspondences(oa.surface, ob.surface, px, ob.acc, normalize=False)
        mk = lambda p: [CorrPair(tuple(a), tuple(b), tuple(t)) for a, b, t in zip(px, p, true)]
        ours += mk(pred)
        base += mk(bl)
        per_pair.append({"camera": i % len(ds.cameras), "frame_a": fa, "frame_b": fb, "n": len(px),
                         "p2p": p2p_error(mk(pred)), "p2p_baseline": p2p_error(mk(bl))})
    if not ours:
        return {"p2p": None, "p2p_baseline": None, "n_pairs": 0, "pairs": per_pair}
    return {"p2p": p2p_error(ours), "p2p_baseline": p2p_error(base), "n_pairs": len(ours), "pairs": per_pair}


def run(workdir, cfg: ToyConfig | None = None, log=print) -> dict:
    cfg = cfg or ToyConfig()
    work = Path(workdir)
    work.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    ds, sp = prepare(work, cfg)
    log(f"splits: train {sp.train} val_ind {sp.val_ind} val_ood {sp.val_ood}")
    ref = train_model(ds, sp, cfg, work / "reference", analytic=True, log=log)
    learned = train_model(ds, sp, cfg, work / "learned", analytic=False, log=log)
    res = {"config": asdict(cfg), "splits": sp.to_json()}
    res["reference_val_ind"] = _summary(eval_split(ref, ds, sp.val_ind, "interp"))
    log(f"reference val_ind {res['reference_val_ind']['psnr']:.2f}")
    res["learned_val_ind"] = _summary(eval_split(learned, ds, sp.val_ind, "interp"))
    res["learned_val_ind_zero"] = _summary(eval_split(learned, ds, sp.val_ind, "zero"))
    res["learned_val_ood"] = _summary(eval_split(learned, ds, sp.val_ood, "interp"))
    res["learned_train"] = _summary(eval_split(learned, ds, sp.train[:1], "interp"))
    log("learned val_ind {:.2f} zero {:.2f} ood {:.2f}".format(
        res["learned_val_ind"]["psnr"], res["learned_val_ind_zero"]["psnr"], res["learned_val_ood"]["psnr"]))
    res["correspondence"] = correspondence_eval(learned, ds, sp, cfg)
    log(f"p2p {res['correspondence']['p2p']} baseline {res['correspondence']['p2p_baseline']}")
    res["seconds"] = time.time() - t0
    with open(work / "results.json", "w") as fh:
        json.dump(res, fh, indent=1)
    return res


if __name__ == "__main__":
    import argparse

    ap = argparse.ArgumentParser(description="run the toy reconstruction experiment")
    ap.add_argument("workdir")
    ap.add_argument("--steps", type=int, default=ToyConfig.steps)
    a = ap.parse_args()
    run(a.workdir, ToyConfig(steps=a.steps), log=lambda m: print(m, flush=True))
