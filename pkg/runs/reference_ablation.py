import json
from pathlib import Path
from volact.experiment import ToyConfig, prepare, eval_split, _summary, train_model

work = Path("runs/toy")
ds, sp = prepare(work, ToyConfig(steps=6000))
cfg = ToyConfig(steps=6000)
ref = train_model(ds, sp, cfg, work / "reference", analytic=True)
res = json.loads((work / "results.json").read_text())
zero = _summary(eval_split(ref, ds, sp.val_ind, "zero"))
out = {"interp": {k: res["reference_val_ind"][k] for k in ("psnr", "failure_fraction")},
       "zero": {k: zero[k] for k in ("psnr", "failure_fraction")}}
(work / "reference_ablation.json").write_text(json.dumps(out, indent=1))
print(out)
