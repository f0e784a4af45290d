"""End-to-end feature distillation on a small synthetic fixture.

Generates the seeded desk-scale fixture (labeled regions on a slab, patch-
pyramid supervision), trains the hash field for a few hundred steps, and
prints the loss trajectory. Expect a couple of minutes on a laptop; bump
STEPS toward 2000 for the fully converged field used by the acceptance suite.

Run from the repository root:  python3 demos/03_distill_features.py
"""

import json
from pathlib import Path

from semsplat.cli import main

STEPS = 400
out = Path("demo_output/fixture")

rc = main(["synth", "--out", str(out), "--seed", "7", "--steps", str(STEPS)])
assert rc == 0

rc = main(["train", "--config", str(out / "train_config.yaml")])
assert rc == 0

records = [json.loads(line)
           for line in (out / "run" / "metrics.jsonl").read_text().splitlines()]
print("\nstep   total      clip       dino       pixel      lr")
for rec in records[:: max(1, STEPS // 10)] + [records[-1]]:
    print(f"{rec['step']:5d}  {rec['loss_total']:.6f}  {rec['loss_clip']:.6f}  "
          f"{rec['loss_dino']:.6f}  {rec['loss_pixel']:.6f}  {rec['lr']:.5f}")

print(f"\ncheckpoint: {out / 'run' / 'checkpoint.fmgs'}")
print("next: python3 demos/04_open_vocabulary_query.py")
