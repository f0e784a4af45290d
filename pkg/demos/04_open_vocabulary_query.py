"""Query the field trained by demo 03 and score it against the annotations.

Renders relevancy maps for every region query (false-color PNGs), then runs
the detection and segmentation protocols against the fixture's ground truth.

Run from the repository root, after demos/03_distill_features.py.
"""

import json
from pathlib import Path

from semsplat.cli import main

fix = Path("demo_output/fixture")
if not (fix / "run" / "checkpoint.fmgs").exists():
    raise SystemExit("run demos/03_distill_features.py first")

rc = main(["query",
           "--scene", str(fix / "scene.ply"),
           "--checkpoint", str(fix / "run" / "checkpoint.fmgs"),
           "--poses", str(fix / "poses_test.yaml"), "--view", "0",
           "--queries", str(fix / "embeddings" / "queries.emb"),
           "--canonicals", str(fix / "embeddings" / "canonicals.emb"),
           "--out-dir", "demo_output/relevancy"])
assert rc == 0
print("relevancy maps written to demo_output/relevancy/\n")

rc = main(["eval",
           "--scene", str(fix / "scene.ply"),
           "--checkpoint", str(fix / "run" / "checkpoint.fmgs"),
           "--poses", str(fix / "poses_test.yaml"),
           "--queries", str(fix / "embeddings" / "queries.emb"),
           "--canonicals", str(fix / "embeddings" / "canonicals.emb"),
           "--classes", str(fix / "embeddings" / "classes.emb"),
           "--boxes", str(fix / "annotations" / "boxes.txt"),
           "--masks-dir", str(fix / "annotations" / "masks"),
           "--legend", str(fix / "annotations" / "legend.txt"),
           "--out", "demo_output/report.json"])
assert rc == 0

report = json.loads(Path("demo_output/report.json").read_text())
print(f"\ndetection accuracy: {report['detection_accuracy']:.3f} "
      f"over {report['n_queries']} queries")
print(f"mIoU {report['miou']:.3f}, interior mIoU {report['interior_miou']:.3f}, "
      f"mAP {report['map']:.3f}")
