"""Corpus-level enhancement check on downscaled synthetic scenes.

Each scene is rendered at the working size, halved with bilinear filtering and
then brought back up either by plain bilinear resizing or by the configured
enhancer. The script reports how often the segmenter assigns the scene's
dominant class at least as much probability after enhancement.

    python3 scripts/compare_enhancement.py --checkpoint runs/desk/model.ckpt
"""

import argparse
import json

import torch

from semdepth import dataset as ds
from semdepth.enhancement import class_probability_report, dominant_class_statistic
from semdepth.pipeline import Pipeline


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--count", type=int, default=50)
    ap.add_argument("--seed", type=int, default=12345)
    args = ap.parse_args()
    torch.set_num_threads(1)
    pipe = Pipeline.load(args.checkpoint)
    scenes = [ds.downscale_sample(s) for s in ds.corpus("synthetic", args.count, args.seed).all]
    reports = [class_probability_report(s.image, pipe.segmenter, pipe.enhancer) for s in scenes]
    stat = dominant_class_statistic(reports, [s.dominant_class for s in scenes])
    stat["flip_events"] = sum(len(r.flip_events) for r in reports)
    print(json.dumps(stat, indent=2))


if __name__ == "__main__":
    main()
