"""A short run of the whole workflow through the command line, in a temporary
run directory. The smoke-test sizes are reduced here so it finishes in about a
minute; the acceptance suite runs the full preset."""
import json
import tempfile

from diffma.cli import main

SMALL = ["--set", "data.count=48", "--set", "data.holdout=8", "--set", "data.resolution=64",
         "--set", "model.latent_shape=[4, 8, 8]", "--set", "embedder.steps=50",
         "--set", "optim.steps=200", "--set", "sample.steps=20"]

with tempfile.TemporaryDirectory() as run:
    for cmd in ("gen-data", "pretrain-embedder", "train", "sample", "eval"):
        args = [cmd, "--run-dir", run] + (SMALL if cmd == "gen-data" else [])
        print(f"$ diffma {' '.join(args)}")
        assert main(args) == 0
    report = json.load(open(f"{run}/metrics/eval.json"))
    print(f"held-out SSIM {report['ssim_pct']:.2f} vs copy-the-source {report['baseline']['ssim_pct']:.2f}")
