"""The full command-line pipeline on a tiny configuration.

Run: python demos/05_cli_pipeline.py [work_dir]
Every stage reads the previous stage's files from disk and leaves a
run_record.<command>.json behind.
"""
import subprocess
import sys
from pathlib import Path

work = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/cli")
work.mkdir(parents=True, exist_ok=True)
cfg = work / "tiny.yaml"
cfg.write_text(
    """\
dataset:
  gen: {image_size: 64, min_size: 16, max_size: 28, max_instances: 3, overlap_pressure: 0.8}
  n_train: 40
  n_val: 20
model: {fpn_dim: 8, box_head_dim: 16}
train: {total_iters: 60, warmup_iters: 20, batch_size: 4, checkpoint_every: 0}
"""
)


def opmask(*args):
    cmd = [sys.executable, "-m", "opmask", *map(str, args)]
    print("$", " ".join(cmd[2:]))
    subprocess.run(cmd, check=True)


opmask("gen-data", "--config", cfg, "--out", work / "train_data")
opmask("gen-data", "--config", cfg, "--out", work / "val_data", "--part", "val")
run = work / "run_opmask"
opmask("train", "--config", cfg, "--data", work / "train_data", "--out", run, "--variant", "opmask",
       "--split", "strong=0,1,2,3")
opmask("eval", "--run", run, "--data", work / "val_data", "--subset", "weak,strong")
opmask("analyze-ambiguity", "--run", run, "--data", work / "val_data")
opmask("analyze-overlap", "--run", run, "--data", work / "val_data", "--train-data", work / "train_data")
opmask("plot", "--inputs", run / "eval_overlap.json", run / "eval_ambiguity.json", "--out", run / "figures")
print("artifacts:", sorted(p.name for p in run.iterdir()))
