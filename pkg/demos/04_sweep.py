"""Sweep the number of test-time adaptation steps and plot the curve.

Mirrors the step-count study: retrieval quality as a function of how many
gradient updates each query is allowed to spend on itself.
"""

import tempfile
from pathlib import Path

from sketchadapt.cli import run_sweep, run_train
from sketchadapt.config import ExperimentConfig

out = Path(tempfile.mkdtemp(prefix="sketchadapt_demo_"))

cfg = ExperimentConfig().apply_overrides([
    "data.samples_per_category=16", "data.canvas=16", "data.t_max=12",
    "nets.canvas=16", "nets.feature_dim=32", "nets.primary_dim=16",
    "nets.sketch_aux_dim=16", "nets.photo_aux_dim=16", "nets.hidden_size=16",
    "nets.channels=8,8,16,16", "nets.norm_groups=4", "nets.eta_hidden=16,8",
    "nets.alpha_init=0.001",
    "train.outer_iters=80", "train.meta_batch=2",
    "train.n_train_pairs=3", "train.n_val_pairs=2", "train.pool_size=4",
    "train.outer_lr=0.002",
    "ttt.lr_ttt=0.001", "ttt.max_queries=40",
    "seed=5",
    f"out_dir={tempfile.mkdtemp(prefix='sketchadapt_demo_train_')}",
])

checkpoint, _ = run_train(cfg)
rows = run_sweep(cfg, "ttt_steps", [0, 1, 2, 4, 8], out, checkpoint_path=checkpoint)
print("\nadaptation steps vs retrieval quality:")
for steps, map_all, p_at_k in rows:
    print(f"  tau_s={steps}: mAP@all={map_all:.4f} P@K={p_at_k:.4f}")
print(f"\nwrote {out / 'sweep.csv'} and {out / 'sweep.png'}")
