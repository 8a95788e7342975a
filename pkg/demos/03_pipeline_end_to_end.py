"""Walkthrough: the full staged pipeline on a desk-scale dataset.

Mirrors the CLI flow
    lava synth    --config ...
    lava pretrain --config ...
    lava adapt    --config ... --checkpoint pretrain.ckpt
    lava transfer --config ... --checkpoint adapt.ckpt
    lava eval     --config ... --checkpoint transfer.ckpt
using the same stage functions the CLI calls.

Run from the repo root:  python3 demos/03_pipeline_end_to_end.py
"""

import os
import tempfile

from lava.config import default_config
from lava.pipeline import (stage_adapt, stage_eval, stage_pretrain,
                           stage_synth, stage_transfer)
from lava.views import CropConfig

root = tempfile.mkdtemp(prefix="lava-demo-")
print(f"writing to {root}")


def tiny(stage: str, name: str):
    cfg = default_config(stage)
    cfg.seed = 3
    cfg.out_dir = os.path.join(root, name)
    cfg.model.feature_dim = 8
    cfg.model.projection_dim = 6
    cfg.model.semantic_dim = 8
    cfg.model.ssl_dim = 6
    cfg.model.hidden_dim = 8
    cfg.train.batch_size = 8
    cfg.train.epochs = 2
    cfg.train.phase2_epochs = 1
    cfg.crops = CropConfig(n_small_student=1, n_small_teacher=0,
                           n_large_student=1, n_large_teacher=1)
    return cfg


# 1. Synthesize a dataset plus a label-embedding table.
scfg = tiny("synth", "synth")
scfg.synth.n_classes = 4
scfg.synth.n_per_class = 8
scfg.synth.validation_fraction = 0.25
dataset = stage_synth(scfg)
embeddings = os.path.join(scfg.out_dir, "embeddings.txt")
print(f"synth     -> {dataset}")

# 2. Self-distillation pretraining + semantic head fit.
pcfg = tiny("pretrain", "pretrain")
pcfg.data.source_root = dataset
pcfg.data.embeddings = embeddings
pretrain_ckpt = stage_pretrain(pcfg)
print(f"pretrain  -> {pretrain_ckpt}")

# 3. Unsupervised adaptation on target data (here: same dataset, 2 shots
#    labelled, the rest treated as the unlabelled pool).
acfg = tiny("adapt", "adapt")
acfg.data.root = dataset
acfg.data.shots_per_class = 2
adapt_ckpt = stage_adapt(acfg, pretrain_ckpt)
print(f"adapt     -> {adapt_ckpt}")

# 4. Transfer: hinge loss on the labelled shots, multi-crop pseudo-label
#    loss on the unlabelled pool, classifier re-initialized for the target.
tcfg = tiny("transfer", "transfer")
tcfg.data.root = dataset
tcfg.data.embeddings = embeddings
tcfg.data.shots_per_class = 2
transfer_ckpt = stage_transfer(tcfg, adapt_ckpt)
print(f"transfer  -> {transfer_ckpt}")

# 5. Evaluate softmax / KNN / semantic accuracy on the validation split.
ecfg = tiny("eval", "eval")
ecfg.data.root = dataset
ecfg.data.embeddings = embeddings
ecfg.data.shots_per_class = 2
results = stage_eval(ecfg, transfer_ckpt)
print("eval      ->", {k: round(v, 3) for k, v in sorted(results.items())})
