"""Walkthrough: the four loss terms and the five pseudo-label aggregation
strategies.

Run from the repo root:  python3 demos/02_losses_and_aggregation.py
"""

import torch

from lava.losses import (AggregationStrategy, aggregate_teacher,
                         multicrop_pl_loss, self_distillation_loss,
                         semantic_hinge_loss, temperature_softmax)

torch.manual_seed(0)

# --- Temperature sharpening -------------------------------------------------
logits = torch.tensor([2.0, 1.0, 0.5])
for tau in (1.0, 0.1):
    p = temperature_softmax(logits, tau)
    print(f"tau={tau:4.1f} -> {p.numpy().round(3)}")

# --- Multi-crop pseudo-label aggregation ------------------------------------
# Three teacher crops of one image: two vote for class 0, one for class 2.
teacher = torch.tensor([[0.70, 0.20, 0.10],
                        [0.60, 0.10, 0.30],
                        [0.10, 0.20, 0.70]])
student = temperature_softmax(torch.randn(2, 3), 0.1)

print("\naggregated teacher targets:")
soft = aggregate_teacher(teacher, AggregationStrategy.SINGLE_AVERAGE_SOFT)
print(f"  single average soft  -> {soft.numpy().round(3)}")
hard = aggregate_teacher(teacher, AggregationStrategy.SINGLE_AVERAGE_HARD)
print(f"  single average hard  -> class {hard}")
vote = aggregate_teacher(teacher, AggregationStrategy.SINGLE_MAJORITY_HARD)
print(f"  single majority hard -> class {vote}")

print("\nper-strategy loss on the same student/teacher crops:")
for strategy in AggregationStrategy:
    value = float(multicrop_pl_loss(student, teacher, strategy))
    print(f"  {strategy.value:25s} {value:.4f}")

# --- Semantic hinge ----------------------------------------------------------
# The projection m is pushed toward the true class embedding and away from a
# sampled false one, with margin eta = 0.4.
omega_true = torch.tensor([1.0, 0.0, 0.0])
omega_false = torch.tensor([0.0, 1.0, 0.0])
for m in (omega_true, omega_false, torch.tensor([1.0, 1.0, 0.0])):
    value = float(semantic_hinge_loss(m, omega_true, omega_false, eta=0.4))
    print(f"\nhinge(m={m.numpy()}) = {value:.4f}", end="")
print()

# --- Self-distillation with centering ----------------------------------------
# Teacher logits are centered (collapse guard) and sharpened harder than the
# student before the cross-entropy between view distributions.
s_logits = torch.randn(3, 8)
t_logits = torch.randn(2, 8)
center = t_logits.mean(dim=0)
value = float(self_distillation_loss(s_logits, t_logits, tau_s=0.1,
                                     tau_t=0.04, center=center))
print(f"\nself-distillation loss: {value:.4f}")
