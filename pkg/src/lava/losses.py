"""Training objectives: semantic hinge, multi-crop pseudo-label loss with five
aggregation strategies, self-distillation, supervised classification, and the
weighted total.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .models import temperature_softmax

LOG_CLAMP = 1e-12


class AggregationStrategy(enum.Enum):
    PAIRWISE_AVERAGE_SOFT = "pair-wise average soft"
    PAIRWISE_AVERAGE_HARD = "pair-wise average hard"
    SINGLE_AVERAGE_SOFT = "single average soft"
    SINGLE_AVERAGE_HARD = "single average hard"
    SINGLE_MAJORITY_HARD = "single majority hard"

    @classmethod
    def from_name(cls, name: str) -> "AggregationStrategy":
        key = name.strip()
        for strat in cls:
            if key == strat.value or key == strat.name:
                return strat
        raise ValueError(f"unknown aggregation strategy {name!r}; "
                         f"expected one of {[s.value for s in cls]}")


@dataclass(frozen=True)
class LossWeights:
    w_ssl: float = 0.0
    w_sem: float = 1.0
    w_pl: float = 1.0
    w_cls: float = 0.0

    def validate(self) -> None:
        vals = (self.w_ssl, self.w_sem, self.w_pl, self.w_cls)
        if any(v < 0 or not torch.isfinite(torch.tensor(v)) for v in vals):
            raise ValueError("loss weights must be finite and >= 0")


def _first_argmax(v: torch.Tensor) -> int:
    """Index of the maximum, smallest index on ties."""
    return int((v == v.max()).nonzero()[0].item())


def _one_hot_like(dist: torch.Tensor, index: int) -> torch.Tensor:
    out = torch.zeros_like(dist)
    out[index] = 1.0
    return out


def cross_entropy(p_t: torch.Tensor, p_s: torch.Tensor) -> torch.Tensor:
    """-sum p_t log p_s with p_s clamped below at 1e-12."""
    if p_t.shape != p_s.shape:
        raise ValueError(f"distribution shape mismatch {p_t.shape} vs {p_s.shape}")
    return -(p_t * torch.log(p_s.clamp_min(LOG_CLAMP))).sum(dim=-1)


def semantic_hinge_loss(m_s: torch.Tensor, omega_true: torch.Tensor,
                        omega_false: torch.Tensor, eta: float) -> torch.Tensor:
    """max(0, eta - cos(m_s, omega_true) + cos(m_s, omega_false)).

    Accepts single vectors or batches (leading dim); batches are averaged.
    Embeddings are constants: no gradient flows into them.
    """
    if eta <= 0:
        raise ValueError(f"hinge margin must be positive, got {eta}")
    m = m_s if m_s.dim() > 1 else m_s.unsqueeze(0)
    ot = omega_true.detach() if omega_true.dim() > 1 else omega_true.detach().unsqueeze(0)
    of = omega_false.detach() if omega_false.dim() > 1 else omega_false.detach().unsqueeze(0)
    norms = m.norm(dim=-1)
    if bool((norms == 0).any()):
        raise ValueError("zero-norm semantic projection (cosine undefined)")
    cos_t = F.cosine_similarity(m, ot, dim=-1)
    cos_f = F.cosine_similarity(m, of, dim=-1)
    return torch.clamp(eta - cos_t + cos_f, min=0.0).mean()


def aggregate_teacher(teacher_dists: torch.Tensor, strategy: AggregationStrategy):
    """Aggregate per-crop teacher distributions.

    Returns a single distribution (single average soft), a hard class index
    (single average hard / single majority hard), or the input unchanged
    (pair-wise strategies).
    """
    if teacher_dists.dim() != 2 or teacher_dists.shape[0] == 0:
        raise ValueError("teacher_dists must be a non-empty (T, C) tensor")
    td = teacher_dists.detach()
    if strategy in (AggregationStrategy.PAIRWISE_AVERAGE_SOFT,
                    AggregationStrategy.PAIRWISE_AVERAGE_HARD):
        return td
    if strategy == AggregationStrategy.SINGLE_AVERAGE_SOFT:
        return td.mean(dim=0)
    if strategy == AggregationStrategy.SINGLE_AVERAGE_HARD:
        return _first_argmax(td.mean(dim=0))
    # single majority hard: majority over per-crop argmaxes, smallest index on ties
    n_classes = td.shape[1]
    votes = torch.zeros(n_classes, dtype=torch.long)
    for row in td:
        votes[_first_argmax(row)] += 1
    return _first_argmax(votes.to(td.dtype))


def multicrop_pl_loss(student_dists: torch.Tensor, teacher_dists: torch.Tensor,
                      strategy: AggregationStrategy) -> torch.Tensor:
    """Per-image multi-crop pseudo-label loss; teacher targets carry no gradient."""
    if student_dists.dim() != 2 or student_dists.shape[0] == 0:
        raise ValueError("student_dists must be a non-empty (S, C) tensor")
    if teacher_dists.dim() != 2 or teacher_dists.shape[0] == 0:
        raise ValueError("teacher_dists must be a non-empty (T, C) tensor")
    td = teacher_dists.detach()
    log_s = torch.log(student_dists.clamp_min(LOG_CLAMP))
    if strategy in (AggregationStrategy.PAIRWISE_AVERAGE_SOFT,
                    AggregationStrategy.PAIRWISE_AVERAGE_HARD):
        if strategy == AggregationStrategy.PAIRWISE_AVERAGE_HARD:
            idx = torch.argmax(td, dim=1)  # first max on ties
            td = torch.zeros_like(td)
            td[torch.arange(td.shape[0]), idx] = 1.0
        # mean over all |S| x |T| pairs of -p_t . log p_s
        return -(td.unsqueeze(0) * log_s.unsqueeze(1)).sum(-1).mean()
    target = aggregate_teacher(td, strategy)
    if isinstance(target, int):
        target = _one_hot_like(td[0], target)
    return -(target.unsqueeze(0) * log_s).sum(-1).mean()


def self_distillation_loss(student_ssl_logits: torch.Tensor,
                           teacher_ssl_logits: torch.Tensor,
                           tau_s: float, tau_t: float,
                           center: torch.Tensor,
                           student_ids=None, teacher_ids=None) -> torch.Tensor:
    """Mean CE between centered/sharpened teacher and student view distributions.

    Pairs with identical crop identity (when ids are given) are skipped.
    """
    if tau_s <= 0 or tau_t <= 0:
        raise ValueError("temperatures must be positive")
    if student_ssl_logits.dim() != 2 or teacher_ssl_logits.dim() != 2:
        raise ValueError("ssl logits must be (views, c) tensors")
    t_dists = temperature_softmax(teacher_ssl_logits.detach() - center.detach(), tau_t)
    log_s = F.log_softmax(student_ssl_logits / tau_s, dim=-1)
    pair_ce = -(t_dists.unsqueeze(1) * log_s.unsqueeze(0)).sum(-1)  # (T, S)
    if student_ids is not None and teacher_ids is not None:
        mask = torch.tensor([[tid != sid for sid in student_ids] for tid in teacher_ids],
                            dtype=torch.bool)
        if not bool(mask.any()):
            raise ValueError("no valid teacher/student view pairs")
        return pair_ce[mask].mean()
    return pair_ce.mean()


@dataclass
class ImageForward:
    """Raw per-image forward outputs consumed by total_loss.

    Classifier logits are pre-temperature; temperatures are applied inside the
    loss composition. `large_student_idx` indexes the large crops among the
    student views (hinge and classification losses use large crops only).
    """

    labelled: bool
    label_index: int | None
    student_class_logits: torch.Tensor          # (S, C)
    teacher_class_logits: torch.Tensor          # (T, C)
    large_student_idx: list[int]
    student_sem: torch.Tensor | None = None     # (n_large, d)
    omega_true: torch.Tensor | None = None      # (d,)
    omega_false: torch.Tensor | None = None     # (d,)
    student_ssl_logits: torch.Tensor | None = None
    teacher_ssl_logits: torch.Tensor | None = None
    pl_eligible: bool | None = None             # defaults to `not labelled`


def total_loss(items: list[ImageForward], weights: LossWeights,
               strategy: AggregationStrategy, eta: float,
               tau_s: float, tau_t: float,
               center: torch.Tensor | None = None):
    """Weighted sum w_ssl*L_ssl + w_sem*L_sem + w_pl*L_pl + w_cls*L_cls.

    Returns (total, breakdown) where breakdown maps each term name to a float
    (0.0 when the term had no eligible instances or zero weight).
    """
    weights.validate()
    if weights.w_ssl == weights.w_sem == weights.w_pl == weights.w_cls == 0.0:
        raise ValueError("all loss weights are zero")
    if weights.w_ssl > 0 and center is None:
        raise ValueError("self-distillation term requires a center vector")
    if not items:
        raise ValueError("empty batch")

    sem_terms, cls_terms, pl_terms, ssl_terms = [], [], [], []
    for item in items:
        pl_on = item.pl_eligible if item.pl_eligible is not None else not item.labelled
        if weights.w_sem > 0 and item.labelled:
            sem_terms.append(semantic_hinge_loss(
                item.student_sem, item.omega_true, item.omega_false, eta))
        if weights.w_cls > 0 and item.labelled:
            p_large = temperature_softmax(
                item.student_class_logits[item.large_student_idx], tau_s)
            target = torch.zeros_like(p_large)
            target[:, item.label_index] = 1.0
            cls_terms.append(cross_entropy(target, p_large).mean())
        if weights.w_pl > 0 and pl_on:
            p_s = temperature_softmax(item.student_class_logits, tau_s)
            p_t = temperature_softmax(item.teacher_class_logits.detach(), tau_t)
            pl_terms.append(multicrop_pl_loss(p_s, p_t, strategy))
        if weights.w_ssl > 0 and item.student_ssl_logits is not None \
                and item.teacher_ssl_logits is not None:
            ssl_terms.append(self_distillation_loss(
                item.student_ssl_logits, item.teacher_ssl_logits,
                tau_s, tau_t, center))

    def _mean(terms, ref: torch.Tensor) -> torch.Tensor:
        if not terms:
            return torch.zeros((), dtype=ref.dtype)
        return torch.stack(terms).mean()

    ref = items[0].student_class_logits
    l_sem = _mean(sem_terms, ref)
    l_cls = _mean(cls_terms, ref)
    l_pl = _mean(pl_terms, ref)
    l_ssl = _mean(ssl_terms, ref)
    total = (weights.w_ssl * l_ssl + weights.w_sem * l_sem
             + weights.w_pl * l_pl + weights.w_cls * l_cls)
    breakdown = {
        "L_ssl": float(l_ssl.detach()), "L_sem": float(l_sem.detach()),
        "L_pl": float(l_pl.detach()), "L_cls": float(l_cls.detach()),
        "total": float(total.detach()),
    }
    return total, breakdown
