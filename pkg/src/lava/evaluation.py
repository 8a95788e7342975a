"""Measurement protocols: KNN / softmax / semantic accuracy, episodic evaluation
with confidence intervals, pseudo-label disagreement, and collapse fractions.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import DatasetManifest, ManifestItem, item_image
from .models import ModelStack
from .semantics import LabelEmbeddingTable, semantic_classify

CI_MULTIPLIER = 1.96
DEFAULT_KNN_K = 20
DEFAULT_N_EPISODES = 600


def oracle_label(item: ManifestItem) -> str:
    """Analysis-only access to an item's true class, regardless of split."""
    return item._true_class


@dataclass
class FeatureBank:
    vectors: np.ndarray                  # (N, D)
    labels: np.ndarray                   # (N,) int class ids
    source_tags: np.ndarray | None = None  # (N,) bool, True = source-domain

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.labels.shape[0] != self.vectors.shape[0]:
            raise ValueError("misaligned feature bank")
        if self.source_tags is not None and \
                self.source_tags.shape[0] != self.vectors.shape[0]:
            raise ValueError("misaligned source tags")
        if not np.isfinite(self.vectors).all():
            raise ValueError("feature bank contains non-finite entries")

    def __len__(self) -> int:
        return self.vectors.shape[0]


def _cosine_to_bank(query: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    q = query / max(np.linalg.norm(query), 1e-12)
    norms = np.linalg.norm(vectors, axis=1)
    norms[norms == 0] = 1e-12
    return (vectors @ q) / norms


def knn_classify(query_z: np.ndarray, bank: FeatureBank, k: int) -> int:
    """Majority label among the K nearest by cosine; vote ties resolved by the
    label of the single nearest neighbor among the tied classes."""
    if len(bank) == 0:
        raise ValueError("empty feature bank")
    if k < 1 or k > len(bank):
        raise ValueError(f"k={k} invalid for bank of size {len(bank)}")
    sims = _cosine_to_bank(np.asarray(query_z, dtype=np.float64), bank.vectors)
    order = np.argsort(-sims, kind="stable")[:k]
    top_labels = bank.labels[order]
    counts: dict[int, int] = {}
    for lab in top_labels:
        counts[int(lab)] = counts.get(int(lab), 0) + 1
    best = max(counts.values())
    tied = {lab for lab, c in counts.items() if c == best}
    if len(tied) == 1:
        return tied.pop()
    for lab in top_labels:  # nearest first
        if int(lab) in tied:
            return int(lab)
    raise AssertionError("unreachable")


def compute_features(stack: ModelStack, items: list[ManifestItem],
                     root: str | None = None, tau: float = 0.1,
                     batch_size: int = 256):
    """Teacher-side forward over full images: returns (z, m, class-argmax) arrays."""
    zs, ms, preds = [], [], []
    stack_dtype = next(stack.parameters()).dtype
    with torch.no_grad():
        for i in range(0, len(items), batch_size):
            chunk = items[i:i + batch_size]
            imgs = np.stack([item_image(it, root) for it in chunk])
            x = torch.from_numpy(imgs).permute(0, 3, 1, 2).to(stack_dtype)
            z, q, m, p, _ = stack(x, tau)
            zs.append(z.numpy())
            ms.append(m.numpy())
            preds.append(torch.argmax(p, dim=1).numpy())
    return np.concatenate(zs), np.concatenate(ms), np.concatenate(preds)


def evaluate(stack: ModelStack, items: list[ManifestItem], classes: list[str],
             table: LabelEmbeddingTable, bank: FeatureBank,
             root: str | None = None, k: int = DEFAULT_KNN_K,
             tau: float = 0.1) -> dict[str, float]:
    """Softmax / KNN / semantic accuracy of the given (teacher) stack on labelled items."""
    if not items:
        raise ValueError("empty evaluation dataset")
    for it in items:
        if it.label is None:
            raise ValueError(f"item {it.key} is unlabelled; evaluation needs labels")
        if it.label not in table:
            raise ValueError(f"label {it.label!r} missing from embedding table")
    z, m, pred = compute_features(stack, items, root=root, tau=tau)
    labels = np.array([classes.index(it.label) for it in items])
    softmax_acc = float((pred == labels).mean())
    knn_hits = sum(int(knn_classify(z[i], bank, k) == labels[i]) for i in range(len(items)))
    sem_hits = sum(
        int(semantic_classify(m[i], table)[0] == items[i].label) for i in range(len(items)))
    return {
        "softmax_acc": softmax_acc,
        "knn_acc": knn_hits / len(items),
        "semantic_acc": sem_hits / len(items),
    }


@dataclass
class Episode:
    support: list[ManifestItem]
    query: list[ManifestItem]
    classes: list[str]
    seed: int

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ValueError("episode needs >= 2 ways")
        support_classes = {it.label for it in self.support}
        for it in self.query:
            if it.label not in support_classes:
                raise ValueError(f"query class {it.label!r} missing from support")


def sample_episode(manifest: DatasetManifest, rng: np.random.Generator,
                   ways_range: tuple[int, int] = (2, 5),
                   shots_range: tuple[int, int] = (1, 10),
                   n_query: int = 5, split: str = "test",
                   seed: int = 0) -> Episode:
    """Variable-way, imbalanced-shot episode from a labelled split."""
    pool: dict[str, list[ManifestItem]] = {}
    for it in manifest.by_split(split):
        pool.setdefault(it.label, []).append(it)
    eligible = [c for c, its in pool.items() if len(its) >= shots_range[0] + 1]
    if len(eligible) < ways_range[0]:
        raise ValueError("not enough classes with items to sample an episode")
    ways = int(rng.integers(ways_range[0], min(ways_range[1], len(eligible)) + 1))
    chosen = list(rng.choice(sorted(eligible), size=ways, replace=False))
    support, query = [], []
    for cls in chosen:
        members = pool[cls]
        idx = rng.permutation(len(members))
        shots = int(rng.integers(shots_range[0], shots_range[1] + 1))
        shots = min(shots, len(members) - 1)
        support.extend(members[i] for i in idx[:shots])
        query.extend(members[i] for i in idx[shots:shots + n_query])
    return Episode(support=support, query=query, classes=sorted(chosen), seed=seed)


@dataclass
class EpisodeReport:
    mean: float
    ci95: float
    accuracies: np.ndarray
    details: list[dict] = field(default_factory=list)


def confidence_interval(accuracies: np.ndarray) -> float:
    """1.96 * sample std / sqrt(n)."""
    n = len(accuracies)
    if n < 2:
        raise ValueError("need >= 2 episodes for a confidence interval")
    return CI_MULTIPLIER * float(np.std(accuracies, ddof=1)) / float(np.sqrt(n))


def run_episodes(model_builder, episode_sampler, n_episodes: int,
                 base_seed: int = 0) -> EpisodeReport:
    """Run `n_episodes` independent episodes.

    `episode_sampler(i)` yields the i-th episode; `model_builder(episode, seed)`
    trains a fresh model from the shared snapshot and returns query accuracy
    (optionally a dict with an "accuracy" entry plus extra diagnostics).
    """
    if n_episodes < 2:
        raise ValueError("n_episodes must be >= 2")
    accs, details = [], []
    for i in range(n_episodes):
        try:
            episode = episode_sampler(i)
        except (StopIteration, IndexError) as e:
            raise ValueError(f"episode sampler exhausted at index {i}") from e
        seed = base_seed * 1_000_003 + i
        result = model_builder(episode, seed)
        if isinstance(result, dict):
            accs.append(float(result["accuracy"]))
            details.append(result)
        else:
            accs.append(float(result))
            details.append({"accuracy": float(result)})
    arr = np.array(accs)
    return EpisodeReport(mean=float(arr.mean()), ci95=confidence_interval(arr),
                         accuracies=arr, details=details)


def disagreement_rate(pseudo_labels) -> float:
    """Unique pseudo-label classes divided by the number of crops."""
    labels = list(pseudo_labels)
    if not labels:
        raise ValueError("empty pseudo-label sequence")
    return len(set(labels)) / len(labels)


def rank_by_disagreement(per_image_records: dict) -> list[tuple[object, float]]:
    """Rank images by mean per-iteration crop disagreement, descending.

    `per_image_records[image_id]` is a sequence of iterations, each a sequence of
    crop pseudo-labels. Ties keep image-id order (stable sort by id first).
    """
    rows = []
    for image_id in sorted(per_image_records, key=lambda x: str(x)):
        iterations = per_image_records[image_id]
        if not iterations:
            raise ValueError(f"no recorded iterations for image {image_id!r}")
        mean_rate = float(np.mean([disagreement_rate(it) for it in iterations]))
        rows.append((image_id, mean_rate))
    rows.sort(key=lambda r: -r[1])
    return rows


def collapse_fraction(query_vectors: np.ndarray, mixed_bank: FeatureBank,
                      k: int = 10, per_query: bool = False):
    """Mean fraction of source-tagged entries among each query's K nearest neighbors."""
    if mixed_bank.source_tags is None:
        raise ValueError("mixed bank requires source tags")
    if len(mixed_bank) < k:
        raise ValueError(f"bank of size {len(mixed_bank)} smaller than K={k}")
    if not (mixed_bank.source_tags.any() and (~mixed_bank.source_tags).any()):
        raise ValueError("mixed bank must contain both source and target entries")
    fractions = []
    for q in np.atleast_2d(query_vectors):
        sims = _cosine_to_bank(q, mixed_bank.vectors)
        order = np.argsort(-sims, kind="stable")[:k]
        fractions.append(float(mixed_bank.source_tags[order].mean()))
    fractions = np.array(fractions)
    return fractions if per_query else float(fractions.mean())


def oracle_pseudo_label_accuracy(hidden_labels: np.ndarray, predictions: np.ndarray,
                                 slot_groups: dict[str, list[int]] | None = None):
    """Per-epoch, per-crop-slot pseudo-label accuracy against hidden true labels.

    `predictions` has shape (n_epochs, n_images, n_slots) of class ids. Returns
    (accuracy (n_epochs, n_slots), disagreement {group: (n_epochs,)}).
    """
    predictions = np.asarray(predictions)
    hidden_labels = np.asarray(hidden_labels)
    if predictions.ndim != 3 or predictions.shape[1] != hidden_labels.shape[0]:
        raise ValueError("predictions must be (epochs, images, slots) aligned with labels")
    acc = (predictions == hidden_labels[None, :, None]).mean(axis=1)
    disagreement = {}
    for name, slots in (slot_groups or {}).items():
        grp = predictions[:, :, slots]
        rates = np.array([
            [disagreement_rate(grp[e, i]) for i in range(grp.shape[1])]
            for e in range(grp.shape[0])
        ])
        disagreement[name] = rates.mean(axis=1)
    return acc, disagreement


def write_oracle_csv(path: str, acc: np.ndarray, slot_names: list[str],
                     disagreement: dict[str, np.ndarray]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "crop_slot", "accuracy"])
        for e in range(acc.shape[0]):
            for s, name in enumerate(slot_names):
                writer.writerow([e, name, f"{acc[e, s]:.10g}"])
        for name, series in disagreement.items():
            for e, v in enumerate(series):
                writer.writerow([e, f"disagree_{name}", f"{v:.10g}"])


def episode_class_precision(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    """Macro-averaged per-class precision TP / (TP + FP); classes never predicted
    are skipped from the average."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    precisions = []
    for cls in np.unique(y_pred):
        mask = y_pred == cls
        precisions.append(float((y_true[mask] == cls).mean()))
    return float(np.mean(precisions)) if precisions else 0.0
