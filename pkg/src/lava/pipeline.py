"""Staged training pipeline: source pretraining, target adaptation, transfer,
evaluation, episodic evaluation, and analysis. Every stage is a deterministic
function of (config, checkpoint, seed).
"""

from __future__ import annotations

import copy
import csv
import hashlib
import math
import os

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .config import RunConfig, write_resolved
from .data import (CompositeSpec, DatasetManifest, GLYPH_NAMES, ManifestItem,
                   generate_composite_dataset, item_image, load_dataset,
                   make_ssl_split, save_dataset)
from .errors import ConfigurationError, DataError
from .evaluation import (FeatureBank, compute_features, collapse_fraction,
                         disagreement_rate, evaluate, oracle_label,
                         oracle_pseudo_label_accuracy, rank_by_disagreement,
                         run_episodes, sample_episode, write_oracle_csv)
from .losses import ImageForward, LossWeights, total_loss
from .models import (Schedule, StackConfig, TeacherStudentPair, ema_update,
                     temperature_softmax, update_center)
from .semantics import (LabelEmbeddingTable, load_embeddings, sample_negative,
                        save_embeddings, synthesize_embeddings)
from .views import CropConfig, ViewSet, generate_views


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary hashable parts."""
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


def _rng(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


class ImageCache:
    """Avoid re-decoding PNGs every epoch."""

    def __init__(self, root: str | None):
        self.root = root
        self._cache: dict[str, np.ndarray] = {}

    def get(self, item: ManifestItem) -> np.ndarray:
        if item.image is not None:
            return item.image
        if item.key not in self._cache:
            self._cache[item.key] = item_image(item, self.root)
        return self._cache[item.key]


def _stack_views(views: list[np.ndarray], dtype) -> torch.Tensor:
    arr = np.stack(views)
    return torch.from_numpy(arr).permute(0, 3, 1, 2).to(dtype)


def _forward_grouped(stack, viewsets: list[list[np.ndarray]], dtype, no_grad: bool):
    """Forward a ragged list of per-image view lists with one pass per view size.

    Returns per-image dicts of stacked (z, q, m, logits, ssl) rows in view order.
    """
    # Group flat view indices by spatial size.
    flat = []  # (img_idx, view_idx, array)
    for i, views in enumerate(viewsets):
        for j, v in enumerate(views):
            flat.append((i, j, v))
    by_size: dict[int, list[int]] = {}
    for fi, (_, _, v) in enumerate(flat):
        by_size.setdefault(v.shape[0], []).append(fi)
    outputs: list[tuple | None] = [None] * len(flat)
    ctx = torch.no_grad() if no_grad else torch.enable_grad()
    with ctx:
        for size, indices in sorted(by_size.items()):
            batch = _stack_views([flat[fi][2] for fi in indices], dtype)
            z, q, m, logits, ssl = stack.forward_raw(batch)
            for row, fi in enumerate(indices):
                outputs[fi] = (z[row], q[row], m[row], logits[row], ssl[row])
    per_image = []
    cursor = 0
    for views in viewsets:
        n = len(views)
        rows = outputs[cursor:cursor + n]
        cursor += n
        per_image.append({
            "m": torch.stack([r[2] for r in rows]) if n else None,
            "logits": torch.stack([r[3] for r in rows]) if n else None,
            "ssl": torch.stack([r[4] for r in rows]) if n else None,
        })
    return per_image


def _optimizer_entries(opt: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    entries: dict[str, np.ndarray] = {}
    params = opt.param_groups[0]["params"]
    for i, p in enumerate(params):
        state = opt.state.get(p)
        if not state:
            continue
        entries[f"opt/{i}/step"] = np.array(float(state["step"]), dtype="<f8")
        entries[f"opt/{i}/exp_avg"] = state["exp_avg"].numpy().astype("<f8")
        entries[f"opt/{i}/exp_avg_sq"] = state["exp_avg_sq"].numpy().astype("<f8")
    return entries


def _restore_optimizer(opt: torch.optim.Optimizer, entries: dict[str, np.ndarray]) -> None:
    params = opt.param_groups[0]["params"]
    for i, p in enumerate(params):
        key = f"opt/{i}/step"
        if key not in entries:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(entries[key])),
            "exp_avg": torch.from_numpy(entries[f"opt/{i}/exp_avg"].copy()).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(
                entries[f"opt/{i}/exp_avg_sq"].copy()).to(p.dtype),
        }


def train_loop(pair: TeacherStudentPair, cfg: RunConfig, *,
               primary_items: list[ManifestItem],
               labelled_items: list[ManifestItem],
               weights: LossWeights,
               table: LabelEmbeddingTable | None,
               class_list: list[str],
               epochs: int,
               csv_path: str | None = None,
               image_root: str | None = None,
               support_as_unlabelled: bool = False,
               start_step: int = 0,
               opt_entries: dict[str, np.ndarray] | None = None,
               seed_tag: str = "train") -> dict[str, np.ndarray]:
    """Shared gradient-descent loop. Returns optimizer-state entries for resuming.

    One epoch is one pass over `primary_items`; labelled items additionally join
    every batch when the semantic or classification terms are active.
    """
    torch.set_num_threads(1)
    if epochs <= 0 or not primary_items:
        return dict(opt_entries or {})
    strategy = cfg.loss.aggregation()
    dtype = next(pair.student.parameters()).dtype
    cache = ImageCache(image_root)

    n = len(primary_items)
    bs = min(cfg.train.batch_size, n)
    steps_per_epoch = math.ceil(n / bs)
    total_steps = epochs * steps_per_epoch

    lr0 = cfg.train.learning_rate
    warmup = min(cfg.train.warmup_epochs * steps_per_epoch, max(total_steps - 1, 0))
    lr_sched = (Schedule("warmup-cosine", lr0, lr0 * 1e-3, total_steps, warmup)
                if warmup > 0 else Schedule("cosine", lr0, lr0 * 1e-3, total_steps))
    wd_sched = Schedule("cosine", cfg.train.weight_decay_start,
                        cfg.train.weight_decay_end, total_steps)
    gamma_sched = Schedule("cosine", cfg.train.momentum_start,
                           cfg.train.momentum_end, total_steps)
    temp_warm_steps = cfg.train.teacher_temp_warmup_epochs * steps_per_epoch

    def tau_t_at(step: int) -> float:
        if cfg.train.warmup_teacher_temp and temp_warm_steps > 0 and step < temp_warm_steps:
            t0 = cfg.train.teacher_temp_start
            return t0 + (cfg.train.tau_t - t0) * step / temp_warm_steps
        return cfg.train.tau_t

    params = [p for p in pair.student.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=lr0, weight_decay=0.0)
    if opt_entries:
        _restore_optimizer(opt, opt_entries)

    needs_teacher = weights.w_pl > 0 or weights.w_ssl > 0
    uses_labels = weights.w_sem > 0 or weights.w_cls > 0
    class_idx = {c: i for i, c in enumerate(class_list)}

    writer = None
    csv_file = None
    if csv_path is not None:
        mode = "a" if start_step > 0 and os.path.exists(csv_path) else "w"
        csv_file = open(csv_path, mode, newline="")
        writer = csv.writer(csv_file)
        if mode == "w":
            writer.writerow(["step", "L_ssl", "L_sem", "L_pl", "L_cls", "total",
                             "gamma", "tau_t", "lr"])

    end_step = total_steps if cfg.train.max_steps <= 0 \
        else min(total_steps, cfg.train.max_steps)
    perm_cache: tuple[int, np.ndarray] | None = None
    try:
        for step in range(start_step, end_step):
            epoch, b = divmod(step, steps_per_epoch)
            if perm_cache is None or perm_cache[0] != epoch:
                perm = _rng(cfg.seed, seed_tag, "perm", epoch).permutation(n)
                perm_cache = (epoch, perm)
            batch_idx = perm_cache[1][b * bs:(b + 1) * bs]
            batch = [primary_items[i] for i in batch_idx]
            batch_keys = {it.key for it in batch}
            if uses_labels and labelled_items:
                lab_pool = [it for it in labelled_items if it.key not in batch_keys]
                k = min(cfg.train.labelled_per_batch, len(lab_pool))
                if k:
                    sel = _rng(cfg.seed, seed_tag, "lab", step).choice(
                        len(lab_pool), size=k, replace=False)
                    batch = batch + [lab_pool[i] for i in sel]

            viewsets: list[ViewSet] = []
            for it in batch:
                vseed = derive_seed(cfg.seed, seed_tag, "views", epoch, it.key)
                viewsets.append(generate_views(cache.get(it), cfg.crops, vseed))

            student_out = _forward_grouped(
                pair.student, [vs.student_views for vs in viewsets], dtype, False)
            teacher_out = None
            if needs_teacher:
                teacher_out = _forward_grouped(
                    pair.teacher, [vs.teacher_views for vs in viewsets], dtype, True)

            tau_t = tau_t_at(step)
            items_fw: list[ImageForward] = []
            teacher_ssl_rows = []
            for bi, it in enumerate(batch):
                labelled = it.label is not None
                n_large = sum(1 for mt in viewsets[bi].student_meta
                              if mt.size_class == "large")
                large_idx = list(range(n_large))
                omega_t = omega_f = sem = None
                label_index = None
                if labelled and uses_labels:
                    label_index = class_idx[it.label]
                    if weights.w_sem > 0:
                        if table is None:
                            raise ConfigurationError(
                                "semantic loss requires an embedding table")
                        neg = sample_negative(
                            it.label, table,
                            _rng(cfg.seed, seed_tag, "neg", step, it.key))
                        omega_t = torch.from_numpy(table.get(it.label)).to(dtype)
                        omega_f = torch.from_numpy(table.get(neg)).to(dtype)
                        sem = student_out[bi]["m"][large_idx]
                t_logits = (teacher_out[bi]["logits"]
                            if teacher_out is not None else
                            student_out[bi]["logits"][:1].detach())
                items_fw.append(ImageForward(
                    labelled=labelled,
                    label_index=label_index,
                    student_class_logits=student_out[bi]["logits"],
                    teacher_class_logits=t_logits,
                    large_student_idx=large_idx,
                    student_sem=sem,
                    omega_true=omega_t,
                    omega_false=omega_f,
                    student_ssl_logits=(student_out[bi]["ssl"]
                                        if weights.w_ssl > 0 else None),
                    teacher_ssl_logits=(teacher_out[bi]["ssl"]
                                        if weights.w_ssl > 0 and teacher_out else None),
                    pl_eligible=(not labelled) or support_as_unlabelled,
                ))
                if weights.w_ssl > 0 and teacher_out is not None:
                    teacher_ssl_rows.append(teacher_out[bi]["ssl"])

            loss, breakdown = total_loss(items_fw, weights, strategy,
                                         cfg.loss.eta, cfg.train.tau_s, tau_t,
                                         pair.center)
            lr = lr_sched.value(step)
            wd = wd_sched.value(step)
            for group in opt.param_groups:
                group["lr"] = lr
                group["weight_decay"] = wd
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, cfg.train.grad_clip)
            opt.step()

            gamma = gamma_sched.value(step + 1)
            ema_update(pair, gamma)
            if weights.w_ssl > 0 and teacher_ssl_rows:
                update_center(pair, torch.cat(teacher_ssl_rows, dim=0),
                              cfg.train.center_momentum)
            pair.step += 1

            if writer is not None:
                writer.writerow([step] + [f"{breakdown[k]:.10g}" for k in
                                          ("L_ssl", "L_sem", "L_pl", "L_cls", "total")]
                                + [f"{gamma:.10g}", f"{tau_t:.10g}", f"{lr:.10g}"])
    finally:
        if csv_file is not None:
            csv_file.close()
    return _optimizer_entries(opt)


# ---------------------------------------------------------------------------
# Stage implementations
# ---------------------------------------------------------------------------

def _stack_config(cfg: RunConfig, n_classes: int, semantic_dim: int) -> StackConfig:
    m = cfg.model
    return StackConfig(n_classes=n_classes, in_channels=m.in_channels,
                       feature_dim=m.feature_dim, projection_dim=m.projection_dim,
                       semantic_dim=semantic_dim, ssl_dim=m.ssl_dim,
                       hidden_dim=m.hidden_dim)


def _load_table(cfg: RunConfig) -> LabelEmbeddingTable | None:
    if not cfg.data.embeddings:
        return None
    return load_embeddings(cfg.data.embeddings)


def _load_target(cfg: RunConfig) -> DatasetManifest:
    if not cfg.data.root:
        raise ConfigurationError("data.root is required for this stage")
    manifest = load_dataset(cfg.data.root)
    if cfg.data.shots_per_class > 0:
        manifest = make_ssl_split(manifest, cfg.data.shots_per_class, cfg.seed)
    return manifest


def _train_pool(manifest: DatasetManifest) -> list[ManifestItem]:
    return manifest.by_split("labelled") + manifest.by_split("unlabelled")


def _save_stage(cfg: RunConfig, pair: TeacherStudentPair, name: str,
                schedule_positions: dict[str, int] | None = None,
                extra: dict[str, np.ndarray] | None = None) -> str:
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, name)
    ckpt_io.save_pair(path, pair, schedule_positions, extra)
    write_resolved(cfg, os.path.join(cfg.out_dir, "resolved_config.txt"))
    return path


def stage_synth(cfg: RunConfig) -> str:
    """Generate a composite dataset plus synthesized embeddings under out_dir."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    names = GLYPH_NAMES[:cfg.synth.n_classes]
    spec = CompositeSpec(class_names=names,
                         objects_per_image=2 if cfg.synth.dual_fraction > 0 else 1,
                         dual_fraction=cfg.synth.dual_fraction,
                         noise_level=cfg.synth.noise_level,
                         domain=cfg.synth.domain, seed=cfg.seed)
    manifest = generate_composite_dataset(spec, cfg.synth.n_per_class)
    n_val = int(cfg.synth.n_per_class * cfg.synth.validation_fraction)
    if n_val:
        per_class_count: dict[str, int] = {}
        for item in manifest.items:
            c = per_class_count.get(item._true_class, 0)
            per_class_count[item._true_class] = c + 1
            if c >= cfg.synth.n_per_class - n_val:
                item.split = "validation"
    dataset_dir = os.path.join(cfg.out_dir, "dataset")
    save_dataset(manifest, dataset_dir)
    table = synthesize_embeddings(list(names), cfg.synth.embedding_dim, cfg.seed)
    save_embeddings(table, os.path.join(cfg.out_dir, "embeddings.txt"))
    write_resolved(cfg, os.path.join(cfg.out_dir, "resolved_config.txt"))
    return dataset_dir


def stage_pretrain(cfg: RunConfig) -> str:
    """Phase 1: self-distillation on the source images. Phase 2: fit the semantic
    head on frozen representations with the hinge loss."""
    root = cfg.data.source_root or cfg.data.root
    if not root:
        raise ConfigurationError("pretrain requires data.source_root or data.root")
    manifest = load_dataset(root)
    table = _load_table(cfg)
    if table is None and cfg.train.phase2_epochs > 0:
        raise ConfigurationError(
            "pretrain phase 2 fits the semantic head and requires data.embeddings")
    semantic_dim = table.dim if table is not None else cfg.model.semantic_dim
    pair = TeacherStudentPair.create(
        _stack_config(cfg, len(manifest.classes), semantic_dim),
        seed=derive_seed(cfg.seed, "init"))

    pool = _train_pool(manifest)
    _ensure_out(cfg)
    opt_entries = train_loop(
        pair, cfg, primary_items=pool, labelled_items=[],
        weights=LossWeights(1.0, 0.0, 0.0, 0.0), table=table,
        class_list=manifest.classes, epochs=cfg.train.epochs,
        csv_path=os.path.join(cfg.out_dir, "loss_pretrain.csv"),
        image_root=manifest.root, seed_tag="pretrain1")

    labelled = [it for it in pool if it.label is not None]
    if cfg.train.phase2_epochs > 0 and labelled:
        for module in (pair.student.backbone, pair.student.projection,
                       pair.student.ssl_head, pair.student.classifier):
            module.requires_grad_(False)
        train_loop(
            pair, cfg, primary_items=labelled, labelled_items=labelled,
            weights=LossWeights(0.0, 1.0, 0.0, 0.0), table=table,
            class_list=manifest.classes, epochs=cfg.train.phase2_epochs,
            csv_path=os.path.join(cfg.out_dir, "loss_pretrain_phase2.csv"),
            image_root=manifest.root, seed_tag="pretrain2")
        pair.student.requires_grad_(True)
        pair.teacher.requires_grad_(False)
    return _save_stage(cfg, pair, "pretrain.ckpt", {"pretrain_step": pair.step},
                       opt_entries)


def _ensure_out(cfg: RunConfig) -> bool:
    os.makedirs(cfg.out_dir, exist_ok=True)
    return True


def check_adapt_checkpoint(path: str) -> None:
    """Adaptation needs backbone + projection + self-distillation head weights."""
    entries = ckpt_io.read_entries(path)
    for part, label in (("backbone", "backbone"), ("projection", "projection MLP"),
                        ("ssl_head", "self-distillation head")):
        if not any(k.startswith(f"student/{part}.") for k in entries):
            raise ConfigurationError(
                f"checkpoint {path} is missing the {label}; adaptation requires "
                "loading backbone, projection MLP, and self-distillation head together")


def stage_adapt(cfg: RunConfig, checkpoint_path: str) -> str:
    """Self-distillation fine-tuning on target unlabelled data."""
    check_adapt_checkpoint(checkpoint_path)
    pair, _, _ = ckpt_io.load_pair(checkpoint_path)
    manifest = _load_target(cfg)
    pool = manifest.by_split("unlabelled") or _train_pool(manifest)
    _ensure_out(cfg)
    train_loop(pair, cfg, primary_items=pool, labelled_items=[],
               weights=LossWeights(1.0, 0.0, 0.0, 0.0), table=None,
               class_list=manifest.classes, epochs=cfg.train.epochs,
               csv_path=os.path.join(cfg.out_dir, "loss_adapt.csv"),
               image_root=manifest.root, seed_tag="adapt")
    return _save_stage(cfg, pair, "adapt.ckpt", {"adapt_step": pair.step})


def stage_transfer(cfg: RunConfig, checkpoint_path: str,
                   resume_path: str | None = None) -> str:
    """Full training on the target: hinge on labelled, multi-crop pseudo-label
    loss on unlabelled, classifier re-initialized for the target classes."""
    manifest = _load_target(cfg)
    table = _load_table(cfg)
    if table is not None and (cfg.loss.w_sem > 0):
        missing = [c for c in manifest.classes if c not in table]
        if missing:
            raise ConfigurationError(
                f"classes missing from embedding table: {missing}")
    if cfg.loss.w_sem > 0 and table is None:
        raise ConfigurationError("transfer with semantic loss requires data.embeddings")

    start_step = 0
    opt_entries: dict[str, np.ndarray] = {}
    if resume_path:
        pair, sched, extra = ckpt_io.load_pair(resume_path)
        start_step = sched.get("transfer_step", 0)
        opt_entries = {k: v for k, v in extra.items() if k.startswith("opt/")}
    else:
        pair, _, _ = ckpt_io.load_pair(checkpoint_path)
        pair.student.reinit_classifier(len(manifest.classes),
                                       derive_seed(cfg.seed, "classifier"))
        pair.teacher.reinit_classifier(len(manifest.classes),
                                       derive_seed(cfg.seed, "classifier"))
        pair.teacher.requires_grad_(False)

    labelled = manifest.by_split("labelled")
    unlabelled = manifest.by_split("unlabelled")
    primary = unlabelled or labelled
    _ensure_out(cfg)
    opt_entries = train_loop(
        pair, cfg, primary_items=primary, labelled_items=labelled,
        weights=cfg.loss.weights(), table=table, class_list=manifest.classes,
        epochs=cfg.train.epochs,
        csv_path=os.path.join(cfg.out_dir, "loss_transfer.csv"),
        image_root=manifest.root,
        support_as_unlabelled=not unlabelled,
        start_step=start_step, opt_entries=opt_entries, seed_tag="transfer")
    n = len(primary)
    steps_per_epoch = math.ceil(n / min(cfg.train.batch_size, n)) if n else 1
    total_steps = cfg.train.epochs * steps_per_epoch
    end_step = total_steps if cfg.train.max_steps <= 0 \
        else min(total_steps, cfg.train.max_steps)
    return _save_stage(cfg, pair, "transfer.ckpt",
                       {"transfer_step": end_step}, opt_entries)


def build_feature_bank(stack, items: list[ManifestItem], class_list: list[str],
                       root: str | None, source_tags=None) -> FeatureBank:
    z, _, _ = compute_features(stack, items, root=root)
    labels = np.array([class_list.index(oracle_label(it)) for it in items])
    return FeatureBank(vectors=z, labels=labels,
                       source_tags=None if source_tags is None
                       else np.asarray(source_tags, dtype=bool))


def stage_eval(cfg: RunConfig, checkpoint_path: str) -> dict[str, float]:
    pair, _, _ = ckpt_io.load_pair(checkpoint_path)
    manifest = _load_target(cfg)
    table = _load_table(cfg)
    if table is None:
        raise ConfigurationError("eval requires data.embeddings")
    labelled = manifest.by_split("labelled")
    eval_items = manifest.by_split("validation") or manifest.by_split("test") or labelled
    if not labelled:
        raise DataError("eval needs a labelled split to build the feature bank")
    bank = build_feature_bank(pair.teacher, labelled, manifest.classes, manifest.root)
    k = min(cfg.eval.knn_k, len(bank))
    results = evaluate(pair.teacher, eval_items, manifest.classes, table, bank,
                       root=manifest.root, k=k, tau=cfg.train.tau_s)
    _ensure_out(cfg)
    with open(os.path.join(cfg.out_dir, "eval.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "value"])
        for key in ("softmax_acc", "knn_acc", "semantic_acc"):
            writer.writerow([key, f"{results[key]:.10g}"])
    with open(os.path.join(cfg.out_dir, "summary.txt"), "w") as f:
        f.write("".join(f"{key}: {results[key]:.4f}\n" for key in sorted(results)))
    write_resolved(cfg, os.path.join(cfg.out_dir, "resolved_config.txt"))
    return results


def run_fsl_episode(base_pair: TeacherStudentPair, episode, cfg: RunConfig,
                    table: LabelEmbeddingTable | None, seed: int,
                    image_root: str | None = None) -> dict:
    """Fine-tune a copy of the pair on the support set (frozen backbone) and
    return query accuracies."""
    pair = copy.deepcopy(base_pair)
    classes = episode.classes
    pair.student.reinit_classifier(len(classes), derive_seed(seed, "clf"))
    pair.teacher.reinit_classifier(len(classes), derive_seed(seed, "clf"))
    pair.teacher.requires_grad_(False)
    pair.student.backbone.requires_grad_(False)

    ep_cfg = copy.deepcopy(cfg)
    ep_cfg.seed = seed
    train_loop(pair, ep_cfg, primary_items=episode.support,
               labelled_items=episode.support, weights=cfg.loss.weights(),
               table=table, class_list=classes, epochs=cfg.eval.fsl_epochs,
               csv_path=None, image_root=image_root,
               support_as_unlabelled=True, seed_tag=f"episode{seed}")

    z, m, pred = compute_features(pair.teacher, episode.query, root=image_root,
                                  tau=cfg.train.tau_s)
    y_true = np.array([classes.index(it.label) for it in episode.query])
    accuracy = float((pred == y_true).mean())
    result = {"accuracy": accuracy, "ways": len(classes),
              "total_shots": len(episode.support)}
    if table is not None and all(c in table for c in classes):
        sub = LabelEmbeddingTable(
            names=list(classes),
            vectors=np.stack([table.get(c) for c in classes]),
            provenance="episode")
        from .semantics import semantic_classify
        sem_pred = np.array([classes.index(semantic_classify(m[i], sub)[0])
                             for i in range(len(episode.query))])
        result["semantic_accuracy"] = float((sem_pred == y_true).mean())
    return result


def stage_episodes(cfg: RunConfig, checkpoint_path: str):
    pair, _, _ = ckpt_io.load_pair(checkpoint_path)
    manifest = _load_target(cfg)
    table = _load_table(cfg)
    split = cfg.eval.episode_split
    if not manifest.by_split(split):
        raise DataError(f"no items in episode split {split!r}")

    def sampler(i: int):
        return sample_episode(manifest, _rng(cfg.seed, "episode", i),
                              ways_range=(cfg.eval.ways_min, cfg.eval.ways_max),
                              shots_range=(cfg.eval.shots_min, cfg.eval.shots_max),
                              n_query=cfg.eval.n_query, split=split, seed=i)

    def builder(episode, seed):
        return run_fsl_episode(pair, episode, cfg, table, seed,
                               image_root=manifest.root)

    report = run_episodes(builder, sampler, cfg.eval.n_episodes, base_seed=cfg.seed)
    _ensure_out(cfg)
    with open(os.path.join(cfg.out_dir, "episodes.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["episode_id", "ways", "total_shots", "accuracy",
                         "semantic_accuracy"])
        for i, det in enumerate(report.details):
            writer.writerow([i, det.get("ways", ""), det.get("total_shots", ""),
                             f"{det['accuracy']:.10g}",
                             f"{det.get('semantic_accuracy', float('nan')):.10g}"])
    with open(os.path.join(cfg.out_dir, "summary.txt"), "w") as f:
        f.write(f"episodes: {len(report.accuracies)}\n")
        f.write(f"mean_accuracy: {report.mean:.4f}\n")
        f.write(f"ci95: {report.ci95:.4f}\n")
    write_resolved(cfg, os.path.join(cfg.out_dir, "resolved_config.txt"))
    return report


def teacher_large_crop_predictions(pair: TeacherStudentPair, items, cfg: RunConfig,
                                   image_root: str | None, n_iterations: int = 3,
                                   seed_tag: str = "analyze"):
    """Per-image, per-iteration argmax pseudo-labels of the teacher's large crops."""
    records: dict[str, list[list[int]]] = {}
    dtype = next(pair.teacher.parameters()).dtype
    cache = ImageCache(image_root)
    for it in items:
        rows = []
        for r in range(n_iterations):
            vseed = derive_seed(cfg.seed, seed_tag, "views", r, it.key)
            vs = generate_views(cache.get(it), cfg.crops, vseed)
            large = [v for v, mt in zip(vs.teacher_views, vs.teacher_meta)
                     if mt.size_class == "large"]
            with torch.no_grad():
                x = _stack_views(large, dtype)
                _, _, _, logits, _ = pair.teacher.forward_raw(x)
            rows.append(torch.argmax(logits, dim=1).tolist())
        records[it.key] = rows
    return records


def stage_analyze(cfg: RunConfig, checkpoint_path: str) -> dict:
    pair, _, _ = ckpt_io.load_pair(checkpoint_path)
    manifest = _load_target(cfg)
    _ensure_out(cfg)
    items = manifest.by_split("unlabelled") or _train_pool(manifest)

    records = teacher_large_crop_predictions(pair, items, cfg, manifest.root)
    ranking = rank_by_disagreement(records)
    dual_by_key = {it.key: it.is_dual for it in items}
    with open(os.path.join(cfg.out_dir, "disagreement.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["image", "mean_disagreement", "is_dual"])
        for key, rate in ranking:
            writer.writerow([key, f"{rate:.10g}", int(dual_by_key.get(key, False))])

    # One-pass oracle accuracy of teacher large-crop pseudo-labels.
    hidden = np.array([manifest.classes.index(oracle_label(it)) for it in items])
    preds = np.array([[records[it.key][0]] for it in items]).transpose(1, 0, 2)
    slot_names = [f"teacher_large_{i}" for i in range(preds.shape[2])]
    acc, disagreement = oracle_pseudo_label_accuracy(
        hidden, preds, slot_groups={"large": list(range(preds.shape[2]))})
    write_oracle_csv(os.path.join(cfg.out_dir, "oracle.csv"), acc, slot_names,
                     disagreement)

    summary: dict = {"mean_disagreement": float(np.mean([r for _, r in ranking])),
                     "oracle_acc": acc.mean(axis=1).tolist()}
    if cfg.data.source_root:
        source = load_dataset(cfg.data.source_root)
        src_items = _train_pool(source)
        tgt_items = items
        queries = manifest.by_split("validation") or manifest.by_split("test")
        if queries:
            src_z, _, _ = compute_features(pair.teacher, src_items, root=source.root)
            tgt_z, _, _ = compute_features(pair.teacher, tgt_items, root=manifest.root)
            qry_z, _, _ = compute_features(pair.teacher, queries, root=manifest.root)
            bank = FeatureBank(
                vectors=np.concatenate([src_z, tgt_z]),
                labels=np.zeros(len(src_z) + len(tgt_z), dtype=int),
                source_tags=np.array([True] * len(src_z) + [False] * len(tgt_z)))
            fractions = collapse_fraction(qry_z, bank, k=min(10, len(bank)),
                                          per_query=True)
            with open(os.path.join(cfg.out_dir, "collapse.csv"), "w", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(["query_id", "source_fraction"])
                for qi, frac in enumerate(fractions):
                    writer.writerow([queries[qi].key, f"{frac:.10g}"])
            summary["collapse_fraction"] = float(np.mean(fractions))
    with open(os.path.join(cfg.out_dir, "summary.txt"), "w") as f:
        for key, value in summary.items():
            f.write(f"{key}: {value}\n")
    write_resolved(cfg, os.path.join(cfg.out_dir, "resolved_config.txt"))
    return summary
