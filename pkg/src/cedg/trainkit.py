"""Losses, evaluation metrics, and the training procedures of the pipeline.

Stage 1 (`distill_stage1`) teaches the student trunk to reproduce the
teacher's pooled 64-d features on the common domain, with the shared stem
copied from the teacher and frozen. Stage 3 (`train_stage3`) trains the
compact target-domain classifier on the forged set in three steps: an
enlarged classifier over frozen features, then the trunk under the frozen
classifier, then a fresh compact classifier over the retrained frozen trunk.
`baseline_no_cedg` is the control: the same architecture trained end to end
from random init on the forged set alone.

Every epoch's model selection uses validation AVE (mean per-class error);
ties go to the earliest epoch.
"""
from __future__ import annotations

import csv
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .augment import AugmentConfig, apply_pipeline, color_normalize, hist_equalize
from .domainforge import LabeledDataset
from .errors import ConfigError, DataError, ShapeError
from .models import (
    ModelBundle, Sequential, SpearConfig, build_spearnet, classifier_spec,
)
from .rng import stream
from .tensor import PRESETS, SgdConfig, Tensor, no_grad, sgd_step, zero_grads

# -- losses ---------------------------------------------------------------------

PROB_FLOOR = 1e-12  # clamp for log() of the true-class probability


def _check_labels(labels: np.ndarray, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ShapeError(f"labels must be 1-D, got shape {labels.shape}")
    if len(labels) and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"labels must lie in [0, {k}), got range "
                        f"[{int(labels.min())}, {int(labels.max())}]")
    return labels.astype(np.int64)


def _true_class_prob(probs: Tensor, labels: np.ndarray) -> Tensor:
    if probs.ndim != 2:
        raise ShapeError(f"probabilities must be [N,K], got {probs.shape}")
    n, k = probs.shape
    labels = _check_labels(labels, k)
    if len(labels) != n:
        raise ShapeError(f"{n} probability rows vs {len(labels)} labels")
    onehot = np.zeros((n, k), dtype=np.float32)
    onehot[np.arange(n), labels] = 1.0
    return (probs * Tensor(onehot)).sum(axis=-1)


def cross_entropy(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log of the true-class probability (inputs are already
    probabilities, e.g. softmax outputs). Probabilities are clamped at 1e-12."""
    pt = T.clip_min(_true_class_prob(probs, labels), PROB_FLOOR)
    return -(T.log(pt).mean())


@dataclass(frozen=True)
class FocalConfig:
    gamma: float = 2.0
    class_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.class_weights is not None:
            if any(w < 0 for w in self.class_weights):
                raise ConfigError("class weights must be non-negative")
            object.__setattr__(self, "class_weights", tuple(float(w)
                                                            for w in self.class_weights))


def focal_loss(probs: Tensor, labels: np.ndarray, cfg: FocalConfig = FocalConfig()) -> Tensor:
    """-(1/N) * sum w_t * (1 - p_t)^gamma * log(p_t).

    gamma = 0 and unit weights reduce this exactly to cross_entropy.
    """
    pt = T.clip_min(_true_class_prob(probs, labels), PROB_FLOOR)
    term = T.log(pt)
    if cfg.gamma != 0:
        term = (1.0 - pt) ** cfg.gamma * term
    if cfg.class_weights is not None:
        k = probs.shape[-1]
        if len(cfg.class_weights) != k:
            raise ConfigError(f"{len(cfg.class_weights)} class weights for {k} classes")
        w = np.asarray(cfg.class_weights, dtype=np.float32)[np.asarray(labels, dtype=np.int64)]
        term = term * Tensor(w)
    return -(term.mean())


def category_balancing_weights(counts) -> np.ndarray:
    """Inverse-frequency weights, normalized to sum to 1."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or len(counts) == 0:
        raise DataError(f"counts must be a non-empty vector, got shape {counts.shape}")
    if (counts <= 0).any():
        raise DataError("every category needs a positive sample count")
    inv = 1.0 / counts
    return inv / inv.sum()


# -- evaluation -------------------------------------------------------------------


@dataclass
class EvalResult:
    confusion: np.ndarray          # [K,K] int64, rows = true class
    per_class_acc: np.ndarray      # [K] float, NaN for empty classes
    ave: float                     # 1 - mean per-class accuracy (empty excluded)
    er: float                      # 1 - trace/total


def confusion_matrix(pred: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (labels, pred), 1)
    return cm


def metrics_from_confusion(cm: np.ndarray) -> EvalResult:
    cm = np.asarray(cm, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ShapeError(f"confusion matrix must be square, got {cm.shape}")
    total = cm.sum()
    if total == 0:
        raise DataError("confusion matrix is empty")
    row = cm.sum(axis=1)
    acc = np.full(cm.shape[0], np.nan)
    nonempty = row > 0
    acc[nonempty] = np.diag(cm)[nonempty] / row[nonempty]
    if (~nonempty).any():
        empty = [int(i) for i in np.flatnonzero(~nonempty)]
        warnings.warn(f"classes {empty} have no samples; excluded from AVE")
    ave = 1.0 - float(np.mean(acc[nonempty]))
    er = 1.0 - float(np.trace(cm) / total)
    return EvalResult(confusion=cm, per_class_acc=acc, ave=ave, er=er)


def evaluate_scores(scores: np.ndarray, labels: np.ndarray, k: int) -> EvalResult:
    """Argmax evaluation (ties resolve to the lowest class index)."""
    labels = _check_labels(labels, k)
    pred = np.argmax(scores, axis=-1)
    return metrics_from_confusion(confusion_matrix(pred, labels, k))


def preprocess_plain(images: np.ndarray, means=None, stds=None) -> np.ndarray:
    """Evaluation-path preprocessing: equalize + normalize, no augmentation."""
    kw = {}
    if means is not None:
        kw["means"] = means
    if stds is not None:
        kw["stds"] = stds
    out = np.empty(images.shape, dtype=np.float32)
    for i in range(images.shape[0]):
        out[i] = color_normalize(hist_equalize(images[i]), **kw)
    return out


def _forward_scores(bundle: ModelBundle, x: np.ndarray, head: str,
                    batch_size: int = 256) -> np.ndarray:
    outs = []
    with no_grad():
        for lo in range(0, len(x), batch_size):
            xb = Tensor(x[lo:lo + batch_size])
            b = bundle.forward_base(xb)
            if head == "re":
                s = bundle.forward_re(bundle.forward_mid_pooled(b))
            else:
                kind = bundle.hc_feature_kind()
                feats = (bundle.forward_mid_pooled(b) if kind == "pooled"
                         else bundle.forward_mid_unpooled(b))
                s = bundle.forward_hc(feats)
            outs.append(s.data)
    return np.concatenate(outs, axis=0)


def evaluate(bundle: ModelBundle, ds: LabeledDataset, means=None, stds=None,
             batch_size: int = 256) -> EvalResult:
    """Forward the dataset in inference mode and score the argmax predictions.

    Uses the compact classifier when attached, the pretraining head otherwise.
    """
    head = "hc" if bundle.hc is not None else "re"
    x = preprocess_plain(ds.images, means, stds)
    scores = _forward_scores(bundle, x, head, batch_size)
    return evaluate_scores(scores, ds.labels, len(ds.categories))


# -- epoch records -----------------------------------------------------------------


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_ave: float
    val_er: float


def select_best(records: list[EpochRecord]) -> EpochRecord:
    """Smallest validation AVE; ties go to the earliest epoch."""
    if not records:
        raise DataError("no epoch records to select from")
    return min(records, key=lambda r: (r.val_ave, r.epoch))


def sum_metric(records: list[EpochRecord], first_epoch: int | None = None,
               last_epoch: int | None = None) -> float:
    """(1/EPN) * sum over epochs of (AVE + ER), EPN = number of epochs covered.

    The records must cover [first_epoch, last_epoch] without holes; the bounds
    default to the record range.
    """
    if not records:
        raise DataError("no epoch records to summarize")
    by_epoch = {r.epoch: r for r in records}
    if len(by_epoch) != len(records):
        raise DataError("duplicate epochs in records")
    first = min(by_epoch) if first_epoch is None else first_epoch
    last = max(by_epoch) if last_epoch is None else last_epoch
    if last < first:
        raise ConfigError(f"empty epoch range [{first}, {last}]")
    total = 0.0
    for e in range(first, last + 1):
        if e not in by_epoch:
            raise DataError(f"records missing epoch {e}")
        total += by_epoch[e].val_ave + by_epoch[e].val_er
    return total / (last - first + 1)


def write_records_csv(path, records: list[EpochRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_loss", "val_ave", "val_er"])
        for r in records:
            w.writerow([r.epoch, f"{r.train_loss:.6f}", f"{r.val_ave:.6f}", f"{r.val_er:.6f}"])


def write_summary_json(path, summary: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")


# -- batching ---------------------------------------------------------------------


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield perm[lo:lo + batch_size]


def assemble_batch(images: np.ndarray, idxs: np.ndarray, cfg: AugmentConfig,
                   seed: int, epoch: int, workers: int = 1) -> np.ndarray:
    """Augment one batch. Each sample's stream is keyed by its dataset index,
    so the result is bit-identical for any worker count or batch layout."""
    out = np.empty((len(idxs), 3) + images.shape[2:], dtype=np.float32)

    def work(pos: int) -> None:
        i = int(idxs[pos])
        out[pos] = apply_pipeline(images[i], cfg, stream(seed, "augment", epoch, i))

    if workers <= 1:
        for pos in range(len(idxs)):
            work(pos)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(work, range(len(idxs))))
    return out


def _snapshot(bundle: ModelBundle, sections) -> dict:
    return {s: getattr(bundle, s).snapshot() for s in sections}


def _restore(bundle: ModelBundle, snap: dict) -> None:
    for s, state in snap.items():
        getattr(bundle, s).load_state(state)


# -- teacher pretraining ------------------------------------------------------------


def pretrain_teacher(bundle: ModelBundle, train_ds: LabeledDataset,
                     val_ds: LabeledDataset, cfg: SgdConfig | None = None,
                     epochs: int = 3, seed: int = 0) -> list[EpochRecord]:
    """Supervised pretraining of the full teacher on the common domain.

    Selection keeps the epoch with the lowest validation error rate; the
    bundle ends up holding those weights.
    """
    cfg = cfg or PRESETS["pretrain"]
    if len(train_ds.categories) != bundle.num_classes:
        raise ConfigError(f"teacher head has {bundle.num_classes} classes but the "
                          f"dataset has {len(train_ds.categories)}")
    x_all = preprocess_plain(train_ds.images)
    y_all = train_ds.labels
    val_x = preprocess_plain(val_ds.images)
    params = bundle.params(("base", "mid", "re"))
    records: list[EpochRecord] = []
    best_er = None
    best_snap = None
    for epoch in range(epochs):
        rng = stream(seed, "pretrain-shuffle", epoch)
        losses = []
        for idx in _epoch_batches(len(y_all), cfg.batch_size, rng):
            xb = Tensor(x_all[idx])
            b = bundle.forward_base(xb, train=True)
            logits = bundle.forward_re(bundle.forward_mid_pooled(b, train=True), train=True)
            loss = cross_entropy(T.softmax(logits), y_all[idx])
            zero_grads(params)
            loss.backward()
            sgd_step(params, cfg, epoch)
            losses.append(loss.item())
        scores = _forward_scores(bundle, val_x, "re")
        ev = evaluate_scores(scores, val_ds.labels, len(val_ds.categories))
        records.append(EpochRecord(epoch, float(np.mean(losses)), ev.ave, ev.er))
        if best_er is None or ev.er < best_er:
            best_er = ev.er
            best_snap = _snapshot(bundle, ("base", "mid", "re"))
    if best_snap is not None:
        _restore(bundle, best_snap)
    return records


# -- stage 1: representation distillation ---------------------------------------------


@dataclass(frozen=True)
class DistillRecord:
    epoch: int
    train_lrp: float
    heldout_lrp: float


@dataclass
class DistillResult:
    records: list[DistillRecord]
    initial_heldout: float
    best_epoch: int
    best_heldout: float
    finetune_records: list[EpochRecord] = field(default_factory=list)


def _pooled_lrp(bundle: ModelBundle, base_out: np.ndarray, target: np.ndarray,
                batch_size: int) -> float:
    total = 0.0
    with no_grad():
        for lo in range(0, len(base_out), batch_size):
            s = bundle.forward_mid_pooled(Tensor(base_out[lo:lo + batch_size]))
            d = s.data - target[lo:lo + batch_size]
            total += 0.5 * float((d * d).sum(axis=-1).sum())
    return total / len(base_out)


def distill_stage1(teacher: ModelBundle, student: ModelBundle,
                   common_ds: LabeledDataset, cfg: SgdConfig | None = None,
                   heldout_ds: LabeledDataset | None = None, epochs: int = 30,
                   seed: int = 0, finetune_re: bool = False,
                   finetune_epochs: int = 5, finetune_lr: float = 1e-4) -> DistillResult:
    """Train the student trunk to match the teacher's pooled features.

    Loss per sample is half the squared distance between teacher and student
    pooled 64-d features (batch-averaged). The stem is copied from the teacher
    and frozen; the teacher never trains. Held-out loss picks the checkpoint;
    without an explicit held-out set, a deterministic 80/20 split of the
    common set is used. Optionally the classifier stack above the stem (trunk
    plus the pretraining head `re`) is fine-tuned afterwards with cross-entropy
    at a small constant learning rate; the stem stays frozen throughout.
    """
    cfg = cfg or PRESETS["stage1"]
    if teacher.pooled_len != student.pooled_len:
        raise ShapeError(f"teacher pooled width {teacher.pooled_len} != "
                         f"student pooled width {student.pooled_len}")
    if teacher.base_spec != student.base_spec:
        raise ShapeError("teacher and student stems differ; they must be shared")
    student.base.load_state(teacher.base.snapshot())
    student.base.set_trainable(False)
    for p in teacher.params(("base", "mid", "re")):
        p.requires_grad = False

    if heldout_ds is None:
        perm = stream(seed, "distill-split").permutation(len(common_ds))
        cut = max(1, int(0.8 * len(common_ds)))
        train_images = common_ds.images[perm[:cut]]
        train_labels = common_ds.labels[perm[:cut]]
        held_images = common_ds.images[perm[cut:]]
    else:
        train_images = common_ds.images
        train_labels = common_ds.labels
        held_images = heldout_ds.images

    x_train = preprocess_plain(train_images)
    x_held = preprocess_plain(held_images)

    def batched_base(x):
        outs = []
        with no_grad():
            for lo in range(0, len(x), cfg.batch_size):
                outs.append(student.forward_base(Tensor(x[lo:lo + cfg.batch_size])).data)
        return np.concatenate(outs, axis=0)

    def batched_teacher_pooled(base_out):
        outs = []
        with no_grad():
            for lo in range(0, len(base_out), cfg.batch_size):
                outs.append(teacher.forward_mid_pooled(
                    Tensor(base_out[lo:lo + cfg.batch_size])).data)
        return np.concatenate(outs, axis=0)

    # the stem is shared and frozen, so its outputs (and the teacher features)
    # are fixed for the whole stage and can be computed once
    base_train = batched_base(x_train)
    base_held = batched_base(x_held)
    t_train = batched_teacher_pooled(base_train)
    t_held = batched_teacher_pooled(base_held)

    params = student.mid.params()
    initial = _pooled_lrp(student, base_held, t_held, cfg.batch_size)
    records: list[DistillRecord] = []
    best = (np.inf, -1)
    best_snap = None
    for epoch in range(epochs):
        rng = stream(seed, "distill-shuffle", epoch)
        losses = []
        for idx in _epoch_batches(len(base_train), cfg.batch_size, rng):
            s = student.forward_mid_pooled(Tensor(base_train[idx]), train=True)
            diff = s - Tensor(t_train[idx])
            loss = 0.5 * (diff * diff).sum(axis=-1).mean()
            zero_grads(params)
            loss.backward()
            sgd_step(params, cfg, epoch)
            losses.append(loss.item())
        held = _pooled_lrp(student, base_held, t_held, cfg.batch_size)
        records.append(DistillRecord(epoch, float(np.mean(losses)), held))
        if held < best[0]:
            best = (held, epoch)
            best_snap = student.mid.snapshot()
    if best_snap is not None:
        student.mid.load_state(best_snap)

    finetune_records: list[EpochRecord] = []
    if finetune_re:
        ft_cfg = replace(cfg, lr_schedule=((0, None, finetune_lr),))
        re_params = student.re.params()
        for p in re_params:
            p.requires_grad = True
        ft_params = params + re_params
        for epoch in range(finetune_epochs):
            rng = stream(seed, "finetune-shuffle", epoch)
            losses = []
            for idx in _epoch_batches(len(base_train), cfg.batch_size, rng):
                pooled = student.forward_mid_pooled(Tensor(base_train[idx]), train=True)
                logits = student.forward_re(pooled, train=True)
                loss = cross_entropy(T.softmax(logits), train_labels[idx])
                zero_grads(ft_params)
                loss.backward()
                sgd_step(ft_params, ft_cfg, epoch)
                losses.append(loss.item())
            finetune_records.append(EpochRecord(epoch, float(np.mean(losses)),
                                                float("nan"), float("nan")))

    return DistillResult(records=records, initial_heldout=initial,
                         best_epoch=best[1], best_heldout=best[0],
                         finetune_records=finetune_records)


# -- stage 3: classifier training on the forged set -------------------------------------


@dataclass
class Stage3Config:
    """`sgd` applies to all three steps unless `per_step_sgd` overrides one.

    The trunk step sits between two classifier-only steps and usually wants a
    gentler rate and a larger batch than they do; a per-step entry of None
    falls back to `sgd`.
    """

    sgd: SgdConfig = field(default_factory=lambda: PRESETS["stage3"])
    per_step_sgd: tuple[SgdConfig | None, SgdConfig | None, SgdConfig | None] = (
        None, None, None)
    epochs: tuple[int, int, int] = (5, 4, 5)
    gamma: float = 2.0
    use_cbw: bool = True
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    variant: str = "A1"
    enlarged_hidden: tuple[int, int] = (10240, 64)
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if len(self.per_step_sgd) != 3:
            raise ConfigError("per_step_sgd needs one entry per step")


@dataclass
class StepResult:
    records: list[EpochRecord]
    best_epoch: int
    best_ave: float


@dataclass
class Stage3Result:
    steps: dict[str, StepResult]
    final: EvalResult


def _eval_with_hc(bundle: ModelBundle, hc: Sequential, kind: str,
                  val_x: np.ndarray, val_labels: np.ndarray, k: int,
                  batch_size: int) -> EvalResult:
    outs = []
    with no_grad():
        for lo in range(0, len(val_x), batch_size):
            b = bundle.forward_base(Tensor(val_x[lo:lo + batch_size]))
            feats = (bundle.forward_mid_pooled(b) if kind == "pooled"
                     else bundle.forward_mid_unpooled(b))
            outs.append(hc.forward(feats).data)
    return evaluate_scores(np.concatenate(outs, axis=0), val_labels, k)


def _run_classifier_step(bundle: ModelBundle, hc: Sequential, kind: str,
                         train_ds: LabeledDataset, val_x, focal_cfg, cfg: Stage3Config,
                         epoch_base: int, epochs: int, val_labels, train_trunk: bool,
                         sgd: SgdConfig | None = None) -> StepResult:
    """One stage-3 step. Either hc trains over a frozen trunk, or the trunk
    trains under a frozen hc."""
    sgd = sgd if sgd is not None else cfg.sgd
    k = len(train_ds.categories)
    params = bundle.params(("base", "mid")) if train_trunk else hc.params()
    records: list[EpochRecord] = []
    best: tuple[float, int] | None = None
    best_snap = None

    def snap():
        if train_trunk:
            return {"base": bundle.base.snapshot(), "mid": bundle.mid.snapshot()}
        return hc.snapshot()

    for epoch in range(epochs):
        rng = stream(cfg.seed, "stage3-shuffle", epoch_base + epoch)
        losses = []
        for idx in _epoch_batches(len(train_ds), sgd.batch_size, rng):
            xb = assemble_batch(train_ds.images, idx, cfg.augment, cfg.seed,
                                epoch_base + epoch, cfg.workers)
            if train_trunk:
                b = bundle.forward_base(Tensor(xb), train=True)
                feats = (bundle.forward_mid_pooled(b, train=True) if kind == "pooled"
                         else bundle.forward_mid_unpooled(b, train=True))
            else:
                with no_grad():
                    b = bundle.forward_base(Tensor(xb))
                    feats = (bundle.forward_mid_pooled(b) if kind == "pooled"
                             else bundle.forward_mid_unpooled(b))
                feats = Tensor(feats.data)
            probs = hc.forward(feats, train=True)
            loss = focal_loss(probs, train_ds.labels[idx], focal_cfg)
            zero_grads(params)
            loss.backward()
            sgd_step(params, sgd, epoch)
            losses.append(loss.item())
        ev = _eval_with_hc(bundle, hc, kind, val_x, val_labels, k, sgd.batch_size)
        records.append(EpochRecord(epoch, float(np.mean(losses)), ev.ave, ev.er))
        if best is None or ev.ave < best[0]:
            best = (ev.ave, epoch)
            best_snap = snap()
    if best_snap is not None:
        if train_trunk:
            bundle.base.load_state(best_snap["base"])
            bundle.mid.load_state(best_snap["mid"])
        else:
            hc.load_state(best_snap)
    return StepResult(records=records, best_epoch=best[1], best_ave=best[0])


def train_stage3(bundle: ModelBundle, train_ds: LabeledDataset,
                 val_ds: LabeledDataset, cfg: Stage3Config) -> Stage3Result:
    """Three-step classifier training on the forged set; see module docstring.

    On return the bundle carries the selected trunk and the fresh compact
    classifier from step 3 as `hc`.
    """
    if cfg.variant not in ("A1", "A2", "A3", "A4"):
        raise ConfigError(f"unknown classifier variant {cfg.variant!r}")
    k = len(train_ds.categories)
    weights = None
    if cfg.use_cbw:
        weights = tuple(category_balancing_weights(train_ds.counts()))
    focal_cfg = FocalConfig(gamma=cfg.gamma, class_weights=weights)
    val_x = preprocess_plain(val_ds.images, cfg.augment.means, cfg.augment.stds)
    val_labels = val_ds.labels

    # step 1: enlarged classifier over the frozen trunk
    enlarged_variant = cfg.variant if cfg.variant != "A4" else "A1"
    hc_en = Sequential(
        classifier_spec(enlarged_variant, enlarged=True, hidden=cfg.enlarged_hidden,
                        in_features=bundle.unpooled_len, num_categories=k),
        stream(cfg.seed, "init-hc-enlarged"))
    bundle.base.set_trainable(False)
    bundle.mid.set_trainable(False)
    step1 = _run_classifier_step(bundle, hc_en, "unpooled", train_ds, val_x, focal_cfg,
                                 cfg, 0, cfg.epochs[0], val_labels, train_trunk=False,
                                 sgd=cfg.per_step_sgd[0])

    # step 2: trunk under the frozen enlarged classifier
    hc_en.set_trainable(False)
    bundle.base.set_trainable(True)
    bundle.mid.set_trainable(True)
    step2 = _run_classifier_step(bundle, hc_en, "unpooled", train_ds, val_x, focal_cfg,
                                 cfg, cfg.epochs[0], cfg.epochs[1], val_labels,
                                 train_trunk=True, sgd=cfg.per_step_sgd[1])

    # step 3: fresh compact classifier over the retrained frozen trunk
    bundle.base.set_trainable(False)
    bundle.mid.set_trainable(False)
    kind = "pooled" if cfg.variant == "A4" else "unpooled"
    in_features = bundle.pooled_len if kind == "pooled" else bundle.unpooled_len
    hc = Sequential(
        classifier_spec(cfg.variant, enlarged=False, in_features=in_features,
                        num_categories=k),
        stream(cfg.seed, "init-hc"))
    step3 = _run_classifier_step(bundle, hc, kind, train_ds, val_x, focal_cfg,
                                 cfg, cfg.epochs[0] + cfg.epochs[1], cfg.epochs[2],
                                 val_labels, train_trunk=False,
                                 sgd=cfg.per_step_sgd[2])

    bundle.hc_spec = hc.arch
    bundle.hc = hc
    final = _eval_with_hc(bundle, hc, kind, val_x, val_labels, k, cfg.sgd.batch_size)
    return Stage3Result(steps={"step1": step1, "step2": step2, "step3": step3},
                        final=final)


# -- no-distillation baseline --------------------------------------------------------


@dataclass
class BaselineConfig:
    spear: SpearConfig = field(default_factory=SpearConfig)
    variant: str = "A1"
    gamma: float = 2.0
    use_cbw: bool = True
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    phase1: SgdConfig = field(default_factory=lambda: PRESETS["stage1"])
    phase2: SgdConfig = field(default_factory=lambda: PRESETS["stage3"])
    patience: int = 50
    max_epochs: tuple[int, int] = (200, 100)
    seed: int = 0
    workers: int = 1


@dataclass
class BaselineResult:
    bundle: ModelBundle
    records: list[EpochRecord]
    phase1_epochs: int
    final: EvalResult


def baseline_no_cedg(train_ds: LabeledDataset, val_ds: LabeledDataset,
                     cfg: BaselineConfig) -> BaselineResult:
    """Control run: random init, no teacher, trained end to end on the forged
    set with the same loss and augmentations.

    Phase 1 uses the distillation-stage preset until validation AVE stops
    improving for `patience` epochs (or the cap); phase 2 continues from the
    best weights with the small-constant-rate preset under the same rule.
    """
    k = len(train_ds.categories)
    bundle = build_spearnet(cfg.spear, num_classes=k, seed=cfg.seed)
    kind = "pooled" if cfg.variant == "A4" else "unpooled"
    in_features = bundle.pooled_len if kind == "pooled" else bundle.unpooled_len
    hc = Sequential(classifier_spec(cfg.variant, enlarged=False,
                                    in_features=in_features, num_categories=k),
                    stream(cfg.seed, "init-hc"))
    weights = None
    if cfg.use_cbw:
        weights = tuple(category_balancing_weights(train_ds.counts()))
    focal_cfg = FocalConfig(gamma=cfg.gamma, class_weights=weights)
    val_x = preprocess_plain(val_ds.images, cfg.augment.means, cfg.augment.stds)
    params = bundle.params(("base", "mid")) + hc.params()

    records: list[EpochRecord] = []
    best = (np.inf, -1)
    best_snap = None
    global_epoch = 0

    def run_phase(sgd_cfg: SgdConfig, cap: int) -> None:
        nonlocal global_epoch, best, best_snap
        since_best = 0
        for local_epoch in range(cap):
            rng = stream(cfg.seed, "baseline-shuffle", global_epoch)
            losses = []
            for idx in _epoch_batches(len(train_ds), sgd_cfg.batch_size, rng):
                xb = assemble_batch(train_ds.images, idx, cfg.augment, cfg.seed,
                                    global_epoch, cfg.workers)
                b = bundle.forward_base(Tensor(xb), train=True)
                feats = (bundle.forward_mid_pooled(b, train=True) if kind == "pooled"
                         else bundle.forward_mid_unpooled(b, train=True))
                probs = hc.forward(feats, train=True)
                loss = focal_loss(probs, train_ds.labels[idx], focal_cfg)
                zero_grads(params)
                loss.backward()
                sgd_step(params, sgd_cfg, local_epoch)
                losses.append(loss.item())
            ev = _eval_with_hc(bundle, hc, kind, val_x, val_ds.labels, k,
                               sgd_cfg.batch_size)
            records.append(EpochRecord(global_epoch, float(np.mean(losses)),
                                       ev.ave, ev.er))
            if ev.ave < best[0]:
                best = (ev.ave, global_epoch)
                best_snap = {"base": bundle.base.snapshot(),
                             "mid": bundle.mid.snapshot(), "hc": hc.snapshot()}
                since_best = 0
            else:
                since_best += 1
            global_epoch += 1
            if since_best >= cfg.patience:
                break

    run_phase(cfg.phase1, cfg.max_epochs[0])
    phase1_epochs = global_epoch
    if best_snap is not None:
        bundle.base.load_state(best_snap["base"])
        bundle.mid.load_state(best_snap["mid"])
        hc.load_state(best_snap["hc"])
    run_phase(cfg.phase2, cfg.max_epochs[1])
    if best_snap is not None:
        bundle.base.load_state(best_snap["base"])
        bundle.mid.load_state(best_snap["mid"])
        hc.load_state(best_snap["hc"])

    bundle.hc_spec = hc.arch
    bundle.hc = hc
    final = _eval_with_hc(bundle, hc, kind, val_x, val_ds.labels, k,
                          cfg.phase2.batch_size)
    return BaselineResult(bundle=bundle, records=records,
                          phase1_epochs=phase1_epochs, final=final)
