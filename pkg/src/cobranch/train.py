"""End-to-end training loop for the two-branch framework.

Per epoch: (re-)estimate the training-set class distribution from the
contrastive branch's features every `reestimate_interval` epochs, then for
each mixed batch step the pseudo-labeling branch on its composite objective
and the contrastive branch on its composite objective. After the warm-up
epochs the contrastive step additionally receives debiased, sampled
pseudo-labels through the positiveness-weighted soft loss.

The shared encoder receives gradients from both branches; the classifier is
touched only by the pseudo-labeling step and the projector only by the
contrastive step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import losses, nn, transfer
from ._rng import BATCH, VIEWS, rng_for
from .data import DatasetSplit, feature_std
from .estimate import AlignmentMap, EstimationError, estimate_round, floor_distribution

SOFT_MODES = ("soft", "hard", "off")


@dataclass(frozen=True)
class ModelConfig:
    d_hidden: int = 32
    d_feat: int = 16
    d_proj_hidden: int = 32
    d_proj: int = 32
    scale: float = 10.0


@dataclass(frozen=True)
class TrainConfig:
    schedule: nn.TrainSchedule
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    sampling: transfer.SamplingConfig = field(default_factory=transfer.SamplingConfig)
    seed: int = 0
    temperature: float = 1.0
    smoothing_p: float = 0.5
    reestimate_interval: int = 10
    metric: str = "dot"
    conf_gate: float = 0.5
    momentum: float = 0.9
    soft_mode: str = "soft"
    view_noise: float = 0.1
    view_dropout: float = 0.1
    kmeans_max_iter: int = 100
    kmeans_tol: float = 1e-6
    kmeans_n_init: int = 10
    # How strongly the pseudo-labeling branch may reshape the shared encoder
    # (its own classifier always trains at full strength). 1.0 gives both
    # branches equal say; small values emulate a mostly-frozen backbone whose
    # evaluated representation is owned by the contrastive branch.
    aux_encoder_weight: float = 1.0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0 <= self.smoothing_p <= 1:
            raise ValueError("smoothing_p must lie in [0, 1]")
        if self.reestimate_interval < 1:
            raise ValueError("reestimate_interval must be >= 1")
        if self.metric not in transfer.SIMILARITY_METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.soft_mode not in SOFT_MODES:
            raise ValueError(f"soft_mode must be one of {SOFT_MODES}")
        if not 0 <= self.aux_encoder_weight <= 1:
            raise ValueError("aux_encoder_weight must lie in [0, 1]")


@dataclass
class TrainResult:
    params: nn.ModelParams
    telemetry: list
    pi_e: np.ndarray
    alignment: AlignmentMap
    opt_cls: nn.SgdState
    opt_con: nn.SgdState
    epochs_done: int


class TrainingAborted(RuntimeError):
    """Raised when a batch produces a non-finite loss or gradient."""


def make_batches(split: DatasetSplit, batch_size: int, seed: int, epoch: int):
    """Seeded per-epoch shuffle of the union pool, chunked into batches.

    Yields (labeled_indices, unlabeled_indices) pairs; the final short batch
    is kept. Labeled/unlabeled mixing follows pool proportions in expectation.
    """
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    n_l, n_u = len(split.labeled), len(split.unlabeled)
    rng = rng_for(seed, BATCH, epoch)
    order = rng.permutation(n_l + n_u)
    batches = []
    for start in range(0, n_l + n_u, batch_size):
        chunk = order[start : start + batch_size]
        lab = chunk[chunk < n_l]
        unl = chunk[chunk >= n_l] - n_l
        batches.append((lab, unl))
    return batches


def make_views(X: np.ndarray, rng: np.random.Generator, noise_std: float, dropout: float):
    """Two stochastic views of vector inputs: additive Gaussian noise plus
    random coordinate dropout."""
    views = []
    for _ in range(2):
        V = X + noise_std * rng.standard_normal(X.shape)
        if dropout > 0:
            keep = rng.random(X.shape) >= dropout
            V = V * keep
        views.append(V)
    return views[0], views[1]


def _estimate(split: DatasetSplit, params: nn.ModelParams, cfg: TrainConfig, epoch: int):
    feats = nn.encode(params, split.feature_matrix())
    labeled_idx = np.arange(len(split.labeled))
    labeled_cls = split.labeled_classes()
    result, amap, pi_e = estimate_round(
        feats,
        split.num_classes,
        labeled_idx,
        labeled_cls,
        split.num_known,
        seed=cfg.seed * 1000003 + epoch,
        max_iter=cfg.kmeans_max_iter,
        tol=cfg.kmeans_tol,
        n_init=cfg.kmeans_n_init,
    )
    return result, amap, pi_e


def _soft_batch(
    params: nn.ModelParams,
    cfg: TrainConfig,
    X_unl: np.ndarray,
    unl_ids: np.ndarray,
    batch_labels: np.ndarray,
    pi_e: np.ndarray,
    n_total: int,
):
    """Debias, sample and score the batch's pseudo-labels.

    Returns (selected unlabeled positions, instance probability rows for
    [labeled; selected unlabeled], instance pred classes for hard mode).
    """
    pi_floor = floor_distribution(pi_e, n_total)
    if X_unl.shape[0]:
        logits = nn.classify(params, nn.encode(params, X_unl))
        probs = transfer.debias(np.atleast_2d(logits), pi_floor, cfg.sampling.k)
        batch = transfer.PseudoLabelBatch.from_probs(probs, ids=unl_ids)
        rates = transfer.sampling_rates(pi_floor, batch_labels, cfg.sampling.alpha, cfg.sampling.beta)
        batch = transfer.sample_pseudolabels(batch, rates)
        sel = np.flatnonzero(batch.mask)
    else:
        batch = None
        sel = np.zeros(0, dtype=int)

    lab_probs = transfer.one_hot(batch_labels, pi_e.size)
    if sel.size:
        inst_probs = np.concatenate([lab_probs, batch.probs[sel]], axis=0)
        inst_pred = np.concatenate([np.asarray(batch_labels, int), batch.pred_class[sel]])
    else:
        inst_probs = lab_probs
        inst_pred = np.asarray(batch_labels, int)
    return sel, inst_probs, inst_pred


def run(
    split: DatasetSplit,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    resume: dict | None = None,
    stop_epoch: int | None = None,
) -> TrainResult:
    """Train both branches over the split; deterministic given cfg.seed.

    `resume` is the state dict a checkpoint stores (see cli); streams are
    derived per (seed, epoch) so a resumed run replays the original exactly.
    `stop_epoch` pauses the run early without altering the LR schedule,
    producing a genuine resume point.
    """
    split.validate()
    d_in = split.labeled[0].features.size if split.labeled else split.unlabeled[0].features.size
    sched = cfg.schedule
    n_total = len(split.labeled) + len(split.unlabeled)
    if n_total == 0:
        raise ValueError("empty split")

    feats_lab = (
        np.stack([s.features for s in split.labeled]) if split.labeled else np.zeros((0, d_in))
    )
    labels_lab = split.labeled_classes()
    feats_unl = (
        np.stack([s.features for s in split.unlabeled]) if split.unlabeled else np.zeros((0, d_in))
    )
    noise_std = cfg.view_noise * feature_std(split.labeled + split.unlabeled)

    if resume is None:
        params = nn.init_params(
            d_in,
            model_cfg.d_hidden,
            model_cfg.d_feat,
            model_cfg.d_proj_hidden,
            model_cfg.d_proj,
            split.num_classes,
            seed=cfg.seed,
            scale=model_cfg.scale,
        )
        opt_cls = nn.SgdState(cfg.momentum)
        opt_con = nn.SgdState(cfg.momentum)
        start_epoch = 0
        pi_e = None
        amap = None
    else:
        params = resume["params"]
        opt_cls = resume["opt_cls"]
        opt_con = resume["opt_con"]
        start_epoch = resume["epochs_done"]
        pi_e = np.asarray(resume["pi_e"], dtype=float)
        amap = AlignmentMap(np.asarray(resume["cluster_to_class"], dtype=int))

    stop = sched.total_epochs if stop_epoch is None else min(stop_epoch, sched.total_epochs)
    if stop <= start_epoch:
        raise ValueError(f"stop epoch {stop} does not advance past {start_epoch}")

    telemetry = []
    for epoch in range(start_epoch, stop):
        if epoch % cfg.reestimate_interval == 0 or pi_e is None:
            try:
                _, amap, pi_e = _estimate(split, params, cfg, epoch)
            except EstimationError as exc:
                raise TrainingAborted(f"estimation failed at epoch {epoch}: {exc}") from exc
        lr = nn.cosine_lr(epoch, sched)
        include_soft = epoch >= sched.warmup_epochs and cfg.soft_mode != "off"
        sums = {k: 0.0 for k in (
            "l_s", "l_u", "l_reg", "l_cls", "l_cl_u", "l_cl_s", "l_cl_soft", "l_con",
        )}
        n_soft_excluded = 0

        batches = make_batches(split, sched.batch_size, cfg.seed, epoch)
        for batch_id, (lab_idx, unl_idx) in enumerate(batches):
            rng_views = rng_for(cfg.seed, VIEWS, epoch, batch_id)
            X_lab, y = feats_lab[lab_idx], labels_lab[lab_idx]
            X_unl = feats_unl[unl_idx]
            n_l, n_u = lab_idx.size, unl_idx.size
            lab_v1, lab_v2 = make_views(X_lab, rng_views, noise_std, cfg.view_dropout)
            unl_v1, unl_v2 = make_views(X_unl, rng_views, noise_std, cfg.view_dropout)

            # pseudo-labeling branch step
            stacked = np.concatenate([lab_v1, unl_v1, unl_v2], axis=0)
            logits, cache = nn.classifier_branch_forward(params, stacked)
            cls = losses.classification_objective(
                logits[:n_l],
                y,
                logits[n_l : n_l + n_u],
                logits[n_l + n_u :],
                pi_e,
                cfg.weights,
                cfg.smoothing_p,
                cfg.conf_gate,
            )
            if not np.isfinite(cls.total):
                raise TrainingAborted(f"non-finite classification loss in epoch {epoch} batch {batch_id}")
            dlogits = np.concatenate([cls.grad_labeled, cls.grad_unl_v1, cls.grad_unl_v2], axis=0)
            cls_grads = nn.classifier_branch_backward(params, cache, dlogits)
            if cfg.aux_encoder_weight != 1.0:
                for name in params.ENCODER_FIELDS:
                    cls_grads[name] = cfg.aux_encoder_weight * cls_grads[name]
            try:
                nn.sgd_step(params, cls_grads, lr, opt_cls)
            except nn.NonFiniteGradientError as exc:
                raise TrainingAborted(f"epoch {epoch} batch {batch_id}: {exc}") from exc

            # contrastive branch step
            all_views = np.concatenate([lab_v1, unl_v1, lab_v2, unl_v2], axis=0)
            n_b = n_l + n_u
            other = np.concatenate([np.arange(n_b) + n_b, np.arange(n_b)])
            U, cache = nn.contrastive_branch_forward(params, all_views)
            labeled_view_idx = np.concatenate([np.arange(n_l), n_b + np.arange(n_l)])
            labeled_view_cls = np.concatenate([y, y])

            soft_view_idx = np.zeros(0, dtype=int)
            W_views = None
            if include_soft:
                sel, inst_probs, inst_pred = _soft_batch(
                    params, cfg, X_unl, unl_idx, y, pi_e, n_total
                )
                v1_idx = np.concatenate([np.arange(n_l), n_l + sel])
                soft_view_idx = np.concatenate([v1_idx, n_b + v1_idx])
                if cfg.soft_mode == "hard":
                    W_views = transfer.hard_indicator_weights(np.concatenate([inst_pred, inst_pred]))
                else:
                    W_views = transfer.build_positiveness_matrix(
                        np.concatenate([inst_probs, inst_probs], axis=0), cfg.metric
                    )
            con = losses.contrastive_objective(
                U,
                other,
                labeled_view_idx,
                labeled_view_cls,
                soft_view_idx,
                W_views,
                cfg.temperature,
                cfg.weights,
                include_soft,
            )
            if not np.isfinite(con.total):
                raise TrainingAborted(f"non-finite contrastive loss in epoch {epoch} batch {batch_id}")
            try:
                nn.sgd_step(params, nn.contrastive_branch_backward(params, cache, con.grad), lr, opt_con)
            except nn.NonFiniteGradientError as exc:
                raise TrainingAborted(f"epoch {epoch} batch {batch_id}: {exc}") from exc
            params.check_finite()

            sums["l_s"] += cls.l_s
            sums["l_u"] += cls.l_u
            sums["l_reg"] += cls.l_reg
            sums["l_cls"] += cls.total
            sums["l_cl_u"] += con.l_unsup
            sums["l_cl_s"] += con.l_sup
            sums["l_cl_soft"] += con.l_soft
            sums["l_con"] += con.total
            n_soft_excluded += con.n_soft_excluded

        n_batches = len(batches)
        record = {"epoch": epoch, "lr": lr}
        record.update({k: float(v) / n_batches for k, v in sums.items()})
        record["soft_anchors_excluded"] = n_soft_excluded
        record["pi_e"] = pi_e.tolist()
        telemetry.append(record)

    return TrainResult(
        params=params,
        telemetry=telemetry,
        pi_e=pi_e,
        alignment=amap,
        opt_cls=opt_cls,
        opt_con=opt_con,
        epochs_done=stop,
    )
