"""Adam, ERM pretraining and manifold fine-tuning (EAPO or SFT-only)."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, Optional

import numpy as np

from eapo.data import Dataset
from eapo.model import Classifier, ReferencePolicy
from eapo.objectives import EAPOWeights, FocalParams, LossName, base_loss_arrays, eapo_batch
from eapo.retrieval import ExtremeSubset, LocalManifold

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), **kw)


def adam_step(
    state: AdamState, params: np.ndarray, grads: np.ndarray, lr: float
) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam update. Inputs are not modified."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if not (params.shape == grads.shape == state.m.shape == state.v.shape):
        raise ValueError("params, grads and optimizer state differ in length")
    if not np.all(np.isfinite(grads)):
        raise ValueError("non-finite gradient")
    t = state.step_count + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * np.square(grads)
    m_hat = m / (1.0 - state.beta1**t)
    denom = np.sqrt(v / (1.0 - state.beta2**t))
    denom += state.epsilon
    m_hat *= lr
    m_hat /= denom
    return AdamState(m, v, t, state.beta1, state.beta2, state.epsilon), params - m_hat


@dataclass(frozen=True)
class PretrainConfig:
    loss: LossName = "focal"
    epochs: int = 50
    learning_rate: float = 0.005
    batch_size: int = 256
    seed: int = 0
    focal: FocalParams = FocalParams()

    def validate(self) -> None:
        if self.loss not in ("bce", "focal"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")


@dataclass(frozen=True)
class FinetuneConfig:
    k: int = 5
    weights: EAPOWeights = EAPOWeights()
    sft_loss: LossName = "focal"
    epochs: int = 100
    learning_rate: float = 1e-4
    batch_size: int = 256
    mode: Literal["eapo", "sft_only"] = "eapo"
    seed: int = 0
    focal: FocalParams = FocalParams()

    def validate(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.sft_loss not in ("bce", "focal"):
            raise ValueError(f"unknown loss {self.sft_loss!r}")
        if self.mode not in ("eapo", "sft_only"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")

    def effective_weights(self) -> EAPOWeights:
        if self.mode == "sft_only":
            return EAPOWeights(self.weights.beta, 0.0, 0.0)
        return self.weights


@dataclass
class TrainHistory:
    epochs: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    metrics: list[Optional[float]] = field(default_factory=list)

    def append(self, epoch: int, loss: float, metric: Optional[float] = None) -> None:
        self.epochs.append(epoch)
        self.losses.append(loss)
        self.metrics.append(metric)

    def __len__(self) -> int:
        return len(self.epochs)

    def write_csv(self, path, delimiter: str = ",") -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
            w.writerow(["epoch", "loss", "metric"])
            for e, l, m in zip(self.epochs, self.losses, self.metrics):
                w.writerow([e, repr(l), "" if m is None else repr(m)])


Monitor = Callable[[Classifier], float]


def _check_logits(z: np.ndarray, epoch: int, step: int) -> None:
    if not np.all(np.isfinite(z)):
        raise TrainingError(f"non-finite logits at epoch {epoch}, step {step}")


def _check_finite(value: float, epoch: int, step: int) -> None:
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at epoch {epoch}, step {step}")


def _maybe_checkpoint(model: Classifier, checkpoint_dir, every: int, epoch: int, tag: str) -> None:
    if checkpoint_dir is not None and every > 0 and (epoch + 1) % every == 0:
        model.save(Path(checkpoint_dir) / f"{tag}-epoch{epoch + 1:04d}.json")


def pretrain(
    model: Classifier,
    train: Dataset,
    cfg: PretrainConfig,
    monitor: Optional[Monitor] = None,
    checkpoint_dir=None,
    checkpoint_every: int = 0,
) -> tuple[Classifier, TrainHistory]:
    """Mini-batch Adam on the mean base loss. Returns a new classifier."""
    cfg.validate()
    if len(train) == 0:
        raise TrainingError("training set is empty")
    if train.dim != model.dim:
        raise TrainingError(f"dataset dim {train.dim} != model dim {model.dim}")

    model = model.copy()
    x, y = train.features, train.labels
    n = len(train)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState.zeros(model.params.shape[0])
    history = TrainHistory()

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            z, cache = model.forward_cached(x[idx])
            _check_logits(z, epoch, step)
            v, g = base_loss_arrays(cfg.loss, z, y[idx], cfg.focal)
            batch_loss = float(v.sum())
            _check_finite(batch_loss, epoch, step)
            total += batch_loss
            grad = model.backward_cached(cache, g / len(idx))
            state, model.params = adam_step(state, model.params, grad, cfg.learning_rate)
        history.append(epoch, total / n, monitor(model) if monitor else None)
        log.debug("pretrain epoch %d loss %.6f", epoch, total / n)
        _maybe_checkpoint(model, checkpoint_dir, checkpoint_every, epoch, "pretrain")
    return model, history


def finetune(
    model: Classifier,
    ref: ReferencePolicy,
    manifold: LocalManifold,
    extreme: ExtremeSubset,
    cfg: FinetuneConfig,
    monitor: Optional[Monitor] = None,
    checkpoint_dir=None,
    checkpoint_every: int = 0,
) -> tuple[Classifier, TrainHistory]:
    """Fine-tune on the retrieved manifold.

    Each step draws one mini-batch of manifold records that serves as both
    the supervised items and the local preference pairs; the extreme term
    draws its own mini-batch (the whole subset when it is smaller than
    ``batch_size``) from an independent shuffle stream, so its presence or
    absence never perturbs the manifold batch order.
    """
    cfg.validate()
    if len(manifold) == 0:
        raise TrainingError("local manifold is empty")
    if manifold.data.dim != model.dim or ref.snapshot.dim != model.dim:
        raise TrainingError("dimension mismatch between model, reference and manifold")
    w = cfg.effective_weights()

    model = model.copy()
    x, y = manifold.data.features, manifold.data.labels
    ref_logit = np.atleast_1d(ref.logit(x))
    n = len(manifold)

    use_extreme = w.lambda2 > 0 and not extreme.is_empty
    if w.lambda2 > 0 and extreme.is_empty:
        warnings.warn("extreme subset is empty; the extreme DPO term contributes 0", stacklevel=2)
    if use_extreme:
        xe, ye = extreme.data.features, extreme.data.labels
        ref_logit_e = np.atleast_1d(ref.logit(xe))
        n_e = len(extreme)
        all_extreme = np.arange(n_e)

    rng = np.random.default_rng(cfg.seed)
    rng_extreme = np.random.default_rng([cfg.seed, 1])
    ext_order = np.zeros(0, dtype=np.int64)
    ext_pos = 0
    state = AdamState.zeros(model.params.shape[0])
    history = TrainHistory()
    no_pairs = np.zeros((0, 3))

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            total = 0.0
            for step, start in enumerate(range(0, n, cfg.batch_size)):
                idx = order[start : start + cfg.batch_size]
                yb = y[idx]
                ext_pairs = no_pairs
                if use_extreme:
                    if n_e <= cfg.batch_size:
                        eidx = all_extreme
                    else:
                        if ext_pos + cfg.batch_size > ext_order.shape[0]:
                            ext_order = rng_extreme.permutation(n_e)
                            ext_pos = 0
                        eidx = ext_order[ext_pos : ext_pos + cfg.batch_size]
                        ext_pos += cfg.batch_size
                    # one pass over [manifold batch; extreme batch]
                    z_all, cache = model.forward_cached(np.concatenate([x[idx], xe[eidx]]))
                    z, ze = z_all[: len(idx)], z_all[len(idx) :]
                    ext_pairs = np.column_stack([ze, ref_logit_e[eidx], ye[eidx]])
                else:
                    z, cache = model.forward_cached(x[idx])
                _check_logits(z, epoch, step)
                if use_extreme:
                    _check_logits(ze, epoch, step)
                sft_items = np.column_stack([z, yb])
                local_pairs = np.column_stack([z, ref_logit[idx], yb])

                res = eapo_batch(sft_items, local_pairs, ext_pairs, w, cfg.sft_loss, cfg.focal)
                _check_finite(res.value, epoch, step)
                total += res.value * len(idx)

                upstream = res.sft_grad + res.local_grad
                if use_extreme:
                    upstream = np.concatenate([upstream, res.extreme_grad])
                grad = model.backward_cached(cache, upstream)
                state, model.params = adam_step(state, model.params, grad, cfg.learning_rate)
            history.append(epoch, total / n, monitor(model) if monitor else None)
            log.debug("finetune epoch %d loss %.6f", epoch, total / n)
            _maybe_checkpoint(model, checkpoint_dir, checkpoint_every, epoch, "finetune")
    return model, history


def eapo_param_gradient(
    model: Classifier,
    ref: ReferencePolicy,
    x_local: np.ndarray,
    y_local: np.ndarray,
    x_extreme: np.ndarray,
    y_extreme: np.ndarray,
    w: EAPOWeights,
    sft_loss: LossName = "bce",
    focal: Optional[FocalParams] = None,
) -> tuple[float, np.ndarray]:
    """Full-batch objective value and parameter gradient (the training loop's assembly)."""
    z = np.atleast_1d(model.forward(x_local))
    zr = np.atleast_1d(ref.logit(x_local))
    ext_pairs = np.zeros((0, 3))
    if len(x_extreme):
        ze = np.atleast_1d(model.forward(x_extreme))
        ext_pairs = np.column_stack([ze, np.atleast_1d(ref.logit(x_extreme)), y_extreme])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = eapo_batch(
            np.column_stack([z, y_local]),
            np.column_stack([z, zr, y_local]),
            ext_pairs,
            w,
            sft_loss,
            focal,
        )
    grad = model.backward(x_local, res.sft_grad + res.local_grad)
    if len(x_extreme):
        grad = grad + model.backward(x_extreme, res.extreme_grad)
    return res.value, grad
