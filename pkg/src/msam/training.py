"""Loss functions, the two-stage classifier schedule, and the joint
classification-quantification training loop.

Stage one optimizes binary cross-entropy and stops early on validation
micro-F1; stage two restarts from the best checkpoint at a much lower rate
and stops on validation calibration error.  Joint training streams
instances into prevalence groups of random size, mixing the classification
loss with a quantification loss on refined running estimates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from . import metrics
from .diffcore import OptimizerState, Tensor
from .textenc import Document


@dataclass
class LossConfig:
    """Mixing weight and shape of the quantification loss."""

    quant_lambda: float = 100.0
    huber_delta: float = 0.01
    quant_loss_kind: str = "mse"  # "mse" | "huber"

    def __post_init__(self):
        if self.quant_lambda < 0:
            raise ValueError(f"quant_lambda must be >= 0, got {self.quant_lambda}")
        if self.huber_delta <= 0:
            raise ValueError(f"huber_delta must be > 0, got {self.huber_delta}")
        if self.quant_loss_kind not in ("mse", "huber"):
            raise ValueError(f"unknown quant loss kind {self.quant_loss_kind!r}")


def bce(y, logits) -> Tensor:
    """Binary cross-entropy summed over classes, in stable logit form."""
    y = np.asarray(y)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("gold labels must be binary")
    logits = dc.as_tensor(logits)
    return dc.bce_with_logits(logits, y.astype(logits.dtype))


def quant_loss_mse(p_hat, p) -> Tensor:
    """Sum of squared prevalence residuals."""
    p_hat = dc.as_tensor(p_hat)
    p = np.asarray(p, dtype=p_hat.dtype)
    if p.shape != p_hat.shape:
        raise ValueError(f"prevalence vectors differ in length: "
                         f"{p_hat.shape} vs {p.shape}")
    diff = dc.sub(p_hat, Tensor(p))
    return dc.tsum(dc.mul(diff, diff))


def quant_loss_huber(p_hat, p, delta: float) -> Tensor:
    """Summed elementwise Huber penalty on prevalence residuals."""
    p_hat = dc.as_tensor(p_hat)
    return dc.huber_sum(p_hat, np.asarray(p, dtype=p_hat.dtype), delta)


def combined_loss(classification_loss: Tensor, quant_loss: Tensor,
                  quant_lambda: float) -> Tensor:
    return dc.add(classification_loss, dc.mul(quant_loss, float(quant_lambda)))


def quant_loss(p_hat, p, cfg: LossConfig) -> Tensor:
    if cfg.quant_loss_kind == "huber":
        return quant_loss_huber(p_hat, p, cfg.huber_delta)
    return quant_loss_mse(p_hat, p)


# ---------------------------------------------------------------------------
# early stopping and stage loop
# ---------------------------------------------------------------------------

class EarlyStopper:
    """Patience counter over a single validation metric."""

    def __init__(self, mode: str, patience: int):
        if mode not in ("max", "min"):
            raise ValueError(f"mode must be 'max' or 'min', got {mode!r}")
        self.mode = mode
        self.patience = patience
        self.best: float | None = None
        self.stale = 0

    def update(self, value: float) -> bool:
        """Record one epoch's metric; True when it improved the best."""
        improved = (self.best is None
                    or (self.mode == "max" and value > self.best)
                    or (self.mode == "min" and value < self.best))
        if improved:
            self.best = value
            self.stale = 0
        else:
            self.stale += 1
        return improved

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


def micro_f1_evaluator(valid_docs: Sequence[Document], num_codes: int):
    def evaluate(model) -> float:
        batch = predictions_batch(model, valid_docs, num_codes)
        return metrics.f1_scores(batch)[1]
    return evaluate


def mece_evaluator(valid_docs: Sequence[Document], num_codes: int,
                   bins: int = 20):
    def evaluate(model) -> float:
        batch = predictions_batch(model, valid_docs, num_codes)
        return metrics.mece(batch, bins)[0]
    return evaluate


def predictions_batch(model, docs: Sequence[Document],
                      num_codes: int) -> metrics.EvalBatch:
    probs = np.stack([model.proba(doc.tokens) for doc in docs])
    gold = np.stack([doc.label_vector(num_codes) for doc in docs])
    return metrics.EvalBatch(probs, gold)


def run_training_stage(model, train_docs: Sequence[Document],
                       evaluate: Callable[[object], float], *,
                       lr0: float, mode: str, patience: int = 5,
                       max_epochs: int = 300, batch_size: int = 16,
                       seed: int = 0, metric_name: str = "metric") -> list[dict]:
    """One early-stopped stage of Adam training with a linear LR schedule.

    Shuffles per epoch with a seeded generator, accumulates gradients over
    an effective batch, and restores the best parameters (by the stage's
    validation metric) before returning the per-epoch history.
    """
    if not train_docs:
        raise ValueError("empty training split")
    params = model.trainable()
    state = OptimizerState(lr=lr0)
    rng = np.random.default_rng(seed)
    stopper = EarlyStopper(mode, patience)
    steps_per_epoch = math.ceil(len(train_docs) / batch_size)
    total_steps = max_epochs * steps_per_epoch
    best = dc.snapshot_params(params)
    history = []
    step = 0
    for epoch in range(max_epochs):
        order = rng.permutation(len(train_docs))
        dc.zero_grad(params)
        pending = 0
        epoch_loss = 0.0
        for i in order:
            doc = train_docs[int(i)]
            loss = model.loss(doc.tokens, doc.label_vector(model.num_codes))
            epoch_loss += loss.item()
            dc.backward(dc.mul(loss, 1.0 / batch_size))
            pending += 1
            if pending == batch_size:
                dc.adam_step(state, params, lr=dc.linear_lr(step, total_steps, lr0))
                dc.zero_grad(params)
                step += 1
                pending = 0
        if pending:
            dc.adam_step(state, params, lr=dc.linear_lr(step, total_steps, lr0))
            dc.zero_grad(params)
            step += 1
        value = evaluate(model)
        history.append({"epoch": epoch, "train_loss": epoch_loss / len(train_docs),
                        metric_name: value})
        if stopper.update(value):
            best = dc.snapshot_params(params)
        if stopper.should_stop:
            break
    dc.restore_params(params, best)
    return history


def train_classifier_two_stage(model, train_docs: Sequence[Document],
                               valid_docs: Sequence[Document], *,
                               lr_stage1: float = 2e-5, lr_stage2: float = 2e-7,
                               patience: int = 5, max_epochs: int = 300,
                               batch_size: int = 16, seed: int = 0,
                               calibration_bins: int = 20) -> dict:
    """Micro-F1 stage followed by a calibration stage from the best
    checkpoint; returns both stages' histories."""
    if not train_docs or not valid_docs:
        raise ValueError("both train and validation splits must be non-empty")
    stage1 = run_training_stage(
        model, train_docs,
        micro_f1_evaluator(valid_docs, model.num_codes),
        lr0=lr_stage1, mode="max", patience=patience, max_epochs=max_epochs,
        batch_size=batch_size, seed=seed, metric_name="micro_f1")
    stage2 = run_training_stage(
        model, train_docs,
        mece_evaluator(valid_docs, model.num_codes, calibration_bins),
        lr0=lr_stage2, mode="min", patience=patience, max_epochs=max_epochs,
        batch_size=batch_size, seed=seed + 1, metric_name="mece")
    return {"stage1": stage1, "stage2": stage2}


# ---------------------------------------------------------------------------
# joint classification and quantification
# ---------------------------------------------------------------------------

@dataclass
class GroupAccumulator:
    """Streaming sums backing the running prevalence estimates of one group."""

    limit: int
    num_codes: int
    prob_sum: np.ndarray = field(init=False)
    gold_sum: np.ndarray = field(init=False)
    count: int = field(init=False, default=0)

    def __post_init__(self):
        if self.limit < 1:
            raise ValueError(f"group limit must be >= 1, got {self.limit}")
        self.prob_sum = np.zeros(self.num_codes, dtype=np.float64)
        self.gold_sum = np.zeros(self.num_codes, dtype=np.float64)

    def add(self, probs: np.ndarray, gold: np.ndarray) -> None:
        if self.count >= self.limit:
            raise RuntimeError("accumulator already full; reset before adding")
        self.prob_sum += probs
        self.gold_sum += gold
        self.count += 1

    def pcc(self) -> np.ndarray:
        if self.count == 0:
            raise RuntimeError("no instances accumulated")
        return self.prob_sum / self.count

    def truth(self) -> np.ndarray:
        if self.count == 0:
            raise RuntimeError("no instances accumulated")
        return self.gold_sum / self.count

    @property
    def full(self) -> bool:
        return self.count >= self.limit

    def reset(self, limit: int) -> None:
        if limit < 1:
            raise ValueError(f"group limit must be >= 1, got {limit}")
        self.limit = limit
        self.prob_sum[:] = 0.0
        self.gold_sum[:] = 0.0
        self.count = 0


def clq_epoch(model, refiner, train_docs: Sequence[Document],
              cfg: LossConfig, accumulator: GroupAccumulator,
              state: OptimizerState, *, rng: np.random.Generator,
              lr: float | None = None, batch_size: int = 16,
              trace: bool = False) -> list[dict]:
    """One joint epoch: stream shuffled instances into prevalence groups.

    Per instance, the classification loss is mixed with a quantification
    loss on the refined running estimate; only the current instance's
    probability vector carries gradient through the running mean, earlier
    vectors enter as constants.  Groups reset with a fresh uniform limit in
    [1, number of training instances].  With ``trace`` on, returns one
    record per completed group holding the streaming estimate and the raw
    probability vectors for cross-checking.
    """
    n = len(train_docs)
    if n == 0:
        raise ValueError("empty training split")
    params = {**model.trainable(), **refiner.trainable()}
    order = rng.permutation(n)
    dc.zero_grad(params)
    pending = 0
    group_probs: list[np.ndarray] = []
    records: list[dict] = []

    for i in order:
        doc = train_docs[int(i)]
        y = doc.label_vector(model.num_codes)
        logits = model.logits(doc.tokens)
        lc = dc.bce_with_logits(logits, y)

        probs = dc.sigmoid(logits)
        count_new = accumulator.count + 1
        prev = Tensor(accumulator.prob_sum.astype(probs.dtype))
        pcc = dc.mul(dc.add(probs, prev), 1.0 / count_new)
        refined = refiner.forward(pcc)
        truth = (accumulator.gold_sum + y) / count_new
        lq = quant_loss(refined, truth.astype(probs.dtype), cfg)
        total = combined_loss(lc, lq, cfg.quant_lambda)
        dc.backward(dc.mul(total, 1.0 / batch_size))

        accumulator.add(probs.data.astype(np.float64), y.astype(np.float64))
        if trace:
            group_probs.append(probs.data.copy())
        pending += 1
        if pending == batch_size:
            dc.adam_step(state, params, lr=lr)
            dc.zero_grad(params)
            pending = 0

        if accumulator.full:
            if trace:
                records.append({
                    "limit": accumulator.limit,
                    "count": accumulator.count,
                    "pcc": accumulator.pcc().copy(),
                    "truth": accumulator.truth().copy(),
                    "probs": np.stack(group_probs),
                })
                group_probs = []
            accumulator.reset(int(rng.integers(1, n + 1)))

    if pending:
        dc.adam_step(state, params, lr=lr)
        dc.zero_grad(params)
    return records


def train_joint(model, refiner, train_docs: Sequence[Document],
                cfg: LossConfig, evaluate: Callable[[object, object], float], *,
                lr0: float = 2e-5, patience: int = 5, max_epochs: int = 300,
                batch_size: int = 16, seed: int = 0,
                metric_name: str = "quant_mse") -> list[dict]:
    """Early-stopped joint epochs; ``evaluate(model, refiner)`` must return
    a value to minimize.  Restores the best parameters on exit."""
    n = len(train_docs)
    if n == 0:
        raise ValueError("empty training split")
    params = {**model.trainable(), **refiner.trainable()}
    state = OptimizerState(lr=lr0)
    rng = np.random.default_rng(seed)
    accumulator = GroupAccumulator(limit=int(rng.integers(1, n + 1)),
                                   num_codes=model.num_codes)
    stopper = EarlyStopper("min", patience)
    steps_per_epoch = math.ceil(n / batch_size)
    total_steps = max_epochs * steps_per_epoch
    best = dc.snapshot_params(params)
    history = []
    for epoch in range(max_epochs):
        lr = dc.linear_lr(min(epoch * steps_per_epoch, total_steps),
                          total_steps, lr0)
        clq_epoch(model, refiner, train_docs, cfg, accumulator, state,
                  rng=rng, lr=lr, batch_size=batch_size)
        value = evaluate(model, refiner)
        history.append({"epoch": epoch, metric_name: value})
        if stopper.update(value):
            best = dc.snapshot_params(params)
        if stopper.should_stop:
            break
    dc.restore_params(params, best)
    return history
