"""Prevalence estimation over document groups.

Classify-and-count thresholds each document; probabilistic classify-and-count
averages the posteriors; an under-complete MLP refines the averaged
estimates using the label correlations it picked up in training.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import OptimizerState, Tensor
from .textenc import Document
from .training import EarlyStopper


@dataclass
class QuantGroup:
    """A sampled set of documents with its true prevalence vector."""

    ids: tuple[str, ...]
    prevalence: np.ndarray  # (classes,) in [0, 1]
    size: int

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"group size must be >= 1, got {self.size}")
        if self.size != len(self.ids):
            raise ValueError(f"size {self.size} does not match {len(self.ids)} ids")


def cc_estimate(probabilities: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Classify and count: per class, the fraction of documents at or above
    the decision threshold."""
    p = np.asarray(probabilities, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ValueError(f"need a non-empty (docs, classes) matrix, got shape {p.shape}")
    return (p >= threshold).mean(axis=0)


def pcc_estimate(probabilities: np.ndarray) -> np.ndarray:
    """Probabilistic classify and count: the column mean of posteriors."""
    p = np.asarray(probabilities, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ValueError(f"need a non-empty (docs, classes) matrix, got shape {p.shape}")
    return p.mean(axis=0)


class Refiner:
    """Three-layer MLP (classes -> hidden -> classes) refining PCC vectors.

    The hidden layer is under-complete; a rectifier feeds a sigmoid output
    so refined estimates stay inside (0, 1).
    """

    def __init__(self, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor):
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2

    @classmethod
    def init(cls, num_codes: int, hidden: int, seed: int = 0,
             dtype=np.float32) -> "Refiner":
        if not 1 <= hidden < num_codes:
            raise ValueError(f"hidden size {hidden} must be in [1, {num_codes})"
                             " to stay under-complete")
        rng = np.random.default_rng(seed)

        def norm(rows, cols):
            return Tensor(rng.normal(0.0, 1.0 / math.sqrt(cols),
                                     size=(rows, cols)).astype(dtype),
                          requires_grad=True)

        return cls(
            w1=norm(hidden, num_codes),
            b1=Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True),
            w2=norm(num_codes, hidden),
            b2=Tensor(np.zeros(num_codes, dtype=dtype), requires_grad=True),
        )

    @property
    def num_codes(self) -> int:
        return self.w2.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    def forward(self, pcc: Tensor) -> Tensor:
        col = dc.reshape(pcc, (self.num_codes, 1))
        h = dc.relu(dc.add(dc.matmul(self.w1, col),
                           dc.reshape(self.b1, (self.hidden, 1))))
        out = dc.add(dc.matmul(self.w2, h),
                     dc.reshape(self.b2, (self.num_codes, 1)))
        return dc.reshape(dc.sigmoid(out), (self.num_codes,))

    def trainable(self) -> dict[str, Tensor]:
        return {"refiner.w1": self.w1, "refiner.b1": self.b1,
                "refiner.w2": self.w2, "refiner.b2": self.b2}


def refine(pcc: np.ndarray, refiner: Refiner) -> np.ndarray:
    """Refined prevalence estimate for one PCC vector."""
    pcc = np.asarray(pcc)
    if pcc.shape != (refiner.num_codes,):
        raise ValueError(f"expected a vector of {refiner.num_codes} classes, "
                         f"got shape {pcc.shape}")
    if pcc.min() < 0 or pcc.max() > 1:
        raise ValueError("PCC entries must lie in [0, 1]")
    return refiner.forward(Tensor(pcc.astype(np.float32))).data


def sample_groups(docs: Sequence[Document], count: int, num_codes: int,
                  seed: int = 0) -> list[QuantGroup]:
    """Sample ``count`` groups; each size is uniform in [1, len(docs)] and
    members are drawn without replacement within the group."""
    if count < 1:
        raise ValueError(f"need at least one group, got {count}")
    if not docs:
        raise ValueError("empty document set")
    rng = np.random.default_rng(seed)
    n = len(docs)
    gold = np.stack([d.label_vector(num_codes) for d in docs]).astype(np.float64)
    groups = []
    for _ in range(count):
        size = int(rng.integers(1, n + 1))
        members = rng.choice(n, size=size, replace=False)
        groups.append(QuantGroup(
            ids=tuple(docs[int(i)].id for i in members),
            prevalence=gold[members].mean(axis=0),
            size=size,
        ))
    return groups


def group_probabilities(group: QuantGroup,
                        probs_by_id: dict[str, np.ndarray]) -> np.ndarray:
    return np.stack([probs_by_id[doc_id] for doc_id in group.ids])


def train_refiner_standalone(refiner: Refiner, groups: Sequence[QuantGroup],
                             probs_by_id: dict[str, np.ndarray], *,
                             lr0: float = 2e-5, patience: int = 5,
                             max_epochs: int = 300, batch_size: int = 16,
                             valid_fraction: float = 0.2,
                             seed: int = 0) -> list[dict]:
    """Fit the refiner on (PCC vector, true prevalence) pairs from a frozen
    classifier's outputs.

    A seeded split holds out part of the groups; training stops early on
    held-out MSE and the best parameters are restored.  A zero epoch budget
    leaves the refiner untouched.
    """
    if not groups:
        raise ValueError("no groups to train on")
    inputs = np.stack([pcc_estimate(group_probabilities(g, probs_by_id))
                       for g in groups]).astype(np.float32)
    targets = np.stack([g.prevalence for g in groups]).astype(np.float32)

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(groups))
    n_valid = max(1, int(len(groups) * valid_fraction)) if len(groups) > 1 else 0
    valid_idx, train_idx = order[:n_valid], order[n_valid:]
    if len(train_idx) == 0:
        train_idx = order
        valid_idx = order

    params = refiner.trainable()
    state = OptimizerState(lr=lr0)
    stopper = EarlyStopper("min", patience)
    steps_per_epoch = math.ceil(len(train_idx) / batch_size)
    total_steps = max(1, max_epochs * steps_per_epoch)
    best = dc.snapshot_params(params)
    history = []
    step = 0

    def valid_mse() -> float:
        errs = [float(np.mean((refine(inputs[i].astype(np.float64), refiner)
                               - targets[i]) ** 2)) for i in valid_idx]
        return float(np.mean(errs)) if errs else 0.0

    for epoch in range(max_epochs):
        epoch_order = rng.permutation(train_idx)
        dc.zero_grad(params)
        pending = 0
        for i in epoch_order:
            pred = refiner.forward(Tensor(inputs[int(i)]))
            diff = dc.sub(pred, Tensor(targets[int(i)]))
            loss = dc.tsum(dc.mul(diff, diff))
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
        value = valid_mse()
        history.append({"epoch": epoch, "valid_mse": value})
        if stopper.update(value):
            best = dc.snapshot_params(params)
        if stopper.should_stop:
            break
    dc.restore_params(params, best)
    return history


# ---------------------------------------------------------------------------
# group files
# ---------------------------------------------------------------------------

def write_groups(path, groups: Sequence[QuantGroup]) -> None:
    """Write groups as JSON Lines: {"ids", "size"}."""
    with open(path, "w", encoding="utf-8") as fh:
        for g in groups:
            fh.write(json.dumps({"ids": list(g.ids), "size": g.size}) + "\n")


def read_groups(path, docs_by_id: dict[str, Document],
                num_codes: int) -> list[QuantGroup]:
    """Load groups and recompute true prevalence from the documents' gold
    labels."""
    groups = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if "ids" not in rec or "size" not in rec:
                raise ValueError(f"{path}:{lineno}: expected keys 'ids' and 'size'")
            ids = tuple(rec["ids"])
            missing = [i for i in ids if i not in docs_by_id]
            if missing:
                raise ValueError(f"{path}:{lineno}: unknown document id {missing[0]!r}")
            gold = np.stack([docs_by_id[i].label_vector(num_codes) for i in ids])
            groups.append(QuantGroup(ids=ids, prevalence=gold.mean(axis=0),
                                     size=int(rec["size"])))
    return groups
