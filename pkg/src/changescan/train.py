"""Loss, Adam, and the training/evaluation loops.

The loss is cross-entropy plus soft dice over the change-class
probability plane.  Training is plain mini-batch Adam with a CSV metric
log; everything is seeded so repeated runs are bit-identical.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .metrics import ConfusionCounts, MetricResult, confusion, metrics
from .tensor import Tensor

_CE_FLOOR = 1e-12
_DICE_SMOOTH = 1.0

CSV_HEADER = ("step", "loss", "oa", "precision", "recall", "f1", "iou", "kc")


class LabelError(ValueError):
    """A label mask contains values other than 0 and 1."""


class DivergedError(RuntimeError):
    """Training loss stopped being finite."""


# ---------------------------------------------------------------------------
# loss

def check_label(label: np.ndarray) -> np.ndarray:
    label = np.asarray(label)
    bad = ~np.isin(label, (0, 1))
    if bad.any():
        raise LabelError(
            f"label holds {np.unique(label[bad])[:4]}, expected only 0/1")
    return label


def loss_fn(probs: Tensor, label: np.ndarray,
            ce_weight: float = 1.0, dice_weight: float = 1.0) -> Tensor:
    """Weighted cross-entropy + dice on a (2,H,W) probability map.

    Cross-entropy averages -log p(true class) per pixel.  Dice is the
    soft overlap 1 - (2*sum(p1*y) + 1) / (sum(p1) + sum(y) + 1), kept
    differentiable by using probabilities instead of a hard mask.
    """
    label = check_label(label)
    if probs.shape[1:] != label.shape or probs.shape[0] != 2:
        raise T.ShapeError(
            f"probability map {probs.shape} vs label {label.shape}")
    y = label.astype(probs.dtype)
    p1 = T.slice_axis(probs, axis=0, start=1, length=1)
    p0 = T.slice_axis(probs, axis=0, start=0, length=1)
    yk = y[None]
    p_true = T.add(T.mul(p1, yk), T.mul(p0, 1.0 - yk))
    # upper clip bound sits above 1 so true probabilities never touch
    # the clamp and the gradient stays live
    ce = T.tmean(T.neg(T.tlog(T.clip(p_true, _CE_FLOOR, 2.0))))
    inter = T.tsum(T.mul(p1, yk))
    union = T.add(T.tsum(p1), float(y.sum()))
    dice = T.sub(1.0, T.div(T.add(T.mul(inter, 2.0), _DICE_SMOOTH),
                            T.add(union, _DICE_SMOOTH)))
    return T.add(T.mul(ce, ce_weight), T.mul(dice, dice_weight))


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Adam with bias correction over a list of (name, tensor) params."""

    def __init__(self, params, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, (_, p) in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            m = self.m[i]
            v = self.v[i]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# ---------------------------------------------------------------------------
# configuration

@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 2
    steps: int = 2000
    ce_weight: float = 1.0
    dice_weight: float = 1.0
    seed: int = 0
    eval_every: int = 250
    use_flow: bool = True
    use_2ds: bool = True

    def __post_init__(self):
        # lr == 0 is allowed on purpose: a frozen run is the cheapest
        # way to assert that the loop itself does not touch parameters
        if self.lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")
        if self.ce_weight < 0 or self.dice_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.ce_weight == 0 and self.dice_weight == 0:
            raise ValueError("at least one loss weight must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.steps < 0:
            raise ValueError("step count must be >= 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must sit in [0, 1)")


# ---------------------------------------------------------------------------
# loops

def evaluate(model, dataset) -> tuple[MetricResult, ConfusionCounts]:
    """Aggregate confusion counts over a dataset, then score once."""
    total = ConfusionCounts(0, 0, 0, 0)
    for pair in dataset:
        probs, _ = model(Tensor(pair.img_t1), Tensor(pair.img_t2))
        pred = np.argmax(probs.data, axis=0)
        total = total + confusion(pred, pair.label)
    return metrics(total), total


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    rows: list[dict] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def final_metrics(self) -> MetricResult | None:
        for row in reversed(self.rows):
            if row["f1"] != "":
                return row["_metrics"]
        return None


def _log_row(writer, step, loss, result: MetricResult | None):
    if result is None:
        cells = [""] * 6
    else:
        d = result.as_dict()
        cells = [f"{d[k]:.6f}" for k in CSV_HEADER[2:]]
    writer.writerow([step, f"{loss:.6f}", *cells])


def train(model, dataset, cfg: TrainConfig, eval_set=None,
          log_path=None, progress=None) -> TrainResult:
    """Mini-batch Adam over (img_t1, img_t2, label) sample pairs.

    Batches are drawn with a generator seeded from ``cfg.seed``, so two
    runs with equal seeds produce bit-identical loss curves.  Metric
    columns are filled only on eval steps (every ``cfg.eval_every``
    steps and at the end); other rows leave them empty.  A non-finite
    loss aborts with DivergedError.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.named_parameters(), lr=cfg.lr, beta1=cfg.beta1,
               beta2=cfg.beta2, eps=cfg.eps)
    result = TrainResult()
    t0 = time.perf_counter()
    log_file = open(log_path, "w", newline="") if log_path else None
    writer = csv.writer(log_file) if log_file else None
    if writer:
        writer.writerow(CSV_HEADER)
    try:
        for step in range(cfg.steps):
            take = min(cfg.batch_size, len(dataset))
            picks = rng.choice(len(dataset), size=take, replace=False)
            opt.zero_grad()
            with T.Tape() as tape:
                total = None
                for k in picks:
                    pair = dataset[k]
                    probs, _ = model(Tensor(pair.img_t1), Tensor(pair.img_t2))
                    part = loss_fn(probs, pair.label,
                                   cfg.ce_weight, cfg.dice_weight)
                    part = T.mul(part, 1.0 / take)
                    total = part if total is None else T.add(total, part)
                loss = float(total.data)
                if not np.isfinite(loss):
                    raise DivergedError(
                        f"loss became {loss} at step {step}")
                tape.backward(total)
            tape.release()
            opt.step()
            result.losses.append(loss)
            want_eval = (eval_set is not None
                         and ((cfg.eval_every > 0
                               and (step + 1) % cfg.eval_every == 0)
                              or step == cfg.steps - 1))
            mres = evaluate(model, eval_set)[0] if want_eval else None
            row = {"step": step, "loss": loss,
                   "f1": f"{mres.f1:.6f}" if mres else "",
                   "_metrics": mres}
            result.rows.append(row)
            if writer:
                _log_row(writer, step, loss, mres)
                if mres or step % 50 == 0:
                    log_file.flush()
            if progress and (mres or (step + 1) % 100 == 0):
                progress(step, loss, mres)
    finally:
        if log_file:
            log_file.close()
    result.seconds = time.perf_counter() - t0
    return result
