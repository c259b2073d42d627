"""Training on a (possibly poisoned) mixture and the two evaluation metrics."""

from dataclasses import dataclass, field
import io

import numpy as np

from . import nn
from .data import apply_trigger
from .errors import InputError, NumericError

__all__ = [
    "TrainConfig", "MetricsReport", "train_backdoored", "clean_accuracy",
    "attack_success_rate", "iterate_minibatches", "epoch_rng",
]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise InputError(f"invalid training config {self}")


@dataclass
class MetricsReport:
    """Per-epoch curve rows plus final clean accuracy and ASR."""

    clean_accuracy: float = float("nan")
    attack_success_rate: float = float("nan")
    rows: list = field(default_factory=list)

    def log(self, phase, epoch, loss, c_acc=float("nan"), asr=float("nan")):
        self.rows.append((phase, epoch, loss, c_acc, asr))

    def to_csv(self):
        buf = io.StringIO()
        buf.write("phase,epoch,loss,c_acc,asr\n")
        for phase, epoch, loss, c_acc, asr in self.rows:
            buf.write(f"{phase},{epoch},{_fmt(loss)},{_fmt(c_acc)},{_fmt(asr)}\n")
        last_loss = self.rows[-1][2] if self.rows else float("nan")
        buf.write(f"summary,,{_fmt(last_loss)},{_fmt(self.clean_accuracy)},"
                  f"{_fmt(self.attack_success_rate)}\n")
        return buf.getvalue()


def _fmt(x):
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return ""
    return f"{float(x):.6f}"


def epoch_rng(seed, epoch):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(epoch)])))


def iterate_minibatches(n, batch_size, rng):
    """Yield index arrays of a fresh permutation (numpy's shuffle is Fisher-Yates)."""
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def train_backdoored(model, poisoned_ds, cfg, monitor=None):
    """Minimise cross-entropy over the (poisoned) training mixture in place.

    ``model`` is an initialised :class:`~backdoor_lab.nn.Model`; it is mutated
    and also returned together with a :class:`MetricsReport`. ``monitor`` is an
    optional callable ``model -> (c_acc, asr)`` evaluated after every epoch.
    """
    params = model.params()
    opt = nn.sgd_state(params, cfg.lr, cfg.momentum)
    report = MetricsReport()
    x, y = poisoned_ds.images, poisoned_ds.labels
    for epoch in range(cfg.epochs):
        total, seen = 0.0, 0
        for idx in iterate_minibatches(len(y), cfg.batch_size, epoch_rng(cfg.seed, epoch)):
            loss, grads = nn.loss_and_grads(model, x[idx], y[idx])
            if not np.isfinite(loss):
                raise NumericError(f"training loss diverged at epoch {epoch}")
            try:
                nn.step(opt, params, grads, "descend")
            except NumericError as exc:
                raise NumericError(f"{exc} at epoch {epoch}") from None
            total += loss * len(idx)
            seen += len(idx)
        c_acc, asr = monitor(model) if monitor else (float("nan"), float("nan"))
        report.log("train", epoch, total / seen, c_acc, asr)
    if monitor:
        report.clean_accuracy, report.attack_success_rate = monitor(model)
    return model, report


def clean_accuracy(model, test_ds):
    """Fraction of samples whose argmax prediction equals the label."""
    if len(test_ds) == 0:
        raise InputError("clean_accuracy on an empty dataset")
    pred = nn.predict(model, test_ds.images)
    return float(np.mean(pred == test_ds.labels))


def attack_success_rate(model, test_ds, spec, target):
    """Fraction of triggered non-target test images classified as ``target``."""
    keep = test_ds.labels != target
    if not keep.any():
        raise InputError("no non-target samples to measure ASR on")
    triggered = apply_trigger(test_ds.images[keep], spec)
    pred = nn.predict(model, triggered)
    return float(np.mean(pred == target))
