"""Reinitialisation of flagged classifier neurons and penalised fine-tuning.

The full defense composes unlearning, outlier identification, He
reinitialisation of the flagged rows and fine-tuning on the defense set with
a penalty that pushes each flagged row away from its original direction.
"""

from dataclasses import dataclass
import logging

import numpy as np

from . import nn
from .errors import InputError, NumericError
from .train import MetricsReport, epoch_rng, iterate_minibatches
from .unlearn import SuspicionReport, aggregate_delta, identify_suspicious, unlearn

__all__ = [
    "RelearnConfig", "OriginalRowBank", "reinit_neurons", "similarity_penalty",
    "relearn", "ulrl_defend", "select_random_neurons", "NORM_EPS",
]

log = logging.getLogger(__name__)

NORM_EPS = 1e-12
REGULARIZERS = ("cosine", "inner_product", "none")


@dataclass(frozen=True)
class RelearnConfig:
    lr: float = 0.01
    alpha: float = 0.7
    epochs: int = 20
    batch_size: int = 16
    regularizer: str = "cosine"
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.regularizer not in REGULARIZERS:
            raise InputError(f"regularizer must be one of {REGULARIZERS}")
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0 or self.alpha < 0:
            raise InputError(f"invalid relearning config {self}")

    @property
    def effective_alpha(self):
        return 0.0 if self.regularizer == "none" else self.alpha


@dataclass(frozen=True)
class OriginalRowBank:
    """Classifier rows of the flagged neurons, captured before reinitialisation."""

    indices: tuple
    rows: np.ndarray

    @classmethod
    def capture(cls, model, indices):
        indices = tuple(int(i) for i in indices)
        rows = model.classifier.W[list(indices)].astype(np.float64)
        rows.flags.writeable = False
        return cls(indices, rows)


def select_random_neurons(k, n, rng):
    """Uniformly pick ``n`` of ``k`` neuron indices without replacement (sorted)."""
    if not 1 <= n <= k:
        raise InputError(f"need 1 <= n <= {k}, got {n}")
    return sorted(int(i) for i in rng.choice(k, size=n, replace=False))


def reinit_neurons(model, flagged, rng):
    """Return a copy of ``model`` whose flagged classifier rows are He-uniform and biases 0."""
    flagged = list(flagged)
    k = model.num_classes
    if not flagged:
        raise InputError("no neurons to reinitialise")
    if any(not 0 <= i < k for i in flagged):
        raise InputError(f"neuron index outside [0, {k})")
    out = model.copy()
    clf = out.classifier
    for i in flagged:
        clf.W[i] = nn.he_uniform(clf.in_features, rng, dtype=clf.W.dtype)
        clf.b[i] = 0
    return out


def similarity_penalty(W, bank, kind="cosine"):
    """Summed similarity between flagged rows of ``W`` and their originals.

    Returns ``(value, grad)`` where ``grad`` has the shape of ``W`` and is zero
    outside the flagged rows. Rows with (near) zero norm contribute nothing.
    """
    grad = np.zeros(W.shape, dtype=np.float64)
    if kind == "none" or not bank.indices:
        return 0.0, grad.astype(W.dtype)
    if bank.rows.shape[1] != W.shape[1]:
        raise InputError("bank rows and classifier disagree on the feature width")
    value = 0.0
    for i, o in zip(bank.indices, bank.rows):
        w = W[i].astype(np.float64)
        if kind == "inner_product":
            value += float(w @ o)
            grad[i] = o
        elif kind == "cosine":
            nw, no = np.linalg.norm(w), np.linalg.norm(o)
            if nw <= NORM_EPS or no <= NORM_EPS:
                continue
            c = float(w @ o) / (nw * no)
            value += c
            grad[i] = o / (nw * no) - c * w / nw**2
        else:
            raise InputError(f"unknown similarity {kind!r}")
    return value, grad.astype(W.dtype)


def relearn(model, bank, defense_ds, cfg, monitor=None):
    """Fine-tune a copy of ``model`` on ``defense_ds`` with the similarity penalty.

    Each step descends on ``CE(batch) + alpha * penalty``; the penalty is
    added once per step, not per sample. Returns ``(model, MetricsReport)``.
    """
    work = model.copy()
    params = work.params()
    opt = nn.sgd_state(params, cfg.lr, cfg.momentum)
    alpha = cfg.effective_alpha
    w_pos = len(params) - 2  # classifier W sits just before its bias
    x, y = defense_ds.images, defense_ds.labels
    report = MetricsReport()
    for epoch in range(cfg.epochs):
        total, seen = 0.0, 0
        for idx in iterate_minibatches(len(y), cfg.batch_size, epoch_rng(cfg.seed, epoch)):
            loss, grads = nn.loss_and_grads(work, x[idx], y[idx])
            if alpha:
                pen, pgrad = similarity_penalty(work.classifier.W, bank, cfg.regularizer)
                loss += alpha * pen
                grads[w_pos] = grads[w_pos] + work.dtype.type(alpha) * pgrad
            if not np.isfinite(loss):
                raise NumericError(f"relearning loss diverged at epoch {epoch}")
            nn.step(opt, params, grads, "descend")
            total += loss * len(idx)
            seen += len(idx)
        c_acc, asr = monitor(work) if monitor else (float("nan"), float("nan"))
        report.log("relearn", epoch, total / seen, c_acc, asr)
    if monitor:
        report.clean_accuracy, report.attack_success_rate = monitor(work)
    return work, report


def ulrl_defend(model, defense_ds, ucfg, rcfg, rng, method="mad", tau=3.5,
                hard_threshold=2, random_neurons=None, monitor=None):
    """Unlearn, flag, reinitialise and relearn; the input model is not modified.

    Parameters
    ----------
    model : Model
        The (possibly) backdoored classifier.
    defense_ds : LabeledDataset
        Small clean set available to the defender.
    ucfg, rcfg : UnlearnConfig, RelearnConfig
    rng : numpy.random.Generator
        Source for reinitialisation (and random neuron choice).
    method, tau, hard_threshold
        Outlier rule used to flag classifier neurons.
    random_neurons : int, optional
        Skip unlearning and reinitialise this many randomly chosen neurons
        instead (the random-selection ablation).
    monitor : callable, optional
        ``model -> (c_acc, asr)``, logged after every relearning epoch.

    Returns
    -------
    (Model, SuspicionReport, MetricsReport)
    """
    if len(defense_ds) == 0:
        raise InputError("empty defense set")
    if defense_ds.poison_mask.any():
        raise InputError("defense set contains poisoned samples")
    k = model.num_classes
    if random_neurons is not None:
        flagged = select_random_neurons(k, int(random_neurons), rng)
        zeros = np.zeros(k)
        report = SuspicionReport(delta_agg=zeros, center=0.0, dispersion=0.0,
                                 deviations=zeros.copy(), flagged=flagged, method="random",
                                 tau=float(tau), hard_threshold=int(random_neurons))
    else:
        pre, post, epochs_used, _ = unlearn(model, defense_ds, ucfg)
        report = identify_suspicious(aggregate_delta(pre, post), method, tau,
                                     hard_threshold, epochs_used)
    if report.flagged:
        bank = OriginalRowBank.capture(model, report.flagged)
        start = reinit_neurons(model, report.flagged, rng)
    else:
        report.fine_tune_only = True
        report.notes.append("no suspicious neurons; relearning ran as plain fine-tuning")
        log.warning("no suspicious neurons flagged; falling back to plain fine-tuning")
        bank = OriginalRowBank((), np.zeros((0, model.feature_dim)))
        start = model.copy()
    purified, metrics = relearn(start, bank, defense_ds, rcfg, monitor=monitor)
    return purified, report, metrics
