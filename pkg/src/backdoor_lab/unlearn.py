"""Loss-maximising unlearning and outlier detection over classifier neurons.

Unlearning runs gradient ascent on a small clean set until accuracy collapses.
The classifier rows are snapshotted before and after; rows whose aggregated
change is an outlier under a robust dispersion rule are reported as
suspicious.
"""

from dataclasses import dataclass, field
import io

import numpy as np

from . import nn
from .errors import InputError, NonConvergenceError, NumericError
from .train import clean_accuracy, epoch_rng, iterate_minibatches

__all__ = [
    "UnlearnConfig", "WeightSnapshot", "SuspicionReport", "unlearn",
    "aggregate_delta", "dispersion_stats", "identify_suspicious", "rank_deviations",
    "has_ties",
    "DISP_EPS", "TIE_RTOL",
]

DISP_EPS = 1e-12
TIE_RTOL = 1e-9
METHODS = ("mad", "sd", "iqr")


@dataclass(frozen=True)
class UnlearnConfig:
    lr: float = 0.01
    ca_min: float = 0.2
    max_epochs: int = 50
    batch_size: int = 16
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.ca_min < 1.0:
            raise InputError(f"ca_min must be in (0, 1), got {self.ca_min}")
        if self.lr < 0 or self.max_epochs < 1 or self.batch_size < 1:
            raise InputError(f"invalid unlearning config {self}")


@dataclass(frozen=True)
class WeightSnapshot:
    W: np.ndarray
    b: np.ndarray
    tag: str

    @classmethod
    def capture(cls, model, tag):
        clf = model.classifier
        return cls(clf.W.copy(), clf.b.copy(), tag)


@dataclass
class SuspicionReport:
    delta_agg: np.ndarray
    center: float
    dispersion: float
    deviations: np.ndarray
    flagged: list
    method: str
    tau: float
    hard_threshold: int
    epochs_used: int = 0
    fine_tune_only: bool = False
    notes: list = field(default_factory=list)

    def to_csv(self):
        buf = io.StringIO()
        buf.write(f"# method={self.method},tau={self.tau:g},ht={self.hard_threshold},"
                  f"center={self.center:.6f},dispersion={self.dispersion:.6f},"
                  f"epochs_used={self.epochs_used},fine_tune_only={int(self.fine_tune_only)}\n")
        buf.write("neuron,delta_agg,deviation,flagged\n")
        flagged = set(self.flagged)
        for i, (d, dev) in enumerate(zip(self.delta_agg, self.deviations)):
            buf.write(f"{i},{d:.6f},{dev:.6f},{int(i in flagged)}\n")
        return buf.getvalue()


def unlearn(model, defense_ds, cfg):
    """Gradient-ascend a copy of ``model`` on ``defense_ds`` until accuracy <= ``ca_min``.

    All parameters move. Accuracy on the whole defense set is checked before
    each epoch. Returns ``(pre, post, epochs_used, model)`` where the returned
    model is the untouched input.

    Raises
    ------
    NonConvergenceError
        If accuracy is still above ``ca_min`` after ``max_epochs`` epochs.
    """
    if len(defense_ds) == 0:
        raise InputError("empty defense set")
    if defense_ds.poison_mask.any():
        raise InputError("defense set contains poisoned samples")
    pre = WeightSnapshot.capture(model, "pre")
    work = model.copy()
    params = work.params()
    opt = nn.sgd_state(params, cfg.lr, cfg.momentum)
    x, y = defense_ds.images, defense_ds.labels
    epochs = 0
    while clean_accuracy(work, defense_ds) > cfg.ca_min:
        if epochs == cfg.max_epochs:
            post = WeightSnapshot.capture(work, "post")
            raise NonConvergenceError(
                f"accuracy still above {cfg.ca_min} after {epochs} unlearning epochs",
                pre=pre, post=post, epochs_used=epochs)
        for idx in iterate_minibatches(len(y), cfg.batch_size, epoch_rng(cfg.seed, epochs)):
            loss, grads = nn.loss_and_grads(work, x[idx], y[idx])
            if not np.isfinite(loss):
                raise NumericError(f"unlearning loss diverged at epoch {epochs}")
            nn.step(opt, params, grads, "ascend")
        epochs += 1
    post = WeightSnapshot.capture(work, "post")
    return pre, post, epochs, model


def aggregate_delta(pre, post):
    """Per-neuron L1 change over incoming weights and bias, in 64-bit."""
    if pre.W.shape != post.W.shape or pre.b.shape != post.b.shape:
        raise InputError("snapshots have different shapes")
    dW = np.abs(post.W.astype(np.float64) - pre.W.astype(np.float64)).sum(axis=1)
    db = np.abs(post.b.astype(np.float64) - pre.b.astype(np.float64))
    return dW + db


def dispersion_stats(delta_agg, method="mad"):
    """Return ``(center, dispersion, deviations)`` for one of ``mad``, ``sd``, ``iqr``.

    ``mad`` centres on the median and uses the median absolute deviation;
    ``sd`` centres on the mean with the population standard deviation;
    ``iqr`` centres on the median with ``Q3 - Q1`` (linear interpolation).
    """
    x = np.asarray(delta_agg, dtype=np.float64)
    if x.ndim != 1 or len(x) < 2:
        raise InputError("need a 1-D vector with at least two entries")
    method = method.lower()
    if method == "mad":
        center = np.median(x)
        dev = np.abs(x - center)
        spread = np.median(dev)
    elif method == "sd":
        center = x.mean()
        dev = np.abs(x - center)
        spread = x.std()
    elif method == "iqr":
        center = np.median(x)
        dev = np.abs(x - center)
        q1, q3 = np.percentile(x, [25, 75])
        spread = q3 - q1
    else:
        raise InputError(f"unknown dispersion method {method!r}")
    return float(center), float(spread), dev


def has_ties(dev, rel_tol=TIE_RTOL):
    """True if two deviations are equal up to ``rel_tol * max(dev)``."""
    d = np.sort(np.asarray(dev, dtype=np.float64))
    return bool(len(d) > 1 and np.min(np.diff(d)) <= rel_tol * d[-1])


def rank_deviations(dev, rel_tol=TIE_RTOL):
    """Indices by descending deviation; near-equal deviations are ordered by index.

    Deviations within ``rel_tol * max(dev)`` of the start of a run count as
    tied. Without this, rounding in ``|c x - median(c x)|`` can reorder exact
    ties after rescaling.
    """
    dev = np.asarray(dev, dtype=np.float64)
    order = np.lexsort((np.arange(len(dev)), -dev))
    tol = rel_tol * float(dev.max(initial=0.0))
    groups, anchor, gid = np.empty(len(dev), dtype=np.int64), None, -1
    for i in order:
        if anchor is None or anchor - dev[i] > tol:
            anchor, gid = dev[i], gid + 1
        groups[i] = gid
    return [int(i) for i in np.lexsort((np.arange(len(dev)), groups))]


def identify_suspicious(delta_agg, method="mad", tau=3.5, hard_threshold=2, epochs_used=0):
    """Flag neurons whose deviation exceeds ``tau * dispersion``, at most ``hard_threshold``.

    Candidates are visited in descending order of deviation (ties, up to a
    relative tolerance, go to the lower index first). A dispersion of
    (almost) zero flags nothing.
    """
    if not tau > 0:
        raise InputError(f"tau must be > 0, got {tau}")
    if hard_threshold < 1:
        raise InputError(f"hard threshold must be >= 1, got {hard_threshold}")
    x = np.asarray(delta_agg, dtype=np.float64)
    center, spread, dev = dispersion_stats(x, method)
    flagged = []
    if spread > DISP_EPS:
        limit = tau * spread
        for i in rank_deviations(dev):
            if len(flagged) >= hard_threshold or not dev[i] > limit:
                break
            flagged.append(int(i))
    return SuspicionReport(delta_agg=x, center=center, dispersion=spread, deviations=dev,
                           flagged=flagged, method=method.lower(), tau=float(tau),
                           hard_threshold=int(hard_threshold), epochs_used=int(epochs_used))
