"""Central finite-difference checks for layers, whole models and the penalty.

All checks run in float64. Each probe perturbs one randomly chosen scalar by
``+-h`` and compares the numeric slope with the analytic gradient. Probes that
would move a ReLU input or a max-pool winner across a kink are redrawn, since
the finite difference is meaningless there.
"""

import numpy as np

from . import nn
from .relearn import similarity_penalty

__all__ = ["relative_error", "check_layer", "check_model", "check_penalty"]

REL_FLOOR = 1e-5


def relative_error(analytic, numeric, floor=REL_FLOOR):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _kink_signature(layers, x):
    """ReLU sign pattern and max-pool winners along a forward pass."""
    sig = []
    for layer in layers:
        if isinstance(layer, nn.ReLU):
            sig.append((x > 0).tobytes())
        out, cache = layer.forward(x)
        if isinstance(layer, nn.MaxPool2d):
            sig.append(cache[1].tobytes())
        x = out
    return tuple(sig)


def _probe(slot, i, h, objective, stable):
    """Numeric derivative of ``objective`` along entry ``i`` of ``slot``, or None at a kink."""
    old = slot.flat[i]
    slot.flat[i] = old + h
    fp, sp = objective(), stable()
    slot.flat[i] = old - h
    fm, sm = objective(), stable()
    slot.flat[i] = old
    if not (sp and sm):
        return None
    return (fp - fm) / (2 * h)


def check_layer(layer, x, rng, n_probes=100, h=1e-4, max_draws=20):
    """Probe input and parameter gradients of one layer under ``sum(r * layer(x))``.

    ``layer`` and ``x`` must be float64. Returns the list of relative errors.
    """
    x = np.array(x, dtype=np.float64)
    out, cache = layer.forward(x)
    r = rng.normal(size=out.shape)
    dx, grads = layer.backward(cache, r)
    slots = [(x, dx)] + list(zip(layer.params, grads))
    base = _kink_signature([layer], x)

    def objective():
        return float(np.sum(r * layer.forward(x)[0]))

    def stable():
        return _kink_signature([layer], x) == base

    return _run_probes(slots, objective, stable, rng, n_probes, h, max_draws)


def check_model(model, x, y, rng, n_probes=100, h=1e-4, max_draws=20):
    """Probe every parameter of a float64 model under mean cross-entropy."""
    loss, grads = nn.loss_and_grads(model, x, y)
    params = model.params()
    base = _kink_signature(model.layers, x)

    def objective():
        return nn.cross_entropy(nn.forward(model, x)[1], y)[0]

    def stable():
        return _kink_signature(model.layers, x) == base

    return _run_probes(list(zip(params, grads)), objective, stable, rng, n_probes, h,
                       max_draws)


def check_penalty(W, bank, kind, rng, n_probes=100, h=1e-5):
    """Probe the flagged rows of ``W`` (float64) under ``similarity_penalty``."""
    _, grad = similarity_penalty(W, bank, kind)
    errs = []
    rows = list(bank.indices)
    for _ in range(n_probes):
        i = rows[int(rng.integers(len(rows)))]
        j = int(rng.integers(W.shape[1]))
        old = W[i, j]
        W[i, j] = old + h
        fp = similarity_penalty(W, bank, kind)[0]
        W[i, j] = old - h
        fm = similarity_penalty(W, bank, kind)[0]
        W[i, j] = old
        errs.append(relative_error(grad[i, j], (fp - fm) / (2 * h)))
    return errs


def _run_probes(slots, objective, stable, rng, n_probes, h, max_draws):
    slots = [(p, g) for p, g in slots if p.size]
    errs = []
    for _ in range(n_probes):
        for _ in range(max_draws):
            k = int(rng.integers(len(slots)))
            p, g = slots[k]
            i = int(rng.integers(p.size))
            num = _probe(p, i, h, objective, stable)
            if num is not None:
                errs.append(relative_error(float(g.flat[i]), num))
                break
        else:
            raise RuntimeError("could not find a probe away from activation kinks")
    return errs
