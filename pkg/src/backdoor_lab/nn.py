"""A small deterministic neural-network engine on top of numpy.

Layers are plain objects holding their parameters as numpy arrays. A forward
pass can record a *tape* (a list of per-layer caches) which :func:`backward`
consumes to produce parameter gradients. Parameters and activations live in
``float32`` by default; passing ``dtype=np.float64`` to :func:`build_model`
gives an end-to-end 64-bit model for finite-difference checks.

Input layout is ``(N, C, H, W)``.
"""

from dataclasses import dataclass, field
import copy as _copy

import numpy as np

from .errors import ContractError, InputError, NumericError

__all__ = [
    "Dense", "ReLU", "Conv2d", "MaxPool2d", "Flatten", "Model", "build_model",
    "forward", "backward", "cross_entropy", "loss_and_grads", "predict",
    "OptState", "sgd_state", "step", "he_uniform",
]


def _acc(a):
    # reductions over the batch are carried out in 64-bit
    return a.astype(np.float64, copy=False)


class Dense:
    kind = "dense"
    tag = 1

    def __init__(self, in_features, out_features, dtype=np.float32):
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        self.W = np.zeros((self.out_features, self.in_features), dtype=dtype)
        self.b = np.zeros(self.out_features, dtype=dtype)

    @property
    def params(self):
        return [self.W, self.b]

    @params.setter
    def params(self, values):
        self.W, self.b = values

    @property
    def extents(self):
        return (self.in_features, self.out_features)

    def check_input(self, shape):
        if len(shape) != 2 or shape[1] != self.in_features:
            raise ContractError(f"expects (N, {self.in_features}), got {tuple(shape)}")
        return (shape[0], self.out_features)

    def forward(self, x):
        return x @ self.W.T + self.b, x

    def backward(self, cache, g):
        x = cache
        dW = (_acc(g).T @ _acc(x)).astype(self.W.dtype)
        db = _acc(g).sum(axis=0).astype(self.b.dtype)
        return g @ self.W, [dW, db]


class ReLU:
    kind = "relu"
    tag = 2
    params = []
    extents = ()

    def check_input(self, shape):
        return tuple(shape)

    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, cache, g):
        return g * cache, []


class Conv2d:
    """3x3 convolution, stride 1, zero padding 1 (spatial size preserved)."""

    kind = "conv2d"
    tag = 3
    k = 3

    def __init__(self, in_channels, out_channels, dtype=np.float32):
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.W = np.zeros((self.out_channels, self.in_channels, 3, 3), dtype=dtype)
        self.b = np.zeros(self.out_channels, dtype=dtype)

    @property
    def params(self):
        return [self.W, self.b]

    @params.setter
    def params(self, values):
        self.W, self.b = values

    @property
    def extents(self):
        return (self.in_channels, self.out_channels)

    def check_input(self, shape):
        if len(shape) != 4 or shape[1] != self.in_channels:
            raise ContractError(
                f"expects (N, {self.in_channels}, H, W), got {tuple(shape)}")
        return (shape[0], self.out_channels, shape[2], shape[3])

    @staticmethod
    def _im2col(x):
        n, c, h, w = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
        # (N, C, H, W, 3, 3) -> (N, H, W, C, 3, 3) -> (N*H*W, C*9)
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)

    def forward(self, x):
        n, _, h, w = x.shape
        cols = self._im2col(x)
        out = cols @ self.W.reshape(self.out_channels, -1).T + self.b
        out = out.reshape(n, h, w, self.out_channels).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(out), (x.shape, cols)

    def backward(self, cache, g):
        (n, c, h, w), cols = cache
        g2 = g.transpose(0, 2, 3, 1).reshape(n * h * w, self.out_channels)
        dW = (_acc(g2).T @ _acc(cols)).reshape(self.W.shape).astype(self.W.dtype)
        db = _acc(g2).sum(axis=0).astype(self.b.dtype)
        dcols = (g2 @ self.W.reshape(self.out_channels, -1)).reshape(n, h, w, c, 3, 3)
        dxp = np.zeros((n, c, h + 2, w + 2), dtype=g.dtype)
        for i in range(3):
            for j in range(3):
                dxp[:, :, i:i + h, j:j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, 1:-1, 1:-1], [dW, db]


class MaxPool2d:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped."""

    kind = "maxpool2d"
    tag = 4
    params = []
    extents = ()

    def check_input(self, shape):
        if len(shape) != 4 or shape[2] < 2 or shape[3] < 2:
            raise ContractError(f"expects (N, C, H>=2, W>=2), got {tuple(shape)}")
        return (shape[0], shape[1], shape[2] // 2, shape[3] // 2)

    def forward(self, x):
        n, c, h, w = x.shape
        ho, wo = h // 2, w // 2
        blocks = x[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2)
        blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
        # argmax takes the first maximum, which fixes tie routing
        idx = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        return out, (x.shape, idx)

    def backward(self, cache, g):
        (n, c, h, w), idx = cache
        ho, wo = h // 2, w // 2
        blocks = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
        np.put_along_axis(blocks, idx[..., None], g[..., None], axis=-1)
        blocks = blocks.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros((n, c, h, w), dtype=g.dtype)
        dx[:, :, :2 * ho, :2 * wo] = blocks.reshape(n, c, 2 * ho, 2 * wo)
        return dx, []


class Flatten:
    kind = "flatten"
    tag = 5
    params = []
    extents = ()

    def check_input(self, shape):
        return (shape[0], int(np.prod(shape[1:])))

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, g):
        return g.reshape(cache), []


LAYER_KINDS = {cls.tag: cls for cls in (Dense, ReLU, Conv2d, MaxPool2d, Flatten)}


@dataclass
class Model:
    """Feature extractor followed by exactly one final Dense classifier."""

    layers: list
    input_shape: tuple = None

    def __post_init__(self):
        if not self.layers or not isinstance(self.layers[-1], Dense):
            raise ContractError("the last layer must be the Dense classifier")
        if self.input_shape is not None:
            self.input_shape = tuple(int(s) for s in self.input_shape)
            shape = (1, *self.input_shape)
            for i, layer in enumerate(self.layers):
                try:
                    shape = layer.check_input(shape)
                except ContractError as exc:
                    raise ContractError(f"layer {i} ({layer.kind}) {exc}") from None

    @property
    def features(self):
        return self.layers[:-1]

    @property
    def classifier(self):
        return self.layers[-1]

    @property
    def num_classes(self):
        return self.classifier.out_features

    @property
    def feature_dim(self):
        return self.classifier.in_features

    @property
    def dtype(self):
        return self.classifier.W.dtype

    def params(self):
        return [p for layer in self.layers for p in layer.params]

    def copy(self):
        return _copy.deepcopy(self)

    def astype(self, dtype):
        out = self.copy()
        for layer in out.layers:
            if layer.params:
                layer.params = [p.astype(dtype) for p in layer.params]
        return out

    def equals(self, other):
        """Bit-exact comparison of architecture and parameters."""
        if [l.kind for l in self.layers] != [l.kind for l in other.layers]:
            return False
        return all(a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
                   for a, b in zip(self.params(), other.params()))


def he_uniform(fan_in, rng, size=None, dtype=np.float32):
    """Draw He-uniform weights from U(-std, std) with ``std = sqrt(2 / fan_in)``.

    ``size`` defaults to ``fan_in`` (one weight row).
    """
    if int(fan_in) < 1:
        raise InputError(f"fan_in must be >= 1, got {fan_in}")
    std = np.sqrt(2.0 / fan_in)
    dtype = np.dtype(dtype).type
    out = rng.uniform(-std, std, size=fan_in if size is None else size).astype(dtype)
    # float32 rounding may touch but never exceed the float32 bound
    bound = dtype(std)
    return np.clip(out, -bound, bound)


def build_model(input_shape, num_classes, rng, conv=(), hidden=(64, 32), dtype=np.float32):
    """Build ``[Conv-ReLU-Pool]* -> Flatten -> [Dense-ReLU]* -> Dense``.

    Weights are He-uniform, biases zero. The default arguments give the desk
    model ``Flatten -> Dense(192, 64) -> ReLU -> Dense(64, 32) -> ReLU ->
    Dense(32, K)`` for ``3x8x8`` inputs.
    """
    c, h, w = input_shape
    layers = []
    for out_ch in conv:
        layer = Conv2d(c, out_ch, dtype=dtype)
        layer.W[...] = he_uniform(c * 9, rng, size=layer.W.shape, dtype=dtype)
        layers += [layer, ReLU(), MaxPool2d()]
        c, h, w = out_ch, h // 2, w // 2
    layers.append(Flatten())
    width = c * h * w
    for units in (*hidden, num_classes):
        layer = Dense(width, units, dtype=dtype)
        layer.W[...] = he_uniform(width, rng, size=layer.W.shape, dtype=dtype)
        layers += [layer, ReLU()]
        width = units
    layers.pop()  # no activation after the classifier
    return Model(layers, input_shape=(input_shape[0], input_shape[1], input_shape[2]))


def forward(model, batch, tape=None):
    """Run ``batch`` through ``model`` and return ``(features, logits)``.

    If ``tape`` is a list, per-layer caches are appended to it for
    :func:`backward`.
    """
    x = np.asarray(batch)
    if x.dtype != model.dtype:
        x = x.astype(model.dtype)
    if model.input_shape is not None and tuple(x.shape[1:]) != model.input_shape:
        raise ContractError(
            f"layer 0 ({model.layers[0].kind}) expects input (N, {model.input_shape}),"
            f" got {x.shape}")
    features = None
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        try:
            layer.check_input(x.shape)
        except ContractError as exc:
            raise ContractError(f"layer {i} ({layer.kind}) {exc}") from None
        if i == last:
            features = x
        x, cache = layer.forward(x)
        if tape is not None:
            tape.append(cache)
    return features, x


def predict(model, batch, chunk=1024):
    """Argmax class per sample; ties go to the lowest class index."""
    out = []
    for s in range(0, len(batch), chunk):
        _, logits = forward(model, batch[s:s + chunk])
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. ``logits``.

    Computed in 64-bit with max-subtraction, so saturated logits do not
    overflow. The gradient is returned in the dtype of ``logits``.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ContractError(f"labels shape {labels.shape} does not match batch {n}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise InputError(f"labels must lie in [0, {k})")
    z = _acc(logits)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z - lse[:, None]
    loss = float(-logp[np.arange(n), labels].sum() / n)
    p = np.exp(logp)
    p[np.arange(n), labels] -= 1.0
    return loss, (p / n).astype(logits.dtype)


def backward(model, tape, dlogits):
    """Back-propagate ``dlogits`` through a recorded tape.

    Returns gradients aligned with ``model.params()``.
    """
    if len(tape) != len(model.layers):
        raise ContractError("tape does not match the model; run forward with tape=[] first")
    g = dlogits
    per_layer = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        g, grads = model.layers[i].backward(tape[i], g)
        per_layer[i] = grads
    return [gr for grads in per_layer for gr in grads]


def loss_and_grads(model, batch, labels):
    """Cross-entropy on ``(batch, labels)`` plus gradients for every parameter."""
    tape = []
    _, logits = forward(model, batch, tape=tape)
    loss, dlogits = cross_entropy(logits, labels)
    return loss, backward(model, tape, dlogits)


@dataclass
class OptState:
    """Momentum-SGD state: ``v <- mu * v + g``, no dampening, no Nesterov."""

    lr: float
    momentum: float = 0.9
    velocity: list = field(default_factory=list)

    def __post_init__(self):
        if not self.lr >= 0:
            raise InputError(f"lr must be >= 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise InputError(f"momentum must be in [0, 1), got {self.momentum}")


def sgd_state(params, lr, momentum=0.9):
    return OptState(lr=lr, momentum=momentum, velocity=[np.zeros_like(p) for p in params])


def step(opt, params, grads, direction="descend"):
    """Apply one momentum update in place.

    ``direction="ascend"`` adds ``lr * v`` instead of subtracting it, which is
    how loss maximisation is carried out.
    """
    if direction not in ("descend", "ascend"):
        raise InputError(f"direction must be 'descend' or 'ascend', got {direction!r}")
    if len(params) != len(grads) or len(params) != len(opt.velocity):
        raise ContractError("params, grads and velocity buffers differ in length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")
    for p, g, v in zip(params, grads, opt.velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ContractError(f"shape mismatch {p.shape} / {g.shape} / {v.shape}")
        v *= p.dtype.type(opt.momentum)
        v += g
        upd = p.dtype.type(opt.lr) * v
        if direction == "descend":
            p -= upd
        else:
            p += upd
