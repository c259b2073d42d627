"""Synthetic image data, trigger injection and poisoning.

Images are ``float32`` arrays shaped ``(N, C, H, W)`` with values in
``[0, 1]``. Each class is a random prototype image plus Gaussian pixel noise,
which is enough structure for a small MLP to separate the classes and leaves
room for a trigger to be learned as a shortcut.
"""

from dataclasses import dataclass, field
import struct

import numpy as np

from .errors import ContractError, InputError

__all__ = [
    "LabeledDataset", "Patch", "Blended", "Sinusoidal", "PoisonPlan",
    "make_prototypes", "gen_synthetic", "apply_trigger", "poison_dataset",
    "sample_defense_set", "default_blend_pattern", "make_trigger",
    "save_dataset", "load_dataset",
]


@dataclass
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    poison_mask: np.ndarray = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.poison_mask is None:
            self.poison_mask = np.zeros(len(self.labels), dtype=bool)
        self.poison_mask = np.asarray(self.poison_mask, dtype=bool)
        if self.images.ndim != 4:
            raise ContractError(f"images must be (N, C, H, W), got {self.images.shape}")
        n = len(self.images)
        if self.labels.shape != (n,) or self.poison_mask.shape != (n,):
            raise ContractError("images, labels and poison_mask disagree on N")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def subset(self, index):
        index = np.asarray(index)
        return LabeledDataset(self.images[index], self.labels[index],
                              self.num_classes, self.poison_mask[index])

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)


# -- triggers ---------------------------------------------------------------

@dataclass(frozen=True)
class Patch:
    """Checkerboard stamped into the bottom-right corner of every channel."""

    size: int = 3
    name = "patch"


@dataclass(frozen=True)
class Blended:
    """Convex blend ``(1 - alpha) * x + alpha * pattern``."""

    pattern: np.ndarray = field(repr=False, compare=False, default=None)
    alpha: float = 0.2
    name = "blended"


@dataclass(frozen=True)
class Sinusoidal:
    """Column-wise offset ``amplitude * sin(2 pi j f / W)``.

    The amplitude lives on the ``[0, 1]`` pixel scale, so 40 grey levels is
    ``40 / 255``.
    """

    amplitude: float = 40 / 255
    frequency: int = 6
    name = "sinusoidal"


def default_blend_pattern(shape, seed=20240601):
    """Fixed low-frequency random image used as the blend pattern.

    A coarse ``(C, ceil(H/2), ceil(W/2))`` uniform grid upsampled 2x by
    repetition.
    """
    c, h, w = shape
    coarse = np.random.default_rng(seed).random((c, (h + 1) // 2, (w + 1) // 2))
    img = np.repeat(np.repeat(coarse, 2, axis=1), 2, axis=2)[:, :h, :w]
    return img.astype(np.float32)


def make_trigger(kind, image_shape, **kw):
    """Build a trigger by name (``patch``, ``blended`` or ``sinusoidal``)."""
    if kind == "patch":
        return Patch(size=int(kw.get("size", 3)))
    if kind == "blended":
        pattern = kw.get("pattern")
        if pattern is None:
            pattern = default_blend_pattern(image_shape)
        return Blended(pattern=pattern, alpha=float(kw.get("alpha", 0.2)))
    if kind == "sinusoidal":
        return Sinusoidal(amplitude=float(kw.get("amplitude", 40 / 255)),
                          frequency=int(kw.get("frequency", 6)))
    raise InputError(f"unknown trigger kind {kind!r}")


def _checkerboard(size, dtype=np.float32):
    i, j = np.indices((size, size))
    return ((i + j) % 2 == 0).astype(dtype)


def apply_trigger(image, spec):
    """Return a triggered copy of ``image``.

    Works on a single ``(C, H, W)`` image or a ``(N, C, H, W)`` batch. Outputs
    stay inside ``[0, 1]``.
    """
    x = np.array(image, dtype=np.float32, copy=True)
    h, w = x.shape[-2:]
    if isinstance(spec, Patch):
        s = spec.size
        if s < 1 or s > h or s > w:
            raise ContractError(f"patch of size {s} does not fit a {h}x{w} image")
        x[..., h - s:, w - s:] = _checkerboard(s)
        return x
    if isinstance(spec, Blended):
        pattern = np.asarray(spec.pattern, dtype=np.float32)
        if pattern.shape != x.shape[-3:]:
            raise ContractError(
                f"blend pattern {pattern.shape} does not match image {x.shape[-3:]}")
        a = np.float32(spec.alpha)
        out = (np.float32(1) - a) * x + a * pattern
        return np.clip(out, 0.0, 1.0)
    if isinstance(spec, Sinusoidal):
        j = np.arange(w)
        wave = (spec.amplitude * np.sin(2 * np.pi * j * spec.frequency / w)).astype(np.float32)
        return np.clip(x + wave, 0.0, 1.0)
    raise InputError(f"unsupported trigger {spec!r}")


# -- generation and poisoning -----------------------------------------------

def make_prototypes(num_classes, shape, separation, rng):
    """One prototype per class: mid-grey plus a random offset of L2 norm ~``separation``.

    Offsets are i.i.d. Gaussian scaled by ``1 / sqrt(C * H * W)``, so two
    prototypes sit about ``separation * sqrt(2)`` apart regardless of image size.
    """
    size = int(np.prod(shape))
    z = rng.normal(0.0, 1.0, size=(num_classes, *shape)) / np.sqrt(size)
    return np.clip(0.5 + separation * z, 0.0, 1.0).astype(np.float32)


def gen_synthetic(num_classes, n_per_class, channels, height, width,
                  prototype_separation, noise_std, rng, prototypes=None):
    """Balanced synthetic dataset of noisy class prototypes, clamped to [0, 1].

    Pass ``prototypes`` to draw a second split (e.g. a test set) around the
    same class centres; otherwise they are drawn from ``rng`` first.
    """
    if num_classes < 2:
        raise InputError(f"need at least 2 classes, got {num_classes}")
    if min(channels, height, width) < 1 or min(height, width) < 4:
        raise InputError(f"degenerate image extents {(channels, height, width)}")
    if n_per_class < 1:
        raise InputError("n_per_class must be >= 1")
    shape = (channels, height, width)
    if prototypes is None:
        prototypes = make_prototypes(num_classes, shape, prototype_separation, rng)
    elif prototypes.shape != (num_classes, *shape):
        raise ContractError(f"prototypes shape {prototypes.shape} mismatch")
    labels = np.repeat(np.arange(num_classes), n_per_class)
    noise = rng.normal(0.0, 1.0, size=(len(labels), *shape)) * noise_std
    images = np.clip(prototypes[labels] + noise, 0.0, 1.0).astype(np.float32)
    return LabeledDataset(images, labels, num_classes)


@dataclass(frozen=True)
class PoisonPlan:
    rate: float = 0.1
    target: int = 0
    mode: str = "all-to-one"

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise InputError(f"poison rate must be in [0, 1], got {self.rate}")
        if self.mode != "all-to-one":
            raise InputError(f"only all-to-one poisoning is supported, got {self.mode!r}")


def poison_dataset(ds, spec, plan, rng):
    """Stamp ``floor(rate * N)`` non-target samples and relabel them to the target.

    Sample order is preserved; chosen indices are drawn uniformly without
    replacement.
    """
    n = len(ds)
    if not 0 <= plan.target < ds.num_classes:
        raise InputError(f"target {plan.target} outside [0, {ds.num_classes})")
    n_poison = int(np.floor(plan.rate * n + 1e-9))
    out = LabeledDataset(ds.images.copy(), ds.labels.copy(), ds.num_classes,
                         ds.poison_mask.copy())
    if n_poison == 0:
        return out
    eligible = np.flatnonzero(ds.labels != plan.target)
    if len(eligible) < n_poison:
        raise InputError(
            f"{n_poison} poisoned samples requested but only {len(eligible)} non-target samples")
    chosen = np.sort(rng.choice(eligible, size=n_poison, replace=False))
    out.images[chosen] = apply_trigger(ds.images[chosen], spec)
    out.labels[chosen] = plan.target
    out.poison_mask[chosen] = True
    return out


def sample_defense_set(clean_ds, fraction, rng):
    """Stratified sample of ``round(fraction * N)`` clean samples.

    Per-class quotas come from largest-remainder allocation of the total
    proportional to class sizes, with ties going to the lower class index; the
    result therefore differs by at most one sample between classes when the
    input is balanced.
    """
    if not 0.0 < fraction <= 1.0:
        raise InputError(f"fraction must be in (0, 1], got {fraction}")
    if clean_ds.poison_mask.any():
        raise InputError("defense data must be drawn from an unpoisoned dataset")
    n = len(clean_ds)
    k = clean_ds.num_classes
    total = int(round(fraction * n))
    if total < k:
        raise InputError(f"fraction {fraction} of {n} samples gives {total} < {k} classes")
    counts = clean_ds.class_counts()
    exact = total * counts / n
    quota = np.floor(exact).astype(int)
    remainder = exact - quota
    order = sorted(range(k), key=lambda c: (-remainder[c], c))
    for c in order[: total - quota.sum()]:
        quota[c] += 1
    picked = []
    for c in range(k):
        members = np.flatnonzero(clean_ds.labels == c)
        picked.append(rng.choice(members, size=min(quota[c], len(members)), replace=False))
    index = rng.permutation(np.concatenate(picked))
    return clean_ds.subset(index)


# -- file format ------------------------------------------------------------
# "ULRD" | u32 version | u32 K, N, C, H, W | f32 images | u16 labels | mask bits

DATASET_MAGIC = b"ULRD"
DATASET_VERSION = 1


def dataset_to_bytes(ds):
    n, c, h, w = ds.images.shape
    head = DATASET_MAGIC + struct.pack("<6I", DATASET_VERSION, ds.num_classes, n, c, h, w)
    body = (ds.images.astype("<f4").tobytes()
            + ds.labels.astype("<u2").tobytes()
            + np.packbits(ds.poison_mask, bitorder="little").tobytes())
    return head + body


def dataset_from_bytes(buf):
    try:
        return _dataset_from_bytes(buf)
    except InputError:
        raise
    except (struct.error, ValueError) as exc:
        raise InputError(f"truncated dataset file: {exc}") from None


def _dataset_from_bytes(buf):
    if buf[:4] != DATASET_MAGIC:
        raise InputError("not a dataset file (bad magic)")
    version, k, n, c, h, w = struct.unpack_from("<6I", buf, 4)
    if version != DATASET_VERSION:
        raise InputError(f"unsupported dataset version {version}")
    off = 4 + 24
    size = n * c * h * w
    images = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(n, c, h, w)
    off += 4 * size
    labels = np.frombuffer(buf, dtype="<u2", count=n, offset=off)
    off += 2 * n
    nbytes = (n + 7) // 8
    bits = np.frombuffer(buf, dtype=np.uint8, count=nbytes, offset=off)
    mask = np.unpackbits(bits, count=n, bitorder="little").astype(bool)
    if off + nbytes != len(buf):
        raise InputError("trailing bytes in dataset file")
    return LabeledDataset(images.astype(np.float32), labels.astype(np.int64), k, mask)


def save_dataset(ds, path):
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(ds))


def load_dataset(path):
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())
