"""Synthetic sequence tasks with known ground-truth conditionals.

Two task kinds:

- "gmm-chain": d_token = 2. The first token is drawn from an equal two-part
  mixture N(+a_c, sigma^2 I) / N(-a_c, sigma^2 I), where a_c is the unit
  vector at angle 2 pi c / n_classes for class c. Each later token is half the
  previous token plus a fresh draw from the same mixture, so every step
  conditional is a known two-component Gaussian mixture.

- "blobs8": an 8x8 grayscale image of a single Gaussian bump whose center
  sits in the class's cell of a coarse grid over the image (the quadrants when
  n_classes = 4), jittered by up to half a pixel. Amplitude is U[0.5, 1] and
  i.i.d. pixel noise N(0, sigma^2) is added. The image is cut into 2x2 patches
  in raster order, giving T = 16 tokens of d_token = 4.

Sampling helpers here are the reference oracle for evaluation: they draw from
the exact data law, not from a model.
"""

import math
from dataclasses import dataclass

import numpy as np

from enar.errors import ConfigError, InputError, ShapeError
from enar.oracles import DiagonalGMM

TASK_KINDS = ("gmm-chain", "blobs8")

IMAGE_SIDE = 8          # blobs8 image is 8x8 pixels
PATCH_SIDE = 2          # cut into 2x2 patches, raster order
BUMP_SIGMA = 1.2        # bump radius in pixels


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "gmm-chain"
    T: int = 8
    d_token: int = 2
    n_classes: int = 8
    noise_sigma: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}, expected one of {TASK_KINDS}")
        for name, v in (("T", self.T), ("d_token", self.d_token),
                        ("n_classes", self.n_classes), ("seed", self.seed)):
            if not isinstance(v, (int, np.integer)) or v < 0:
                raise ConfigError(f"{name} must be a nonnegative integer, got {v!r}")
        if self.T < 1 or self.d_token < 1 or self.n_classes < 1:
            raise ConfigError("T, d_token and n_classes must be >= 1")
        if self.n_classes > 0xFFFF:
            raise ConfigError("n_classes must fit in 16 bits")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.kind == "gmm-chain" and self.d_token != 2:
            raise ConfigError("gmm-chain uses d_token = 2")
        if self.kind == "blobs8":
            n_patches = (IMAGE_SIDE // PATCH_SIDE) ** 2
            if self.T != n_patches or self.d_token != PATCH_SIDE ** 2:
                raise ConfigError(
                    f"blobs8 uses T = {n_patches} patches of d_token = {PATCH_SIDE ** 2}")


def default_task(kind, **overrides):
    """Canonical TaskSpec for a kind, with field overrides."""
    if kind == "gmm-chain":
        base = dict(kind=kind, T=8, d_token=2, n_classes=8, noise_sigma=0.25, seed=0)
    elif kind == "blobs8":
        base = dict(kind=kind, T=16, d_token=4, n_classes=4, noise_sigma=0.05, seed=0)
    else:
        raise ConfigError(f"unknown task kind {kind!r}, expected one of {TASK_KINDS}")
    base.update(overrides)
    return TaskSpec(**base)


@dataclass
class Dataset:
    spec: TaskSpec
    tokens: np.ndarray                # [n, T, d_token] float32
    labels: np.ndarray                # [n] int

    def __len__(self):
        return int(self.tokens.shape[0])


def class_centers(n_classes):
    """Unit vector a_c at angle 2 pi c / n_classes, shape [n_classes, 2]."""
    theta = 2.0 * math.pi * np.arange(n_classes) / n_classes
    return np.stack([np.cos(theta), np.sin(theta)], axis=1)


def _check_labels(labels, n_classes):
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ShapeError(f"labels must be 1-D, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise InputError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise InputError(f"labels must lie in [0, {n_classes}), "
                         f"got range [{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64)


def _chain_sequences(spec, labels, rng):
    n = labels.shape[0]
    a = class_centers(spec.n_classes)[labels]              # [n, 2]
    seq = np.empty((n, spec.T, 2), dtype=np.float64)
    prev = 0.0
    for t in range(spec.T):
        sign = rng.integers(0, 2, size=(n, 1)) * 2 - 1     # one sign per sequence
        fresh = sign * a + spec.noise_sigma * rng.standard_normal((n, 2))
        seq[:, t] = 0.5 * prev + fresh
        prev = seq[:, t]
    return seq.astype(np.float32)


def blob_cell_grid(n_classes):
    """Side length of the class cell grid over the image (2 = quadrants)."""
    return math.ceil(math.sqrt(n_classes))


def _blob_images(spec, labels, rng):
    n = labels.shape[0]
    g = blob_cell_grid(spec.n_classes)
    cell = IMAGE_SIDE / g
    row, col = labels // g, labels % g
    center = np.stack([(col + 0.5) * cell, (row + 0.5) * cell], axis=1)   # (x, y)
    center = center + rng.uniform(-0.5, 0.5, size=(n, 2))
    amp = rng.uniform(0.5, 1.0, size=(n, 1, 1))
    px = np.arange(IMAGE_SIDE) + 0.5
    X, Y = np.meshgrid(px, px)                              # X varies along columns
    d2 = ((X[None] - center[:, 0, None, None]) ** 2
          + (Y[None] - center[:, 1, None, None]) ** 2)
    img = amp * np.exp(-d2 / (2.0 * BUMP_SIGMA ** 2))
    if spec.noise_sigma > 0:
        img = img + spec.noise_sigma * rng.standard_normal(img.shape)
    return img


def patchify(images):
    """[n, 8, 8] images to [n, 16, 4] patch tokens, raster order both levels."""
    images = np.asarray(images)
    if images.ndim != 3 or images.shape[1:] != (IMAGE_SIDE, IMAGE_SIDE):
        raise ShapeError(f"expected [n, {IMAGE_SIDE}, {IMAGE_SIDE}] images, got {images.shape}")
    n = images.shape[0]
    k = IMAGE_SIDE // PATCH_SIDE
    x = images.reshape(n, k, PATCH_SIDE, k, PATCH_SIDE)
    return x.transpose(0, 1, 3, 2, 4).reshape(n, k * k, PATCH_SIDE * PATCH_SIDE)


def unpatchify(tokens):
    """Inverse of patchify: [n, 16, 4] tokens back to [n, 8, 8] images."""
    tokens = np.asarray(tokens)
    k = IMAGE_SIDE // PATCH_SIDE
    if tokens.ndim != 3 or tokens.shape[1:] != (k * k, PATCH_SIDE ** 2):
        raise ShapeError(f"expected [n, {k * k}, {PATCH_SIDE ** 2}] tokens, got {tokens.shape}")
    n = tokens.shape[0]
    x = tokens.reshape(n, k, k, PATCH_SIDE, PATCH_SIDE)
    return x.transpose(0, 1, 3, 2, 4).reshape(n, IMAGE_SIDE, IMAGE_SIDE)


def sample_sequences(spec, labels, rng):
    """Draw one ground-truth sequence per label; returns [n, T, d_token] float32."""
    labels = _check_labels(labels, spec.n_classes)
    if spec.kind == "gmm-chain":
        return _chain_sequences(spec, labels, rng)
    return patchify(_blob_images(spec, labels, rng)).astype(np.float32)


def balanced_labels(n, n_classes, rng):
    """n labels as evenly split over classes as possible, in shuffled order."""
    return rng.permutation(np.arange(n, dtype=np.int64) % n_classes)


def gen_synthetic(spec, n, labels=None):
    """Build a Dataset of n sequences from the task's exact data law.

    All randomness comes from spec.seed, so equal specs give bitwise-equal
    datasets. Labels default to a balanced shuffled assignment.
    """
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ConfigError(f"n must be a positive integer, got {n!r}")
    rng = np.random.default_rng(spec.seed)
    if labels is None:
        labels = balanced_labels(n, spec.n_classes, rng)
    labels = _check_labels(labels, spec.n_classes)
    if labels.shape[0] != n:
        raise ShapeError(f"got {labels.shape[0]} labels for n = {n}")
    tokens = sample_sequences(spec, labels, rng)
    return Dataset(spec=spec, tokens=tokens, labels=labels)


def chain_conditional(spec, label, prev_token=None):
    """The exact next-token law of gmm-chain as a two-component mixture oracle.

    With no previous token this is the first-token law; otherwise the mixture
    centers sit at 0.5 * prev_token +- a_c.
    """
    if spec.kind != "gmm-chain":
        raise ConfigError(f"step conditionals are only closed-form for gmm-chain, not {spec.kind}")
    if spec.noise_sigma <= 0:
        raise ConfigError("the mixture oracle needs noise_sigma > 0")
    if not 0 <= label < spec.n_classes:
        raise InputError(f"label {label} outside [0, {spec.n_classes})")
    a = class_centers(spec.n_classes)[label]
    base = 0.5 * np.asarray(prev_token, dtype=np.float64) if prev_token is not None else 0.0
    return DiagonalGMM(
        weights=[0.5, 0.5],
        means=np.stack([base + a, base - a]),
        sigmas=np.full((2, 2), spec.noise_sigma),
    )


def render(tokens, path=None):
    """Render one blobs8 token sequence to an 8-bit PGM (P5) image.

    Values are mapped affinely so the min becomes 0 and the max 255; a
    constant input renders as a uniform image. Returns the PGM bytes and
    writes them to `path` when given.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    k = IMAGE_SIDE // PATCH_SIDE
    if tokens.shape != (k * k, PATCH_SIDE ** 2):
        raise ShapeError(f"render expects [{k * k}, {PATCH_SIDE ** 2}] tokens, got {tokens.shape}")
    img = unpatchify(tokens[None])[0]
    lo, hi = img.min(), img.max()
    if hi > lo:
        pix = np.round((img - lo) * (255.0 / (hi - lo)))
    else:
        pix = np.zeros_like(img)
    data = (f"P5\n{IMAGE_SIDE} {IMAGE_SIDE}\n255\n".encode("ascii")
            + pix.astype(np.uint8).tobytes())
    if path is not None:
        with open(path, "wb") as f:
            f.write(data)
    return data
