"""Training loop: patch augmentation, cosine objective, Adam with step decay."""

import logging
import math
from dataclasses import asdict, dataclass, field

import cv2
import numpy as np

from . import tensor as T
from .errors import NumericalError, ValidationError
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

MAX_CROP_ATTEMPTS = 20


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 10
    base_lr: float = 1e-3
    lr_halving_period_epochs: int = 5
    q_train: int = 8
    seed: int = 0
    rescale_range: tuple = (32, 128)
    noise: float = 0.05
    crop: int = 32

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.q_train < 1:
            raise ValidationError(f"q_train must be >= 1, got {self.q_train}")
        if self.epochs < 0:
            raise ValidationError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr_halving_period_epochs < 1:
            raise ValidationError("lr_halving_period_epochs must be >= 1")
        if self.base_lr < 0:
            raise ValidationError("base_lr must be >= 0")
        lo, hi = self.rescale_range
        object.__setattr__(self, "rescale_range", (int(lo), int(hi)))
        if not self.crop <= lo <= hi:
            raise ValidationError(f"rescale range {self.rescale_range} must satisfy crop <= lo <= hi")
        if self.noise < 0:
            raise ValidationError("noise amplitude must be >= 0")

    def learning_rate(self, epoch):
        return self.base_lr / 2.0 ** (epoch // self.lr_halving_period_epochs)

    def to_dict(self):
        return asdict(self)


@dataclass
class Patch:
    images: np.ndarray  # (q_train, crop, crop, 3) float32
    lights: np.ndarray  # (q_train, 3) float32
    normals: np.ndarray  # (crop, crop, 3) float32, zero off-mask
    mask: np.ndarray  # (crop, crop) bool


def _resize(arr, width, height, interpolation):
    if arr.shape[1] == width and arr.shape[0] == height:
        return arr.copy()
    return cv2.resize(arr, (width, height), interpolation=interpolation)


def augment(sample, rng, config):
    """Random training patch: light subset, anisotropic rescale, noise, aligned crop."""
    if sample.normals is None:
        raise ValidationError(f"sample {sample.name!r} has no ground-truth normals")
    h, w = sample.mask.shape
    c = config.crop
    if h < c or w < c:
        raise ValidationError(f"sample {sample.name!r} is {h}x{w}, smaller than the {c}x{c} crop")
    if config.q_train > sample.q:
        raise ValidationError(f"q_train={config.q_train} exceeds the {sample.q} images of sample {sample.name!r}")

    idx = rng.choice(sample.q, size=config.q_train, replace=False)
    lo, hi = config.rescale_range
    new_w = int(rng.integers(lo, hi + 1))
    new_h = int(rng.integers(lo, hi + 1))

    images = np.stack([_resize(sample.images[i], new_w, new_h, cv2.INTER_LINEAR) for i in idx])
    normals = _resize(sample.normals.astype(np.float32), new_w, new_h, cv2.INTER_LINEAR)
    mask = _resize(sample.mask.astype(np.uint8), new_w, new_h, cv2.INTER_NEAREST).astype(bool)

    if config.noise > 0:
        images = images + rng.uniform(-config.noise, config.noise, size=images.shape).astype(np.float32)
        images = np.clip(images, 0.0, 1.0)

    for _ in range(MAX_CROP_ATTEMPTS):
        top = int(rng.integers(0, new_h - c + 1))
        left = int(rng.integers(0, new_w - c + 1))
        m = mask[top : top + c, left : left + c]
        if m.any():
            break
    n = normals[top : top + c, left : left + c].astype(np.float64)
    norm = np.linalg.norm(n, axis=2, keepdims=True)
    m = m & (norm[..., 0] > 1e-8)
    n = np.where(m[..., None], n / np.where(norm > 1e-8, norm, 1.0), 0.0)
    return Patch(
        images=np.ascontiguousarray(images[:, top : top + c, left : left + c], dtype=np.float32),
        lights=sample.lights[idx].astype(np.float32),
        normals=n.astype(np.float32),
        mask=m,
    )


def collate(patches):
    """Stack patches into network-ready arrays (N,q,3,h,w), (N,q,3), (N,3,h,w), (N,h,w)."""
    images = np.stack([p.images.transpose(0, 3, 1, 2) for p in patches])
    lights = np.stack([p.lights for p in patches])
    normals = np.stack([p.normals.transpose(2, 0, 1) for p in patches])
    mask = np.stack([p.mask for p in patches])
    return np.ascontiguousarray(images), lights, np.ascontiguousarray(normals), mask


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    lr: float

    def line(self):
        return f"{self.epoch} {self.mean_loss:.6f} {self.lr:.6g}"


@dataclass
class TrainResult:
    net: object
    log: list = field(default_factory=list)
    steps: int = 0


def train_step(net, state, images, lights, normals, mask):
    """One forward/backward/update; returns (new net, new state, loss value)."""
    trainable = {k: v for k, v in net.params.items()}
    with T.Tape() as tape:
        pred = net(images, lights if net.config.calibrated else None)
        loss = T.cosine_loss(pred, normals, mask)
    value = float(loss.item())
    if not math.isfinite(value):
        raise NumericalError(f"non-finite training loss ({value})")
    grads = T.backward(tape, loss)
    grad_arrays = {k: grads.get(p) for k, p in trainable.items()}
    new_params = adam_step(trainable, grad_arrays, state)
    return net.with_params(new_params), state, value


def _augmented_batch(dataset, indices, config, epoch):
    patches = [
        augment(dataset[i], np.random.default_rng([config.seed, epoch, int(i)]), config) for i in indices
    ]
    return collate(patches)


def train(net, dataset, config, log_file=None, progress=None):
    """Train ``net`` on a list of Samples; deterministic for a fixed seed.

    ``log_file`` (path) receives one "epoch mean_loss lr" line per epoch;
    ``progress`` is called as progress(epoch, step, loss) after every step.
    """
    if len(dataset) == 0:
        raise ValidationError("training dataset is empty")
    state = AdamState(learning_rate=config.base_lr)
    result = TrainResult(net)
    n = len(dataset)
    for epoch in range(config.epochs):
        lr = config.learning_rate(epoch)
        state.learning_rate = lr
        order = np.random.default_rng([config.seed, 1_000_003, epoch]).permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            batch = _augmented_batch(dataset, order[start : start + config.batch_size], config, epoch)
            net, state, value = train_step(net, state, *batch)
            losses.append(value)
            result.steps += 1
            if progress is not None:
                progress(epoch, result.steps, value)
        record = EpochRecord(epoch, float(np.mean(losses)), lr)
        result.log.append(record)
        log.info("epoch %d loss %.5f lr %.3g", epoch, record.mean_loss, lr)
        if log_file is not None:
            with open(log_file, "a", encoding="utf-8") as fh:
                fh.write(record.line() + "\n")
    result.net = net
    return result
