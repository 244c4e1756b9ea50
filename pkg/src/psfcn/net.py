"""PS-FCN: shared-weight feature extractor, order-agnostic fusion, normal regressor.

Each (image, light) pair goes through the same extractor; the per-input
feature maps are fused (max by default) and a small regressor turns the
fused map into an L2-normalised normal map at the input resolution. The
uncalibrated variant (UPS-FCN) is the same network with 3 input channels.
"""

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .checkpoint import decode_tensors, encode_tensors
from .data import NormalMap
from .errors import CheckpointError, DataError, ShapeError, ValidationError

FUSIONS = ("max", "average", "concat_conv")
LEAKY_SLOPE = 0.1

# (name, kind, base_out_channels, kernel, stride, pad)
EXTRACTOR_PLAN = (
    ("conv1", "conv", 64, 3, 1, 1),
    ("conv2", "conv", 128, 3, 2, 1),
    ("conv3", "conv", 128, 3, 1, 1),
    ("conv4", "conv", 256, 3, 2, 1),
    ("conv5", "conv", 256, 3, 1, 1),
    ("deconv6", "deconv", 128, 4, 2, 1),
    ("conv7", "conv", 128, 3, 1, 1),
)
REGRESSOR_PLAN = (
    ("conv1", "conv", 128, 3, 1, 1),
    ("conv2", "conv", 128, 3, 1, 1),
    ("deconv3", "deconv", 64, 4, 2, 1),
    ("conv4", "conv", 3, 3, 1, 1),
)


@dataclass(frozen=True)
class NetConfig:
    calibrated: bool = True
    width_scale: float = 1.0
    fusion: str = "max"
    concat_capacity: int = 0

    def __post_init__(self):
        if not self.width_scale > 0:
            raise ValidationError(f"width_scale must be positive, got {self.width_scale}")
        if self.fusion not in FUSIONS:
            raise ValidationError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.fusion == "concat_conv" and self.concat_capacity < 1:
            raise ValidationError("concat_conv fusion needs concat_capacity >= 1")

    @property
    def in_channels(self):
        return 6 if self.calibrated else 3


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    cin: int
    cout: int
    k: int
    stride: int
    pad: int
    activation: bool

    @property
    def weight_shape(self):
        if self.kind == "deconv":
            return (self.cin, self.cout, self.k, self.k)
        return (self.cout, self.cin, self.k, self.k)

    def fan_in(self):
        if self.kind == "deconv":
            return self.cin * self.k * self.k / (self.stride * self.stride)
        return self.cin * self.k * self.k


def _scaled(channels, width_scale):
    return max(1, int(round(channels * width_scale)))


def _layer_plan(config):
    extractor, regressor = [], []
    cin = config.in_channels
    for name, kind, base, k, s, p in EXTRACTOR_PLAN:
        cout = _scaled(base, config.width_scale)
        extractor.append(LayerSpec(f"extractor.{name}", kind, cin, cout, k, s, p, True))
        cin = cout
    feat = cin
    fusion = None
    if config.fusion == "concat_conv":
        fusion = LayerSpec("fusion.conv", "conv", feat * config.concat_capacity, feat, 1, 1, 0, True)
    for i, (name, kind, base, k, s, p) in enumerate(REGRESSOR_PLAN):
        last = i == len(REGRESSOR_PLAN) - 1
        cout = 3 if last else _scaled(base, config.width_scale)
        regressor.append(LayerSpec(f"regressor.{name}", kind, cin, cout, k, s, p, not last))
        cin = cout
    return extractor, fusion, regressor


class Network:
    def __init__(self, config, params, seed=None):
        self.config = config
        self.seed = seed
        self.extractor, self.fusion_layer, self.regressor = _layer_plan(config)
        expected = {}
        for spec in self.layers:
            expected[spec.name + ".weight"] = spec.weight_shape
            expected[spec.name + ".bias"] = (1, spec.cout, 1, 1)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ShapeError(f"parameter set does not match architecture (missing {missing}, unexpected {extra})")
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                raise ShapeError(f"parameter {name!r} has the wrong shape", {"shape": (tuple(params[name].shape), shape)})
        # ordered like the layer plan so checkpoints are stable
        self.params = {name: params[name] for name in expected}

    @property
    def layers(self):
        fusion = [self.fusion_layer] if self.fusion_layer else []
        return self.extractor + fusion + self.regressor

    @property
    def in_channels(self):
        return self.config.in_channels

    def parameter_count(self):
        return int(sum(p.size for p in self.params.values()))

    def with_params(self, params):
        return Network(self.config, params, self.seed)

    def __call__(self, images, lights=None):
        """Differentiable forward pass.

        ``images``: (N, q, 3, H, W) array; ``lights``: (N, q, 3) array, required
        for calibrated networks and ignored otherwise. Returns an N x 3 x H x W
        tensor of unit normals.
        """
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 5 or images.shape[2] != 3:
            raise ShapeError(f"images must be N x q x 3 x H x W, got {images.shape}")
        n, q, _, h, w = images.shape
        if q < 1:
            raise ValidationError("forward needs at least one input image")
        if h % 4 or w % 4:
            raise ShapeError("image height and width must be divisible by 4", {"HW": ((h, w), "multiples of 4")})
        if self.config.fusion == "concat_conv" and q != self.config.concat_capacity:
            raise ValidationError(
                f"fixed-capacity fusion: concat_conv network was built for q={self.config.concat_capacity}, got q={q}"
            )
        if self.config.calibrated:
            if lights is None:
                raise ValidationError("calibrated network needs light directions")
            lights = np.asarray(lights, dtype=np.float32).reshape(n, q, 3)
            _check_unit(lights)

        features = []
        for i in range(q):
            if self.config.calibrated:
                planes = np.broadcast_to(lights[:, i, :, None, None], (n, 3, h, w))
                x = np.concatenate([images[:, i], planes], axis=1)
            else:
                x = images[:, i]
            features.append(self._run(self.extractor, T.Tensor._wrap(x)))

        if self.config.fusion == "max":
            fused, _ = T.max_fuse(features)
        elif self.config.fusion == "average":
            fused = T.avg_fuse(features)
        else:
            fused = self._apply(self.fusion_layer, T.concat_channels(features))
        return T.l2_normalize_channels(self._run(self.regressor, fused))

    def _apply(self, spec, x):
        weight = self.params[spec.name + ".weight"]
        bias = self.params[spec.name + ".bias"]
        op = T.deconv2d if spec.kind == "deconv" else T.conv2d
        y = op(x, weight, bias, stride=spec.stride, pad=spec.pad)
        return T.leaky_relu(y, LEAKY_SLOPE) if spec.activation else y

    def _run(self, layers, x):
        for spec in layers:
            x = self._apply(spec, x)
        return x


def _check_unit(lights):
    norms = np.linalg.norm(lights.astype(np.float64), axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-3):
        raise ValidationError(f"light directions must be unit vectors (max |norm - 1| = {np.abs(norms - 1).max():.3e})")


def concat_light(image, light):
    """Stack a 3 x h x w image with three constant planes holding ``light``."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"image must be 3 x h x w, got {image.shape}")
    light = np.asarray(light, dtype=np.float32).reshape(3)
    _check_unit(light[None])
    planes = np.broadcast_to(light[:, None, None], image.shape)
    return np.concatenate([image, planes], axis=0)


def build_psfcn(config, seed=0):
    """Fresh network with fan-in scaled uniform weights and zero biases."""
    rng = np.random.default_rng(seed)
    extractor, fusion, regressor = _layer_plan(config)
    layers = extractor + ([fusion] if fusion else []) + regressor
    params = {}
    gain = np.sqrt(6.0 / (1.0 + LEAKY_SLOPE**2))
    for spec in layers:
        bound = gain / np.sqrt(spec.fan_in())
        w = rng.uniform(-bound, bound, size=spec.weight_shape).astype(np.float32)
        params[spec.name + ".weight"] = T.Tensor._wrap(w, requires_grad=True, name=spec.name + ".weight")
        params[spec.name + ".bias"] = T.Tensor._wrap(
            np.zeros((1, spec.cout, 1, 1), np.float32), requires_grad=True, name=spec.name + ".bias"
        )
    return Network(config, params, seed)


def sample_to_batch(sample):
    """(q, H, W, 3) sample images -> (1, q, 3, H, W) batch plus (1, q, 3) lights."""
    images = np.ascontiguousarray(sample.images.transpose(0, 3, 1, 2))[None]
    return images, sample.lights[None].astype(np.float32)


def forward(net, sample):
    """Predict a NormalMap for one sample (masked to the sample's foreground)."""
    images, lights = sample_to_batch(sample)
    out = net(images, lights if net.config.calibrated else None)
    normals = out.data[0].transpose(1, 2, 0)
    normals = np.where(sample.mask[..., None], normals, 0.0).astype(np.float32)
    return NormalMap(normals, sample.mask)


def cosine_loss(pred, gt):
    """Mean of 1 - n . n~ over the shared mask of two NormalMaps; lies in [0, 2]."""
    if pred.shape != gt.shape:
        raise ShapeError("normal maps differ in size", {"HW": (pred.shape, gt.shape)})
    if not np.array_equal(pred.mask, gt.mask):
        raise ValidationError("normal map masks differ")
    if not pred.mask.any():
        raise ValidationError("no valid pixels")
    dots = np.sum(pred.normals.astype(np.float64) * gt.normals, axis=2)[pred.mask]
    return float(np.mean(1.0 - dots))


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

def manifest_path(path):
    return os.fspath(path) + ".manifest.json"


def save_weights(net, path, training=None):
    """Write the PSFW blob plus a JSON sidecar with the architecture (and, optionally, training settings)."""
    blob = encode_tensors({name: p.data for name, p in net.params.items()})
    with open(path, "wb") as fh:
        fh.write(blob)
    manifest = {"format": "PSFW", "format_version": 1, "seed": net.seed, "config": asdict(net.config)}
    if training is not None:
        manifest["training"] = training
    with open(manifest_path(path), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path):
    try:
        with open(manifest_path(path), encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"missing checkpoint manifest {manifest_path(path)}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"unreadable checkpoint manifest {manifest_path(path)}: {exc}") from exc


def load_weights(path):
    manifest = read_manifest(path)
    try:
        config = NetConfig(**manifest["config"])
    except (KeyError, TypeError, ValidationError) as exc:
        raise DataError(f"invalid network config in {manifest_path(path)}: {exc}") from exc
    try:
        with open(path, "rb") as fh:
            arrays = decode_tensors(fh.read())
    except FileNotFoundError as exc:
        raise DataError(f"missing checkpoint {path}") from exc
    params = {name: T.Tensor._wrap(a, requires_grad=True, name=name) for name, a in arrays.items()}
    try:
        return Network(config, params, manifest.get("seed"))
    except ShapeError as exc:
        raise CheckpointError(f"checkpoint does not match its manifest: {exc}") from exc
