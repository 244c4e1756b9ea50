"""Value types shared across modules.

Coordinate frame (normals and lights): x to the right, y up, z toward the
viewer. Image row index therefore runs along -y.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError


@dataclass
class NormalMap:
    normals: np.ndarray  # (H, W, 3) float32, zero outside the mask
    mask: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.normals = np.asarray(self.normals, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.normals.ndim != 3 or self.normals.shape[2] != 3:
            raise ShapeError(f"normal map must be H x W x 3, got {self.normals.shape}")
        if self.mask.shape != self.normals.shape[:2]:
            raise ShapeError("mask does not match normal map", {"HW": (self.mask.shape, self.normals.shape[:2])})

    @property
    def shape(self):
        return self.mask.shape

    @classmethod
    def from_vectors(cls, vectors, mask):
        """Normalise ``vectors`` on the mask and zero the background."""
        v = np.asarray(vectors, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        norm = np.linalg.norm(v, axis=2, keepdims=True)
        out = np.where(mask[..., None] & (norm > 0), v / np.maximum(norm, 1e-300), 0.0)
        return cls(out.astype(np.float32), mask)


@dataclass
class LightSet:
    directions: np.ndarray  # (q, 3) unit vectors with z > 0
    intensities: np.ndarray | None = None  # (q, 3) RGB, optional

    def __post_init__(self):
        d = np.asarray(self.directions, dtype=np.float64).reshape(-1, 3)
        if d.shape[0] < 1:
            raise ValidationError("a light set needs at least one direction")
        norms = np.linalg.norm(d, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValidationError(f"light directions must be unit vectors (max |norm - 1| = {np.abs(norms - 1).max():.2e})")
        if np.any(d[:, 2] <= 0):
            raise ValidationError("light directions must point toward the viewer (z > 0)")
        self.directions = d
        if self.intensities is not None:
            ints = np.asarray(self.intensities, dtype=np.float64)
            if ints.ndim == 1:
                ints = np.repeat(ints[:, None], 3, axis=1)
            if ints.shape != (d.shape[0], 3):
                raise ShapeError("intensities must be one RGB triple per light", {"q": (ints.shape[0], d.shape[0])})
            self.intensities = ints

    def __len__(self):
        return self.directions.shape[0]


@dataclass
class Sample:
    """One photometric-stereo observation set.

    ``images`` is (q, H, W, 3) float32 in [0, 1]; ``lights`` (q, 3).
    """

    images: np.ndarray
    lights: np.ndarray
    mask: np.ndarray
    normals: np.ndarray | None = None
    name: str = ""
    intensities: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.lights = np.asarray(self.lights, dtype=np.float64).reshape(-1, 3)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.images.ndim != 4 or self.images.shape[3] != 3:
            raise ShapeError(f"images must be q x H x W x 3, got {self.images.shape}")
        if self.images.shape[0] != self.lights.shape[0]:
            raise ShapeError("image and light counts differ", {"q": (self.images.shape[0], self.lights.shape[0])})
        if self.mask.shape != self.images.shape[1:3]:
            raise ShapeError("mask does not match images", {"HW": (self.mask.shape, self.images.shape[1:3])})
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float32)
            if self.normals.shape != self.images.shape[1:3] + (3,):
                raise ShapeError("ground-truth normals do not match images", {"HW": (self.normals.shape[:2], self.images.shape[1:3])})

    @property
    def q(self):
        return self.images.shape[0]

    @property
    def gt(self):
        if self.normals is None:
            raise ValidationError(f"sample {self.name!r} has no ground-truth normals")
        return NormalMap(self.normals, self.mask)

    def subset(self, indices):
        idx = np.asarray(indices)
        ints = None if self.intensities is None else self.intensities[idx]
        return Sample(self.images[idx], self.lights[idx], self.mask, self.normals, self.name, ints)
