"""Procedural photometric-stereo data: height-field shapes, a parametric BRDF
family, directional lighting with cast shadows, and on-disk datasets.

Shapes are orthographic height fields in pixel units (x right, y up, z toward
the viewer), so a surface normal is proportional to (-dz/dx, -dz/dy, 1).

Radiometric convention: unnormalised Lambertian, i.e. a white Lambertian
surface facing the light renders as 1.0. Images stay linear floats here;
clipping to [0, 1] happens only at 8-bit encoding.
"""

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .data import LightSet, Sample
from .errors import DataError, ValidationError

VIEW = np.array([0.0, 0.0, 1.0])
FORMAT_VERSION = 1
# blobby shapes x views x BRDFs per view in the original training recipe
FULL_SCALE_RECIPE = {"shapes": 10, "azimuths": 36, "elevations": 36, "brdfs_per_view": 2}


def full_scale_recipe_count(recipe=FULL_SCALE_RECIPE):
    return recipe["shapes"] * recipe["azimuths"] * recipe["elevations"] * recipe["brdfs_per_view"]


# --------------------------------------------------------------------------
# shapes
# --------------------------------------------------------------------------

@dataclass
class HeightField:
    depth: np.ndarray  # (H, W) float64, zero outside the mask
    normals: np.ndarray  # (H, W, 3) float64 unit vectors, zero outside the mask
    mask: np.ndarray  # (H, W) bool

    @property
    def shape(self):
        return self.mask.shape


def _size(size):
    if np.isscalar(size):
        return int(size), int(size)
    h, w = size
    return int(h), int(w)


def _normals_from_gradient(gx, gy, mask):
    n = np.stack([-gx, -gy, np.ones_like(gx)], axis=-1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return np.where(mask[..., None], n, 0.0)


def make_sphere(radius_frac=0.8, size=64):
    """Front hemisphere of pixel radius radius_frac * min(H, W) / 2, centred on pixel (H//2, W//2)."""
    if not 0 < radius_frac <= 1:
        raise ValidationError(f"radius_frac must lie in (0, 1], got {radius_frac}")
    h, w = _size(size)
    radius = radius_frac * min(h, w) / 2.0
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    x = cols - w // 2
    y = -(rows - h // 2)
    r2 = x * x + y * y
    mask = r2 < radius * radius
    z = np.sqrt(np.where(mask, radius * radius - r2, 0.0))
    normals = np.where(mask[..., None], np.stack([x, y, z], axis=-1) / radius, 0.0)
    return HeightField(z, normals, mask)


@dataclass(frozen=True)
class Bump:
    cx: float  # column
    cy: float  # row
    sigma: float
    amplitude: float


def blobby_from_bumps(bumps, size, threshold=0.35, height=None):
    """Metaball-style height field: depth = height * sqrt(max(f - threshold, 0))
    with f a sum of Gaussian bumps. The square root makes silhouettes steep, as
    on closed objects; normals come from the closed-form gradient of f.
    """
    h, w = _size(size)
    height = 0.35 * min(h, w) if height is None else height
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    f = np.zeros((h, w))
    df_dcol = np.zeros((h, w))
    df_drow = np.zeros((h, w))
    for b in bumps:
        g = b.amplitude * np.exp(-((cols - b.cx) ** 2 + (rows - b.cy) ** 2) / (2.0 * b.sigma**2))
        f += g
        df_dcol -= g * (cols - b.cx) / b.sigma**2
        df_drow -= g * (rows - b.cy) / b.sigma**2
    excess = f - threshold
    mask = excess > 1e-6
    root = np.sqrt(np.where(mask, excess, 0.0))
    depth = height * root
    safe = np.where(mask, root, 1.0)
    gx = height * df_dcol / (2.0 * safe)
    gy = -height * df_drow / (2.0 * safe)  # rows run along -y
    normals = _normals_from_gradient(np.where(mask, gx, 0.0), np.where(mask, gy, 0.0), mask)
    return HeightField(depth, normals, mask)


def make_blobby(seed, n_bumps=4, size=64):
    """Random metaball surface; identical output for identical arguments."""
    if n_bumps < 1:
        raise ValidationError(f"n_bumps must be >= 1, got {n_bumps}")
    h, w = _size(size)
    rng = np.random.default_rng(seed)
    side = min(h, w)
    bumps = [
        Bump(
            cx=rng.uniform(0.3, 0.7) * w,
            cy=rng.uniform(0.3, 0.7) * h,
            sigma=rng.uniform(0.1, 0.2) * side,
            amplitude=rng.uniform(0.6, 1.0),
        )
        for _ in range(n_bumps)
    ]
    height = rng.uniform(0.2, 0.45) * side
    return blobby_from_bumps(bumps, (h, w), height=height)


# --------------------------------------------------------------------------
# reflectance
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BRDFParams:
    """Lambertian diffuse plus a normalised Blinn-Phong lobe.

    value = albedo + strength * (shininess + 8) / 8 * max(n.h, 0) ** shininess
    """

    diffuse_albedo: tuple = (1.0, 1.0, 1.0)
    specular_strength: float = 0.0
    shininess: float = 1.0
    name: str = ""

    def __post_init__(self):
        alb = tuple(float(a) for a in self.diffuse_albedo)
        if len(alb) != 3 or min(alb) < 0 or max(alb) > 1:
            raise ValidationError(f"diffuse_albedo must be an RGB triple in [0, 1], got {self.diffuse_albedo}")
        object.__setattr__(self, "diffuse_albedo", alb)
        if self.specular_strength < 0:
            raise ValidationError("specular_strength must be >= 0")
        if self.shininess <= 0:
            raise ValidationError("shininess must be > 0")

    @property
    def peak_specular_gain(self):
        return self.specular_strength * (self.shininess + 8.0) / 8.0

    @property
    def is_lambertian(self):
        return self.specular_strength == 0

    @property
    def mean_albedo(self):
        return float(np.mean(self.diffuse_albedo))

    def evaluate(self, normals, light, view=VIEW):
        """BRDF value (..., 3) for normals (..., 3) and one light / view direction."""
        alb = np.asarray(self.diffuse_albedo)
        if self.is_lambertian:
            return np.broadcast_to(alb, normals.shape[:-1] + (3,)).copy()
        half = np.asarray(light, dtype=np.float64) + np.asarray(view, dtype=np.float64)
        half /= np.linalg.norm(half)
        ndh = np.clip(normals @ half, 0.0, None)
        spec = self.peak_specular_gain * ndh**self.shininess
        return alb + spec[..., None]


ALBEDOS = (
    ("white", (0.85, 0.85, 0.82)),
    ("orange", (0.80, 0.42, 0.15)),
    ("blue", (0.20, 0.35, 0.75)),
    ("dark", (0.09, 0.08, 0.07)),
)
SPECULAR_STRENGTHS = (0.1, 0.25, 0.5, 1.0)
SHININESS = (2.0, 8.0, 20.0, 50.0, 120.0, 300.0)
DARK_ALBEDO = 0.2


def brdf_grid():
    """The 100 stand-in materials: 4 albedos x (Lambertian + 4 strengths x 6 shininess)."""
    out = []
    for label, albedo in ALBEDOS:
        out.append(BRDFParams(albedo, 0.0, 1.0, f"{label}-lambertian"))
        for ks in SPECULAR_STRENGTHS:
            for s in SHININESS:
                out.append(BRDFParams(albedo, ks, s, f"{label}-ks{ks:g}-n{s:g}"))
    return out


# --------------------------------------------------------------------------
# lights and shading
# --------------------------------------------------------------------------

def sample_lights(rng, q, az_span=180.0, el_span=180.0):
    """q directions with azimuth and elevation uniform in centred spans (degrees).

    Azimuth rotates about the y axis, elevation about the x axis:
    l = (sin az cos el, sin el, cos az cos el).
    """
    if q < 1:
        raise ValidationError(f"q must be >= 1, got {q}")
    for span in (az_span, el_span):
        if not 0 <= span <= 180:
            raise ValidationError(f"light spans must lie in [0, 180] degrees, got {span}")
    az = np.radians(rng.uniform(-az_span / 2, az_span / 2, size=q))
    el = np.radians(rng.uniform(-el_span / 2, el_span / 2, size=q))
    d = np.stack([np.sin(az) * np.cos(el), np.sin(el), np.cos(az) * np.cos(el)], axis=1)
    # keep strictly inside the front hemisphere at the 180 degree boundary
    d[:, 2] = np.maximum(d[:, 2], 1e-6)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return LightSet(d)


def _check_light(light):
    light = np.asarray(light, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(light) - 1.0) > 1e-6:
        raise ValidationError(f"light direction must be a unit vector, got norm {np.linalg.norm(light):.6f}")
    if light[2] <= 0:
        raise ValidationError("light direction must have z > 0")
    return light


def cast_shadow_mask(shape, light, step=0.5):
    """Pixels whose ray toward ``light`` hits the height field before leaving the volume."""
    light = _check_light(light)
    return kernels.march_shadows(shape.depth, shape.mask, light, step=step)


def shade(shape, brdf, light, shadows=True):
    """Linear RGB image (H, W, 3): brdf * max(n.l, 0) * visibility; background 0."""
    light = _check_light(light)
    cos = np.clip(shape.normals @ light, 0.0, None)
    lit = shape.mask & (cos > 0)
    if shadows:
        lit &= ~cast_shadow_mask(shape, light)
    value = brdf.evaluate(shape.normals, light) * (cos * lit)[..., None]
    return value.astype(np.float32)


def quantize_8bit(images):
    """round(clip(v, 0, 1) * 255) / 255; highlights above 1 clip, as PNG storage does."""
    return (np.round(np.clip(images, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def render_sample(shape, brdf, lights, name="", quantize=True, noise_rng=None, shadows=True):
    directions = lights.directions if isinstance(lights, LightSet) else np.asarray(lights, dtype=np.float64)
    images = np.stack([shade(shape, brdf, l, shadows=shadows) for l in directions])
    if noise_rng is not None:
        images = images + noise_rng.uniform(-0.05, 0.05, size=images.shape).astype(np.float32) * shape.mask[None, ..., None]
    if quantize:
        images = quantize_8bit(images)
    return Sample(images, directions, shape.mask, shape.normals.astype(np.float32), name)


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

@dataclass
class RenderJob:
    kind: str = "blobby"
    n_shapes: int = 2
    brdfs_per_shape: int = 2
    use_full_grid: bool = False
    q: int = 32
    az_span: float = 180.0
    el_span: float = 180.0
    size: int = 64
    n_bumps: int = 4
    radius_frac: float = 0.8
    shared_lights: bool = False
    noise: bool = False
    seed: int = 0
    out_dir: str = "."

    def __post_init__(self):
        if self.kind not in ("sphere", "blobby"):
            raise ValidationError(f"kind must be 'sphere' or 'blobby', got {self.kind!r}")
        if self.q < 1 or self.n_shapes < 1 or self.brdfs_per_shape < 1:
            raise ValidationError("q, n_shapes and brdfs_per_shape must all be >= 1")
        if not (0 < self.az_span <= 180 and 0 < self.el_span <= 180):
            raise ValidationError("light spans must lie in (0, 180] degrees")
        if self.size < 4 or self.size % 4:
            raise ValidationError(f"image size must be a positive multiple of 4, got {self.size}")
        grid = len(brdf_grid())
        if not self.use_full_grid and self.brdfs_per_shape > grid:
            raise ValidationError(f"brdfs_per_shape cannot exceed the {grid} grid materials")

    @property
    def n_samples(self):
        return self.n_shapes * (len(brdf_grid()) if self.use_full_grid else self.brdfs_per_shape)


@dataclass
class SamplePlan:
    sample_id: str
    shape_index: int
    shape_seed: list
    material_index: int
    light_seed: list
    noise_seed: list | None = field(default=None)


def plan_job(job):
    """Deterministic per-sample seeds and materials; independent of execution order."""
    grid = brdf_grid()
    plans = []
    index = 0
    for s in range(job.n_shapes):
        if job.use_full_grid:
            materials = list(range(len(grid)))
        else:
            pick = np.random.default_rng([job.seed, 2, s])
            materials = sorted(int(m) for m in pick.choice(len(grid), size=job.brdfs_per_shape, replace=False))
        for m in materials:
            light_seed = [job.seed, 3] if job.shared_lights else [job.seed, 3, index]
            plans.append(
                SamplePlan(
                    sample_id=f"{job.kind}{s:04d}_m{m:03d}",
                    shape_index=s,
                    shape_seed=[job.seed, 1, s],
                    material_index=m,
                    light_seed=light_seed,
                    noise_seed=[job.seed, 4, index] if job.noise else None,
                )
            )
            index += 1
    return plans


def _make_shape(job, plan):
    if job.kind == "sphere":
        return make_sphere(job.radius_frac, job.size)
    return make_blobby(np.random.default_rng(plan.shape_seed), job.n_bumps, job.size)


def iter_job_samples(job):
    """Yield (plan, Sample) for every sample of the job, rendered in memory."""
    grid = brdf_grid()
    shape_cache = {}
    for plan in plan_job(job):
        shape = shape_cache.get(plan.shape_index)
        if shape is None:
            shape_cache.clear()
            shape = shape_cache[plan.shape_index] = _make_shape(job, plan)
        lights = sample_lights(np.random.default_rng(plan.light_seed), job.q, job.az_span, job.el_span)
        noise_rng = np.random.default_rng(plan.noise_seed) if plan.noise_seed is not None else None
        sample = render_sample(shape, grid[plan.material_index], lights, plan.sample_id, noise_rng=noise_rng)
        yield plan, sample


def render_dataset(job):
    """Render every sample of ``job`` to disk and write ``manifest.json`` at the root."""
    from .dataset_io import write_native_sample

    os.makedirs(job.out_dir, exist_ok=True)
    grid = brdf_grid()
    entries = []
    for plan, sample in iter_job_samples(job):
        try:
            write_native_sample(sample, os.path.join(job.out_dir, plan.sample_id))
        except OSError as exc:
            raise DataError(f"failed to write sample {plan.sample_id}: {exc}") from exc
        entries.append(
            {
                "id": plan.sample_id,
                "shape_seed": plan.shape_seed,
                "light_seed": plan.light_seed,
                "material_index": plan.material_index,
                "material": asdict(grid[plan.material_index]),
            }
        )
    job_fields = asdict(job)
    job_fields.pop("out_dir")
    manifest = {
        "format_version": FORMAT_VERSION,
        "job": job_fields,
        "count": len(entries),
        "notes": (
            "Original training recipe: 10 blobby shapes x 36 azimuths x 36 elevations x 2 BRDFs "
            f"= {full_scale_recipe_count()} samples of 64 images at 128x128. Here shape seeds replace "
            "camera views and a 100-entry parametric BRDF grid replaces measured materials."
        ),
        "samples": entries,
    }
    path = os.path.join(job.out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
