"""Angular-error metrics, the random-trial protocol and the per-material sweep."""

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .classic import l2_solve
from .data import NormalMap
from .errors import ShapeError, ValidationError
from .net import forward
from .render import DARK_ALBEDO


def angular_error_map(pred, gt):
    """Per-pixel angle in degrees between two NormalMaps (0 off-mask)."""
    if pred.shape != gt.shape:
        raise ShapeError("normal maps differ in size", {"HW": (pred.shape, gt.shape)})
    if not np.array_equal(pred.mask, gt.mask):
        raise ValidationError("normal map masks differ")
    dots = np.sum(pred.normals.astype(np.float64) * gt.normals.astype(np.float64), axis=2)
    err = np.degrees(np.arccos(np.clip(dots, -1.0, 1.0)))
    return np.where(gt.mask, err, 0.0)


def mae(pred, gt, region=None):
    """Mean angular error in degrees over the mask (optionally intersected with ``region``)."""
    err = angular_error_map(pred, gt)
    mask = gt.mask if region is None else gt.mask & region
    if not mask.any():
        raise ValidationError("no valid pixels")
    return float(err[mask].mean())


class NetworkSolver:
    """Wrap a trained network so it can be evaluated like any other solver."""

    def __init__(self, net, label=None):
        self.net = net
        self.label = label or ("PS-FCN" if net.config.calibrated else "UPS-FCN")

    def __call__(self, sample):
        return forward(self.net, sample)


def run_label(model="PS-FCN", train_data="B", q_train=None, q_test=None):
    """Report label of the form "PS-FCN (B+8, 100)": training data + q_train, then q_test."""
    parts = []
    if train_data is not None:
        parts.append(train_data if q_train is None else f"{train_data}+{q_train}")
    if q_test is not None:
        parts.append(str(q_test))
    return f"{model} ({', '.join(parts)})" if parts else model


def _gt(sample):
    if sample.normals is None:
        raise ValidationError(f"sample {sample.name!r} has no ground-truth normals")
    return NormalMap(sample.normals, sample.mask)


@dataclass
class EvalReport:
    label: str
    q_test: int
    trials: int
    seed: int
    per_object: dict = field(default_factory=dict)  # name -> MAE (degrees)
    per_trial: dict = field(default_factory=dict)  # name -> list of trial MAEs
    fingerprint: str = ""
    region: str = "mask"  # "mask", or "lit" for pixels every light illuminates

    @property
    def mean(self):
        return float(np.mean(list(self.per_object.values())))

    def to_tsv(self):
        names = list(self.per_object)
        lines = ["\t".join(["model", "q_test", "trials"] + names + ["mean"])]
        vals = [f"{self.per_object[n]:.2f}" for n in names]
        lines.append("\t".join([self.label, str(self.q_test), str(self.trials)] + vals + [f"{self.mean:.2f}"]))
        return "\n".join(lines) + "\n"

    def to_dict(self):
        d = asdict(self)
        d["mean"] = self.mean
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def fingerprint(*parts):
    blob = json.dumps(parts, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def random_trial_eval(solver, dataset, q_test, trials=1, seed=0, label=None, lit_only=False):
    """Average MAE over ``trials`` random subsets of ``q_test`` image-light pairs per object.

    Trials collapse to one when q_test equals an object's image count, since
    every subset is then the full set. ``lit_only`` scores only pixels that
    every light of the trial illuminates (no attached shadow).
    """
    if trials < 1:
        raise ValidationError(f"trials must be >= 1, got {trials}")
    if not dataset:
        raise ValidationError("evaluation dataset is empty")
    if q_test < 1:
        raise ValidationError(f"q_test must be >= 1, got {q_test}")
    for s in dataset:
        if q_test > s.q:
            raise ValidationError(f"q_test={q_test} exceeds the {s.q} images available for {s.name!r}")
    report = EvalReport(
        label=label or getattr(solver, "label", type(solver).__name__),
        q_test=q_test,
        trials=trials,
        seed=seed,
    )
    for obj, sample in enumerate(dataset):
        gt = _gt(sample)
        n_trials = 1 if q_test == sample.q else trials
        errs = []
        for t in range(n_trials):
            if q_test == sample.q:
                sub = sample
            else:
                rng = np.random.default_rng([seed, obj, t])
                sub = sample.subset(np.sort(rng.choice(sample.q, size=q_test, replace=False)))
            errs.append(mae(solver(sub), gt, lit_by_all(sub) if lit_only else None))
        key = sample.name or f"object{obj:03d}"
        report.per_trial[key] = errs
        report.per_object[key] = float(np.mean(errs))
    report.region = "lit" if lit_only else "mask"
    report.fingerprint = fingerprint(report.label, q_test, trials, seed, report.region, list(report.per_object))
    return report


@dataclass
class SweepRow:
    material: str
    mae_model: float
    mae_l2: float
    mae_l2_lit: float  # L2 restricted to pixels every light illuminates
    peak_specular_gain: float
    dark: bool

    def tsv(self):
        return (
            f"{self.material}\t{self.mae_model:.3f}\t{self.mae_l2:.3f}\t{self.mae_l2_lit:.4f}\t"
            f"{self.peak_specular_gain:.4g}\t{'dark' if self.dark else ''}"
        )


SWEEP_HEADER = "material\tmae_model\tmae_l2\tmae_l2_lit\tpeak_specular_gain\tflag"


def lit_by_all(sample):
    """Pixels whose true normal faces every light (no attached shadow)."""
    n = sample.normals.astype(np.float64)
    facing = np.einsum("hwc,qc->qhw", n, sample.lights.astype(np.float64)) > 0
    return facing.all(axis=0) & sample.mask


def per_material_sweep(solver, samples, materials):
    """Evaluate ``solver`` and the L2 baseline on identical inputs, one row per material."""
    if len(samples) != len(materials):
        raise ValidationError(f"{len(samples)} samples for {len(materials)} materials")
    rows = []
    for sample, brdf in zip(samples, materials):
        gt = _gt(sample)
        l2 = l2_solve(sample.images, sample.lights, sample.mask)[0]
        lit = lit_by_all(sample)
        rows.append(
            SweepRow(
                material=brdf.name,
                mae_model=mae(solver(sample), gt),
                mae_l2=mae(l2, gt),
                mae_l2_lit=mae(l2, gt, lit) if lit.any() else float("nan"),
                peak_specular_gain=brdf.peak_specular_gain,
                dark=brdf.mean_albedo < DARK_ALBEDO,
            )
        )
    return rows


def format_sweep(rows):
    return "\n".join([SWEEP_HEADER] + [r.tsv() for r in rows]) + "\n"


def top_specular(rows, fraction=0.1):
    """Rows with the highest peak specular gain (ties broken by table order)."""
    k = max(1, int(round(len(rows) * fraction)))
    order = sorted(range(len(rows)), key=lambda i: (-rows[i].peak_specular_gain, i))
    return [rows[i] for i in order[:k]]
