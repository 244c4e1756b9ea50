"""Central finite-difference gradient checking for the tensor engine."""

from dataclasses import dataclass

import numpy as np

from .tensor import DTYPE, BranchRecorder, Tape, Tensor, backward


@dataclass
class GradCheckResult:
    name: str
    analytic: np.ndarray
    numeric: np.ndarray
    skipped: int = 0  # probes discarded because they crossed a kink

    @property
    def rel_error(self):
        """Norm-wise relative error ||a - n|| / max(||a||, ||n||) over the checked coordinates."""
        scale = max(np.linalg.norm(self.analytic), np.linalg.norm(self.numeric))
        if scale == 0:
            return 0.0
        return float(np.linalg.norm(self.analytic - self.numeric) / scale)


def _derivative_weights(offsets):
    """Weights w with sum(w * f(x + t)) = f'(x) exactly for polynomials up to degree len(t) - 1."""
    t = np.asarray(offsets, dtype=np.float64)
    vander = np.vander(t, increasing=True).T  # rows: powers 0..n-1
    rhs = np.zeros(len(t))
    rhs[1] = 1.0
    return np.linalg.solve(vander, rhs)


def gradcheck(fn, inputs, h=1e-3, n_coords=None, seed=0, names=None, kink_aware=False, stencil=2, repeats=1):
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn`` takes one Tensor per entry of ``inputs`` (plain arrays) plus an
    ``offset`` keyword, and returns a one-element Tensor. The probes pass the
    base-point loss as ``offset`` so a reduction that honours it (see
    ``tensor_sum``) returns only the small difference, which float32 can
    represent precisely. ``n_coords`` caps how many coordinates per input are
    probed (chosen at random); None probes every coordinate.

    With ``kink_aware`` a probe whose evaluations switch the branch of any
    piecewise op (see :class:`BranchRecorder`) is discarded, since the
    central difference straddles a kink there and does not estimate the
    derivative; another coordinate is drawn in its place when sampling.

    ``stencil`` is 2 for the classic (f(x+h) - f(x-h)) / 2h or 4 to add the
    +-2h points, which cancels the h^2 truncation term. Weights are derived
    from the float32-rounded offsets actually applied, so rounding of x + h
    does not bias the estimate.

    ``repeats`` > 1 averages that many estimates whose steps are spread
    evenly over [0.9 h, 1.1 h]. Each step rounds the forward pass differently,
    so the float32 round-off in the estimate shrinks roughly as
    1/sqrt(repeats) while the truncation error stays that of step h. A probe
    is discarded if any of its steps crosses a kink.
    """
    if stencil not in (2, 4):
        raise ValueError(f"stencil must be 2 or 4, got {stencil}")
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    multiples = (1, -1) if stencil == 2 else (1, -1, 2, -2)
    steps = [h] if repeats == 1 else list(h * np.linspace(0.9, 1.1, repeats))
    arrays = [np.asarray(a, dtype=DTYPE) for a in inputs]
    names = names or [f"input{i}" for i in range(len(arrays))]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape, BranchRecorder() as rec:
        loss = fn(*leaves, offset=0.0)
    grads = backward(tape, loss)
    base = float(loss.item())
    base_sig = rec.signature() if kink_aware else None

    def estimate(i, flat, shape, j, step):
        values, offsets = [], []
        for m in multiples:
            probe = flat.copy()
            probe[j] = flat[j] + DTYPE(m * step)
            offsets.append(float(probe[j]) - float(flat[j]))
            value, sig = _eval(fn, arrays, i, probe.reshape(shape), base)
            if kink_aware and sig != base_sig:
                return None
            values.append(value)
        if stencil == 2:
            return (values[0] - values[1]) / (offsets[0] - offsets[1])
        # the base point enters with value 0 (the offset is subtracted inside fn)
        w = _derivative_weights([0.0] + offsets)
        return float(np.dot(w[1:], values))

    rng = np.random.default_rng(seed)
    results = []
    for i, a in enumerate(arrays):
        flat = a.reshape(-1)
        want = flat.size if n_coords is None else min(n_coords, flat.size)
        candidates = np.arange(flat.size) if n_coords is None else rng.permutation(flat.size)
        g = grads.get(leaves[i])
        g = np.zeros(flat.size) if g is None else g.reshape(-1).astype(np.float64)
        kept, numeric, skipped = [], [], 0
        for j in candidates:
            if len(kept) == want:
                break
            ests = [estimate(i, flat, a.shape, j, step) for step in steps]
            if any(e is None for e in ests):
                skipped += 1
                continue
            value = float(np.mean(ests))
            kept.append(j)
            numeric.append(value)
        order = np.argsort(kept)
        coords = np.asarray(kept, dtype=np.int64)[order]
        results.append(GradCheckResult(names[i], g[coords], np.asarray(numeric)[order], skipped))
    return results


def _eval(fn, arrays, idx, replacement, offset):
    args = [Tensor._wrap(replacement if k == idx else a) for k, a in enumerate(arrays)]
    with BranchRecorder() as rec:
        value = fn(*args, offset=offset).item()
    return value, rec.signature()
