"""Multilevel cubic B-spline transforms and volume resampling.

A transform is a stack of uniform cubic B-spline lattices over a box (mm);
level l has half the spacing of level l-1 and fits what the coarser levels
left unexplained. Each level takes the least-squares affine part of its
residual exactly (so constant and linear fields are reproduced by a single
level) and spreads the rest onto the lattice with the BA control-point
formula of multilevel B-spline approximation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

from .errors import WarpError
from .geometry import Volume

DEFAULT_LEVELS = 4
FALLOFF_CONTROL_POINTS = 2


def bspline_weights(t):
    """Uniform cubic B-spline basis values B0..B3 at local coordinate t in [0, 1)."""
    t = np.asarray(t, dtype=float)
    t2, t3 = t * t, t * t * t
    return np.stack(
        [(1 - t) ** 3 / 6.0, (3 * t3 - 6 * t2 + 4) / 6.0, (-3 * t3 + 3 * t2 + 3 * t + 1) / 6.0, t3 / 6.0],
        axis=-1,
    )


def bspline_derivatives(t):
    t = np.asarray(t, dtype=float)
    t2 = t * t
    return np.stack([-(1 - t) ** 2 / 2.0, (3 * t2 - 4 * t) / 2.0, (-3 * t2 + 2 * t + 1) / 2.0, t2 / 2.0], axis=-1)


@dataclass(frozen=True, eq=False)
class Lattice:
    """One level: control point (i, j, k) sits at origin + (index - 1) * spacing."""

    origin: np.ndarray  # domain lower corner, mm
    spacing: np.ndarray  # mm, per axis
    cells: tuple  # B-spline cells per axis; control points = cells + 3
    coeffs: np.ndarray  # (cells+3 per axis..., 3) displacement coefficients, mm

    @property
    def shape(self) -> tuple:
        return tuple(c + 3 for c in self.cells)


def _locate(lat_origin, spacing, cells, x):
    s = (x - lat_origin) / spacing
    i = np.floor(s).astype(np.int64)
    i = np.clip(i, 0, np.asarray(cells) - 1)
    return i, s - i


def _lattice_entries(lat_origin, spacing, cells, x):
    """Control point indices and weights (n, 64) of every point."""
    shape = tuple(c + 3 for c in cells)
    i, t = _locate(lat_origin, spacing, cells, x)
    wx, wy, wz = (bspline_weights(t[:, a]) for a in range(3))
    a, b, c = np.meshgrid(np.arange(4), np.arange(4), np.arange(4), indexing="ij")
    a, b, c = a.ravel(), b.ravel(), c.ravel()
    cols = np.ravel_multi_index(((i[:, 0:1] + a), (i[:, 1:2] + b), (i[:, 2:3] + c)), shape)
    return cols, wx[:, a] * wy[:, b] * wz[:, c]


def _lattice_matrix(lat_origin, spacing, cells, x) -> sp.csr_matrix:
    """Sparse (n_points x n_control) evaluation matrix of one lattice."""
    n_ctrl = int(np.prod([c + 3 for c in cells]))
    cols, w = _lattice_entries(lat_origin, spacing, cells, x)
    indptr = np.arange(0, 64 * len(x) + 1, 64)
    return sp.csr_matrix((w.ravel(), cols.ravel(), indptr), shape=(len(x), n_ctrl))


def _affine_fit(x, r):
    """Least-squares affine field through the samples, minimum norm in centred coordinates.

    Centring makes a single sample (or a coplanar set) resolve to the
    lowest-order field consistent with the data.
    """
    centre = x.mean(axis=0)
    scale = max(np.abs(x - centre).max(), 1e-300)
    A = np.hstack([np.ones((len(x), 1)), (x - centre) / scale])
    coef, *_ = np.linalg.lstsq(A, r, rcond=1e-10)
    return centre, scale, coef


def _control_positions(origin, spacing, shape):
    axes = [origin[a] + spacing[a] * (np.arange(shape[a]) - 1.0) for a in range(3)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)


def _fit_level(origin, spacing, cells, x, r):
    """Affine part exactly (cubic B-splines reproduce it with nodal-value
    coefficients) plus the BA control-point formula on what remains."""
    shape = tuple(c + 3 for c in cells)
    centre, scale, coef = _affine_fit(x, r)
    ctrl = _control_positions(origin, spacing, shape)
    affine = np.hstack([np.ones((len(ctrl), 1)), (ctrl - centre) / scale]) @ coef
    cols, w = _lattice_entries(origin, spacing, cells, x)
    indptr = np.arange(0, 64 * len(x) + 1, 64)
    B = sp.csr_matrix((w.ravel(), cols.ravel(), indptr), shape=(len(x), len(ctrl)))
    rest = r - B @ affine
    # BA: each sample proposes w_k r / sum(w^2) to its 64 control points;
    # control points keep the w^2-weighted mean of the proposals
    w2 = w * w
    denom = w2.sum(axis=1, keepdims=True)
    n_ctrl = len(ctrl)
    num = np.zeros((n_ctrl, 3))
    wsum = np.bincount(cols.ravel(), weights=w2.ravel(), minlength=n_ctrl)
    w3 = (w2 * w / denom).ravel()
    for c in range(3):
        num[:, c] = np.bincount(cols.ravel(), weights=w3 * np.repeat(rest[:, c], 64), minlength=n_ctrl)
    ba = np.divide(num, wsum[:, None], out=np.zeros_like(num), where=wsum[:, None] > 0)
    coeffs = affine + ba
    return coeffs.reshape(shape + (3,)), B


@dataclass(frozen=True, eq=False)
class BSplineTransform:
    """Sum of lattices over ``domain`` (2, 3) mm; displacement fades to zero outside."""

    levels: tuple
    domain: np.ndarray
    residual_max: tuple = ()

    @classmethod
    def identity(cls, domain, spacing=None, levels=1) -> "BSplineTransform":
        domain = np.asarray(domain, dtype=float)
        extent = domain[1] - domain[0]
        spacing = extent / 4.0 if spacing is None else np.broadcast_to(np.asarray(spacing, float), (3,))
        lats = []
        for _ in range(levels):
            cells = tuple(int(c) for c in np.maximum(np.ceil(extent / spacing - 1e-9), 1))
            lats.append(Lattice(domain[0], spacing, cells, np.zeros(tuple(c + 3 for c in cells) + (3,))))
            spacing = spacing / 2.0
        return cls(tuple(lats), domain)

    def displacement(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.zeros((len(x), 3))
        # outside the domain the lattice is read at the nearest domain point, not extrapolated
        xc = np.clip(x, self.domain[0], self.domain[1])
        for lat in self.levels:
            B = _lattice_matrix(lat.origin, lat.spacing, lat.cells, xc)
            out += B @ lat.coeffs.reshape(-1, 3)
        return out * self._falloff(x)[:, None]

    def _falloff(self, x):
        band = FALLOFF_CONTROL_POINTS * self.levels[0].spacing if self.levels else np.ones(3)
        lo, hi = self.domain
        outside = np.maximum(np.maximum(lo - x, x - hi), 0.0) / band
        tau = np.clip(outside, 0.0, 1.0)
        # smoothstep per axis: 1 inside, 0 beyond the band, C2 at both ends
        s = 1.0 - tau ** 3 * (10.0 - 15.0 * tau + 6.0 * tau * tau)
        return np.prod(s, axis=1)

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return x + self.displacement(x)

    def lipschitz_bound(self) -> float:
        """Upper bound on |dT/dx| (operator 2-norm) from coefficient differences."""
        total = 0.0
        for lat in self.levels:
            c = lat.coeffs
            g = 0.0
            for a in range(3):
                d = np.abs(np.diff(c, axis=a)).max() if c.shape[a] > 1 else 0.0
                g += (d / lat.spacing[a]) ** 2
            total += np.sqrt(3.0 * g)
        band = FALLOFF_CONTROL_POINTS * self.levels[0].spacing.min() if self.levels else 1.0
        max_disp = sum(np.abs(lat.coeffs).max() for lat in self.levels)
        return 1.0 + total + 1.875 * np.sqrt(3.0) * max_disp / band

    def evaluate_grid(self, axes, dtype=np.float64) -> np.ndarray:
        """Displacement on the tensor grid ``axes`` (three 1-D arrays), shape (nx, ny, nz, 3).

        Separable evaluation: the coefficient tensor is contracted with one
        basis matrix per axis.
        """
        axes = [np.asarray(a, dtype=float) for a in axes]
        shape = tuple(len(a) for a in axes)
        out = np.zeros(shape + (3,), dtype=dtype)
        for lat in self.levels:
            mats = []
            for a in range(3):
                ax = np.clip(axes[a], self.domain[0, a], self.domain[1, a])
                i, t = _locate(lat.origin[a], lat.spacing[a], lat.cells[a], ax)
                w = bspline_weights(t)
                M = np.zeros((shape[a], lat.shape[a]), dtype=dtype)
                np.add.at(M, (np.repeat(np.arange(shape[a]), 4), (i[:, None] + np.arange(4)).ravel()), w.ravel())
                mats.append(M)
            c = lat.coeffs.astype(dtype)
            # contract z, then y, then x
            t = np.einsum("ijkc,zk->ijzc", c, mats[2], optimize=True)
            t = np.einsum("ijzc,yj->iyzc", t, mats[1], optimize=True)
            out += np.einsum("iyzc,xi->xyzc", t, mats[0], optimize=True)
        fall = [self._axis_falloff(axes[a], a) for a in range(3)]
        if not all(np.all(f == 1.0) for f in fall):
            out *= (fall[0][:, None, None] * fall[1][None, :, None] * fall[2][None, None, :])[..., None].astype(dtype)
        return out

    def _axis_falloff(self, ax, a):
        band = FALLOFF_CONTROL_POINTS * self.levels[0].spacing[a] if self.levels else 1.0
        lo, hi = self.domain[0, a], self.domain[1, a]
        tau = np.clip(np.maximum(np.maximum(lo - ax, ax - hi), 0.0) / band, 0.0, 1.0)
        return 1.0 - tau ** 3 * (10.0 - 15.0 * tau + 6.0 * tau * tau)


@dataclass
class ScatteredSamples:
    positions: np.ndarray  # mm
    values: np.ndarray  # mm

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.positions.shape != self.values.shape or self.positions.shape[1:] != (3,):
            raise WarpError("sample positions and values must both be (n, 3)")


def fit_multilevel_bspline(samples: ScatteredSamples, domain=None, levels=DEFAULT_LEVELS,
                           initial_spacing=None) -> BSplineTransform:
    """Fit a coarse-to-fine lattice stack to scattered displacement samples.

    Each level fits the residual of the coarser ones. A level's contribution
    is scaled back (by the best factor in [0, 1]) if it would raise the
    largest sample residual, so the max residual never increases.
    """
    if not len(samples.positions):
        raise WarpError("no samples to fit")
    if levels < 1:
        raise WarpError("need at least one level")
    x, v = samples.positions, samples.values
    if domain is None:
        lo, hi = x.min(axis=0), x.max(axis=0)
        pad = np.maximum(1e-6 * np.maximum(np.abs(lo), np.abs(hi)), 1e-6)
        domain = np.stack([lo - pad, hi + pad])
    domain = np.asarray(domain, dtype=float)
    extent = domain[1] - domain[0]
    if np.any(extent <= 0):
        raise WarpError("domain must have positive extent on every axis")
    tol = 1e-9 * np.max(extent)
    outside = np.any((x < domain[0] - tol) | (x > domain[1] + tol), axis=1)
    if np.any(outside):
        raise WarpError(f"sample {int(np.nonzero(outside)[0][0])} lies outside the fitting domain")
    spacing = extent / 4.0 if initial_spacing is None else np.broadcast_to(np.asarray(initial_spacing, float), (3,)).copy()
    lats, residuals = [], []
    r = v.copy()
    current = np.abs(r).max()
    for _ in range(levels):
        cells = tuple(int(c) for c in np.maximum(np.ceil(extent / spacing - 1e-9), 1))
        coeffs, B = _fit_level(domain[0], spacing, cells, x, r)
        contrib = B @ coeffs.reshape(-1, 3)
        alpha = _safe_step(r, contrib, current)
        coeffs = coeffs * alpha
        r = r - alpha * contrib
        current = np.abs(r).max()
        lats.append(Lattice(domain[0].copy(), spacing.copy(), cells, coeffs))
        residuals.append(float(current))
        spacing = spacing / 2.0
    return BSplineTransform(tuple(lats), domain, tuple(residuals))


def _safe_step(r, contrib, current):
    if np.abs(r - contrib).max() <= current:
        return 1.0
    alphas = np.linspace(0.0, 1.0, 101)
    worst = [np.abs(r - a * contrib).max() for a in alphas]
    return float(alphas[int(np.argmin(worst))])


def sample_residuals(T: BSplineTransform, samples: ScatteredSamples) -> np.ndarray:
    return np.linalg.norm(T.displacement(samples.positions) - samples.values, axis=1)


def build_backward_samples(nodes, displacements) -> ScatteredSamples:
    """Samples of the inverse map: at X + u the backward displacement is -u."""
    nodes = np.asarray(nodes, dtype=float)
    disp = np.asarray(displacements, dtype=float)
    if nodes.shape != disp.shape:
        raise WarpError("nodes and displacements must have the same shape")
    return ScatteredSamples(nodes + disp, -disp)


def invert_points(forward: BSplineTransform, targets, iterations=5, initial=None) -> np.ndarray:
    """Fixed-point refinement X_S <- X_T - u(X_S) of source positions."""
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    xs = targets.copy() if initial is None else np.array(initial, dtype=float)
    for _ in range(iterations):
        xs = targets - forward.displacement(xs)
    return xs


# ---------------------------------------------------------------------------
# volume resampling


def warp_volume(source: Volume, backward: BSplineTransform | None, target_dims=None, target_spacing=None,
                target_origin=None, order=1, refine_with: BSplineTransform | None = None,
                refine_iterations=0) -> Volume:
    """Pull-back resampling: target voxel X_T takes the source value at X_T + b(X_T).

    ``order`` 1 is trilinear (default), 3 is cubic B-spline interpolation.
    Out-of-source samples get ``source.background``.
    """
    dims = tuple(source.dims if target_dims is None else target_dims)
    spacing = tuple(source.spacing if target_spacing is None else target_spacing)
    origin = tuple(source.origin if target_origin is None else target_origin)
    axes = [origin[a] + spacing[a] * np.arange(dims[a]) for a in range(3)]
    src_axes_origin = np.asarray(source.origin)
    src_spacing = np.asarray(source.spacing)
    if backward is None or not backward.levels:
        disp = None
    else:
        disp = backward.evaluate_grid(axes, dtype=np.float32)
    coords = np.empty((3,) + dims, dtype=np.float32)
    for a in range(3):
        shape = [1, 1, 1]
        shape[a] = dims[a]
        base = ((axes[a] - src_axes_origin[a]) / src_spacing[a]).astype(np.float32).reshape(shape)
        if disp is None:
            coords[a] = np.broadcast_to(base, dims)
        else:
            coords[a] = base + disp[..., a] / np.float32(src_spacing[a])
    if refine_with is not None and refine_iterations:
        # exact-inverse polish of the source positions using the forward transform
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
        init = (coords.reshape(3, -1).T * src_spacing + src_axes_origin)
        xs = invert_points(refine_with, grid, refine_iterations, init)
        coords = ((xs - src_axes_origin) / src_spacing).T.reshape((3,) + dims).astype(np.float32)
    identity = disp is None or not np.any(disp)
    del disp
    data = source.scalars
    same_grid = dims == source.dims and np.allclose(spacing, source.spacing) and np.allclose(origin, source.origin)
    if identity and same_grid and not refine_iterations:
        return Volume(dims, spacing, origin, data.copy(), source.background)
    out = ndimage.map_coordinates(data, coords, order=order, mode="constant", cval=source.background,
                                  prefilter=order > 1)
    # map_coordinates treats points within half a voxel outside as valid; be strict
    upper = np.asarray(source.dims, dtype=np.float32) - 1
    eps = np.float32(1e-4)
    outside = np.zeros(dims, dtype=bool)
    for a in range(3):
        outside |= (coords[a] < -eps) | (coords[a] > upper[a] + eps)
    out[outside] = source.background
    return Volume(dims, spacing, origin, out, source.background)


# ---------------------------------------------------------------------------
# serialization


def save_transform(T: BSplineTransform, path) -> None:
    """JSON header beside a raw little-endian float64 coefficient file."""
    path = Path(path)
    raw = path.with_suffix(".raw")
    header = {
        "kind": "multilevel_cubic_bspline",
        "units": "mm",
        "domain_mm": T.domain.tolist(),
        "dtype": "f64",
        "data_file": raw.name,
        "levels": [
            {"origin_mm": lat.origin.tolist(), "spacing_mm": lat.spacing.tolist(), "cells": list(lat.cells)}
            for lat in T.levels
        ],
        "residual_max_mm": list(T.residual_max),
    }
    path.write_text(json.dumps(header, indent=1), encoding="utf-8")
    np.concatenate([lat.coeffs.ravel() for lat in T.levels]).astype("<f8").tofile(raw)


def load_transform(path) -> BSplineTransform:
    path = Path(path)
    try:
        header = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise WarpError(f"bad transform header: {exc}") from None
    data = np.fromfile(path.parent / header.get("data_file", path.with_suffix(".raw").name), dtype="<f8")
    lats, pos = [], 0
    for lv in header["levels"]:
        cells = tuple(int(c) for c in lv["cells"])
        shape = tuple(c + 3 for c in cells) + (3,)
        n = int(np.prod(shape))
        if pos + n > data.size:
            raise WarpError("transform payload shorter than its header declares")
        lats.append(Lattice(np.asarray(lv["origin_mm"], float), np.asarray(lv["spacing_mm"], float), cells,
                            data[pos:pos + n].reshape(shape)))
        pos += n
    if pos != data.size:
        raise WarpError("transform payload longer than its header declares")
    return BSplineTransform(tuple(lats), np.asarray(header["domain_mm"], float),
                            tuple(header.get("residual_max_mm", ())))
