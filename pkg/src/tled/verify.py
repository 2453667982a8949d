"""Built-in verification suites.

Every suite is a deterministic function returning its measured numbers and
a pass flag. The report (``run_verify(...).report``) holds only those, so two
runs produce byte-identical JSON at any thread count; wall-clock per suite is
kept beside it in ``timings``.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from . import scenarios as sc
from .contact import brute_force_closest, build_master_surface, closest_points
from .errors import TledError
from .fem import DEFAULT_HOURGLASS_KAPPA
from .generators import icosphere
from .metrics import DEFAULT_SUCCESS_THRESHOLD_MM, hausdorff_percentile, nearest_rank_percentile
from .warp import ScatteredSamples, build_backward_samples, fit_multilevel_bspline

PATCH_TOL = 1e-8
CONSTITUTIVE_FD_TOL = 1e-5
OGDEN_MATCH_TOL = 1e-8
LOCKING_TOL = 0.05
LOCKING_MIN_STIFFENING = 0.15
HOURGLASS_TOL = 0.10
HOURGLASS_GROWTH = 10.0
SPRING_CHAIN_TOL = 1e-8
EQUIVALENCE_TOL = 0.02
PENETRATION_TOL = 1e-10
ROUND_TRIP_TOL_MM = 0.5
METRICS_TOL = 1e-12


def _suite_patch(threads):
    errs = sc.patch_suite(3)
    return {"max_F_error": errs, "tolerance": PATCH_TOL}, all(e <= PATCH_TOL for e in errs.values())


def _suite_constitutive(threads):
    m = sc.constitutive_suite(100)
    ok = (m["neo_hookean_vs_energy"] <= CONSTITUTIVE_FD_TOL and m["ogden_vs_energy"] <= CONSTITUTIVE_FD_TOL
          and m["ogden_alpha2_vs_neo_hookean"] <= OGDEN_MATCH_TOL)
    return m, ok


def _suite_locking(threads):
    # coarse version of the locking check: hexes, ANP tets and standard tets on one 12x8x8 grid
    # the hex reference pins the hourglass coefficient so only the hourglass suite sees overrides
    shape = (12, 8, 8)
    ref = sc.cantilever(shape, hourglass_kappa=DEFAULT_HOURGLASS_KAPPA, threads=threads)
    anp = sc.cantilever(shape, element="anp", threads=threads)
    std = sc.cantilever(shape, element="standard", threads=threads)
    anp_err = abs(anp.tip_deflection - ref.tip_deflection) / ref.tip_deflection
    stiffening = 1.0 - std.tip_deflection / anp.tip_deflection
    m = {"hex_reference": ref.tip_deflection, "anp": anp.tip_deflection, "standard": std.tip_deflection,
         "anp_relative_error": anp_err, "standard_deflection_deficit": stiffening}
    return m, bool(ref.converged and anp_err <= LOCKING_TOL and stiffening >= LOCKING_MIN_STIFFENING)


def _suite_hourglass(threads):
    modes = sc.hourglass_mode_stiffness()
    coarse = sc.cantilever((6, 4, 4), point_load=True, threads=threads)
    fine = sc.cantilever((12, 8, 8), point_load=True, threads=threads)
    free = sc.cantilever((6, 4, 4), point_load=True, hourglass=False, max_iterations=3000, threads=threads)
    rel = abs(coarse.tip_deflection - fine.tip_deflection) / fine.tip_deflection
    growth = free.hourglass_amplitude / max(coarse.hourglass_amplitude, 1e-300)
    m = {"min_mode_stiffness": float(modes.min()), "coarse_relative_error": rel,
         "amplitude_with_control": coarse.hourglass_amplitude,
         "amplitude_without_control": free.hourglass_amplitude, "growth_ratio": growth}
    return m, bool(modes.min() > 0 and rel <= HOURGLASS_TOL and growth > HOURGLASS_GROWTH)


def _suite_dynamics(threads):
    err = sc.spring_chain_error()
    return {"spring_chain_relative_error": err, "tolerance": SPRING_CHAIN_TOL}, err <= SPRING_CHAIN_TOL


def _suite_equivalence(threads):
    ref = sc.indentation_fem(12, hourglass_kappa=DEFAULT_HOURGLASS_KAPPA, threads=threads)
    mls = sc.indentation_meshless(6, threads=threads)
    diff = sc.relative_max_difference(mls, ref, 12)
    tol = 2.0 * EQUIVALENCE_TOL  # coarse clouds; the full check is the acceptance test
    return {"relative_max_difference": diff, "tolerance": tol,
            "fem_iterations": ref.iterations, "meshless_iterations": mls.iterations}, diff <= tol


def _suite_contact(threads):
    m = sc.sphere_in_shell()
    V, T = icosphere(2, 1.0)
    master = build_master_surface(V, T)
    q = np.random.default_rng(0).uniform(-1.5, 1.5, (1000, 3))
    cp, _, tri, _ = closest_points(master, q)
    cp2, _, tri2 = brute_force_closest(master, q)
    m["oracle_queries"] = len(q)
    m["oracle_exact"] = bool(np.array_equal(cp, cp2) and np.array_equal(tri, tri2))
    ok = (m["converged"] and m["max_penetration_m"] <= PENETRATION_TOL and m["idempotent"]
          and m["separation_bitwise_equal"] and m["oracle_exact"])
    return m, bool(ok)


def smooth_field(p, amplitude=5.0, size=128.0):
    """A smooth synthetic displacement (mm) with the given peak amplitude."""
    k = 2 * np.pi / size
    return amplitude * np.stack([
        np.sin(k * p[:, 1]) * np.cos(k * p[:, 2]),
        np.sin(k * p[:, 2]) * np.cos(k * p[:, 0]),
        np.sin(k * p[:, 0]) * np.cos(k * p[:, 1]),
    ], axis=1)


def warp_round_trip(size=128.0, n_samples=20000, seed=0) -> float:
    """max |T_back(T_fwd(x)) - x| on interior probes for a 5 mm field over a size^3 box."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, size, (n_samples, 3))
    u = smooth_field(x, size=size)
    pad = 10.0
    domain = [[-pad] * 3, [size + pad] * 3]
    forward = fit_multilevel_bspline(ScatteredSamples(x, u), domain=domain)
    backward = fit_multilevel_bspline(build_backward_samples(x, u), domain=domain)
    g = np.linspace(0.1 * size, 0.9 * size, 16)
    probes = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    return float(np.linalg.norm(backward(forward(probes)) - probes, axis=1).max())


def _suite_warp(threads):
    err = warp_round_trip(size=64.0, n_samples=5000)
    return {"round_trip_max_mm": err, "tolerance_mm": ROUND_TRIP_TOL_MM}, err <= ROUND_TRIP_TOL_MM


def outlier_point_sets(offset=10.0):
    """100 points on a 25 mm lattice and a copy with one point moved by ``offset`` mm."""
    g = np.arange(5) * 25.0
    pts = np.stack(np.meshgrid(g, g, g[:4], indexing="ij"), -1).reshape(-1, 3)
    moved = pts.copy()
    moved[0, 0] -= offset
    return pts, moved


def _suite_metrics(threads):
    rng = np.random.default_rng(0)
    A, B = rng.normal(size=(300, 3)), rng.normal(size=(250, 3)) + 0.1
    D = cdist(A, B)
    brute = nearest_rank_percentile(np.concatenate([D.min(axis=1), D.min(axis=0)]), 95)
    fast = hausdorff_percentile(A, B, 95)
    pts, moved = outlier_point_sets()
    h95, h100 = hausdorff_percentile(pts, moved, 95), hausdorff_percentile(pts, moved, 100)
    m = {"brute_force_difference": abs(fast - brute), "outlier_h95": h95, "outlier_h100": h100,
         "default_threshold_mm": DEFAULT_SUCCESS_THRESHOLD_MM}
    ok = abs(fast - brute) <= METRICS_TOL and h95 == 0.0 and abs(h100 - 10.0) <= METRICS_TOL
    return m, bool(ok)


SUITES = {
    "patch": _suite_patch,
    "constitutive": _suite_constitutive,
    "locking": _suite_locking,
    "hourglass": _suite_hourglass,
    "dynamics": _suite_dynamics,
    "equivalence": _suite_equivalence,
    "contact": _suite_contact,
    "warp": _suite_warp,
    "metrics": _suite_metrics,
}


@dataclass
class VerifyResult:
    report: dict
    timings: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(s["passed"] for s in self.report["suites"].values())

    def report_json(self) -> str:
        return json.dumps(self.report, indent=2, sort_keys=True)


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return float(x)
    if isinstance(x, (np.integer, int)) and not isinstance(x, bool):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def run_verify(selector: str | None = None, threads: int = 1) -> VerifyResult:
    """Run all suites, or those named in the comma-separated ``selector``."""
    names = list(SUITES) if not selector or selector == "all" else [s.strip() for s in selector.split(",")]
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise TledError(f"unknown verification suite(s) {unknown}; available: {list(SUITES)}")
    suites, timings = {}, {}
    for name in names:
        t0 = time.perf_counter()
        try:
            metrics, ok = SUITES[name](threads)
            entry = {"passed": bool(ok), "metrics": _plain(metrics)}
        except TledError as exc:
            entry = {"passed": False, "error": f"{type(exc).__name__}: {exc}"}
        timings[name] = time.perf_counter() - t0
        suites[name] = entry
    report = {"suites": suites, "passed": all(s["passed"] for s in suites.values())}
    return VerifyResult(report, timings)
