"""Numeric checks of the closed-form formulas the sampler relies on."""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation
from scipy.stats import norm

from .measurement import build_A, vec_rotations
from .rot6d import from_sixdof, is_rotation, to_sixdof, vjp_from_sixdof
from .skeleton import build_skeleton, default_skeleton, forward_kinematics
from .uncertainty import (
    ENTRY_NAMES,
    covariance_sixdof_pushforward,
    expected_minors,
    monte_carlo_pushforward,
    sylvester_minors,
)

logger = logging.getLogger("tripose.verification")

DEFAULT_WS = (0.05, 0.3, 1.0)
FAMILY_ALPHA = 1e-3
MIN_Z = 3.0

CovarianceHook = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SuiteResult:
    name: str
    valid: bool
    errors: list[str]
    rows: list[list[str]] = field(default_factory=list)
    z_threshold: float | None = None


@dataclass(frozen=True)
class VerificationResult:
    valid: bool
    errors: list[str]
    suites: list[SuiteResult]


def sign_error_hook(first: str, second: str) -> CovarianceHook:
    """Flip the sign of one symmetric covariance entry, e.g. ("R13", "r2")."""
    try:
        i, j = ENTRY_NAMES.index(first), ENTRY_NAMES.index(second)
    except ValueError as exc:
        raise ValueError(f"unknown covariance entry: {first},{second}") from exc

    def hook(cov: np.ndarray) -> np.ndarray:
        out = cov.copy()
        out[i, j] = -out[i, j]
        if i != j:
            out[j, i] = -out[j, i]
        return out

    return hook


def z_threshold(comparisons: int, alpha: float = FAMILY_ALPHA) -> float:
    """Two-sided Bonferroni bound for ``comparisons`` tests, never below MIN_Z."""
    return max(MIN_Z, float(norm.isf(alpha / (2 * comparisons))))


def _random_estimates(points: int, seed: int) -> np.ndarray:
    return to_sixdof(Rotation.random(points, random_state=seed).as_matrix())


def covariance_suite(
    points: int = 20,
    ws: tuple[float, ...] = DEFAULT_WS,
    samples: int = 200_000,
    seed: int = 0,
    partitions: int = 1,
    workers: int = 1,
    hook: CovarianceHook | None = None,
) -> SuiteResult:
    estimates = _random_estimates(points, seed)
    upper = np.triu_indices(9)
    comparisons = points * len(ws) * (upper[0].size + 9)
    z_max = z_threshold(comparisons)
    errors = []
    rows = []
    worst = 0.0
    for p, r_hat in enumerate(estimates):
        for w in ws:
            closed = covariance_sixdof_pushforward(r_hat, w)
            cov = closed.covariance if hook is None else hook(closed.covariance)
            mc = monte_carlo_pushforward(
                r_hat, w, samples, seed=seed + 7919 * p, partitions=partitions, workers=workers
            )
            mean_se = np.sqrt(np.maximum(np.diag(mc.covariance), 1e-300) / samples)
            mean_z = np.abs(mc.mean - closed.mean) / mean_se
            for i in np.flatnonzero(mean_z > z_max):
                errors.append(
                    f"point {p} w={w}: E[{ENTRY_NAMES[i]}] closed {closed.mean[i]:.6g} "
                    f"vs sampled {mc.mean[i]:.6g} ({mean_z[i]:.1f} SE)"
                )
            se = np.maximum(mc.standard_error, 1e-300)
            z = np.abs(mc.covariance - cov) / se
            for i, j in zip(*upper):
                worst = max(worst, z[i, j])
                if z[i, j] > z_max:
                    errors.append(
                        f"point {p} w={w}: Cov[{ENTRY_NAMES[i]},{ENTRY_NAMES[j]}] "
                        f"closed {cov[i, j]:.6g} vs sampled {mc.covariance[i, j]:.6g} "
                        f"({z[i, j]:.1f} SE)"
                    )
        logger.debug("covariance point %d done", p)
    rows.append(["points x w", f"{points} x {len(ws)}"])
    rows.append(["samples", str(samples)])
    rows.append([f"Bonferroni z (family alpha {FAMILY_ALPHA:g})", f"{z_max:.2f}"])
    rows.append(["worst z", f"{worst:.2f}"])
    return SuiteResult("covariance vs Monte Carlo", not errors, errors, rows, z_threshold=z_max)


def minors_suite(
    points: int = 20,
    ws: tuple[float, ...] = DEFAULT_WS,
    seed: int = 0,
    rtol: float = 1e-9,
) -> SuiteResult:
    errors = []
    rows = []
    for p, r_hat in enumerate(_random_estimates(points, seed)):
        for w in ws:
            sigma = covariance_sixdof_pushforward(r_hat, w).sigma
            minors = sylvester_minors(sigma)
            expected = expected_minors(w)
            rel = np.abs(minors - expected) / np.abs(expected)
            for k in np.flatnonzero(rel > rtol):
                errors.append(
                    f"point {p} w={w}: minor {k + 1} is {minors[k]:.12g}, "
                    f"expected {expected[k]:.12g}"
                )
            if p == 0:
                rows.append([f"w={w}", ", ".join(f"{m:.6g}" for m in minors)])
    return SuiteResult("Sylvester minors", not errors, errors, rows)


def rot6d_suite(
    rotations: int = 10_000,
    vjp_points: int = 100,
    seed: int = 0,
    tol: float = 1e-9,
    vjp_tol: float = 1e-5,
) -> SuiteResult:
    errors = []
    R = Rotation.random(rotations, random_state=seed).as_matrix()
    back = from_sixdof(to_sixdof(R))
    round_trip = float(np.max(np.abs(back - R)))
    if round_trip > tol:
        errors.append(f"round trip error {round_trip:.3g} exceeds {tol:g}")
    if not is_rotation(back, tol):
        errors.append("from_sixdof output is not a proper rotation")

    rng = np.random.default_rng(seed)
    h = 1e-6
    worst = 0.0
    for _ in range(vjp_points):
        r = rng.standard_normal(6)
        v = rng.standard_normal(9)
        analytic = vjp_from_sixdof(r, v)
        numeric = np.empty(6)
        for k in range(6):
            step = np.zeros(6)
            step[k] = h
            plus = from_sixdof(r + step).reshape(9)
            minus = from_sixdof(r - step).reshape(9)
            numeric[k] = np.dot(plus - minus, v) / (2 * h)
        worst = max(worst, float(np.max(np.abs(analytic - numeric))))
    if worst > vjp_tol:
        errors.append(f"VJP differs from finite differences by {worst:.3g}")
    rows = [["round trip", f"{round_trip:.3g}"], ["VJP max error", f"{worst:.3g}"]]
    return SuiteResult("6DoF algebra", not errors, errors, rows)


def fk_suite(
    poses: int = 1000, skeletons: int = 10, seed: int = 0, tol: float = 1e-12
) -> SuiteResult:
    rng = np.random.default_rng(seed)
    base = default_skeleton()
    errors = []
    worst = 0.0
    per_skeleton = max(poses // skeletons, 1)
    for s in range(skeletons):
        bones = base.bone_vectors * rng.uniform(0.5, 1.5, size=(base.joint_count, 1))
        bones = bones + 0.02 * rng.standard_normal(bones.shape)
        bones[0] = 0.0
        skeleton = build_skeleton(base.parents, bones, base.measured_joints)
        A = build_A(skeleton)
        R = Rotation.random(per_skeleton * skeleton.joint_count, random_state=seed + s)
        R = R.as_matrix().reshape(per_skeleton, skeleton.joint_count, 3, 3)
        linear = A.apply(vec_rotations(R))
        direct = forward_kinematics(skeleton, R)[:, list(skeleton.measured_joints), :]
        err = float(np.max(np.abs(linear - direct)))
        worst = max(worst, err)
        if err > tol:
            errors.append(f"skeleton {s}: linearised FK differs by {err:.3g}")
    rows = [["poses x skeletons", f"{per_skeleton} x {skeletons}"], ["max error", f"{worst:.3g}"]]
    return SuiteResult("FK linearisation", not errors, errors, rows)


def run_verification(
    samples: int = 200_000,
    points: int = 20,
    seed: int = 0,
    workers: int = 1,
    partitions: int = 1,
    hook: CovarianceHook | None = None,
) -> VerificationResult:
    suites = [
        covariance_suite(
            points=points,
            samples=samples,
            seed=seed,
            partitions=partitions,
            workers=workers,
            hook=hook,
        ),
        minors_suite(points=points, seed=seed),
        rot6d_suite(seed=seed),
        fk_suite(seed=seed),
    ]
    errors = [f"{suite.name}: {e}" for suite in suites for e in suite.errors]
    for suite in suites:
        logger.info("%s: %s", suite.name, "ok" if suite.valid else "FAILED")
    return VerificationResult(valid=not errors, errors=errors, suites=suites)
