from __future__ import annotations

import logging
import math
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .denoiser import Denoiser, SigmaRule, predict_with_cfg, tweedie, vjp_with_cfg
from .measurement import (
    LinearOperatorA,
    MeasurementSet,
    apply_measurement_operator,
    build_A,
    differential_transform,
)
from .rot6d import batch_from_sixdof, project_sixdof, vjp_from_sixdof
from .skeleton import PoseSequence, Skeleton, recover_root_translation
from .uncertainty import rowmajor_sigma

logger = logging.getLogger("tripose.sampler")

WINDOW_OVERLAP = 20
DIVERGENCE_LIMIT = 1e3
COVARIANCE_MODES = ("identity", "closed_form")
W_SCHEDULES = ("vp", "sigma")
SCORE_WEIGHTS = ("variance", "unit")
# floor on the measurement noise seen by the normal matrix; keeps it invertible as w_t -> 0
SIGMA_L_FLOOR = 1e-4


class ScheduleError(ValueError):
    pass


class SingularNormalMatrixError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, step: int, norm: float):
        super().__init__(f"sampler diverged at step {step}: largest joint norm {norm:.3g}")
        self.step = step
        self.norm = norm


@dataclass(frozen=True, eq=False)
class Schedule:
    steps: int
    timesteps: np.ndarray
    sigmas: np.ndarray
    alpha_bars: np.ndarray
    T: float
    rule: SigmaRule

    def pair(self, i: int) -> tuple[float, float, float, float]:
        """(t, s, alpha_bar_t, alpha_bar_s) for the transition i -> i - 1."""
        return (
            float(self.timesteps[i]),
            float(self.timesteps[i - 1]),
            float(self.alpha_bars[i]),
            float(self.alpha_bars[i - 1]),
        )


def make_schedule(
    N: int,
    T: float = 1.0,
    sigma_rule: SigmaRule | Callable[[float], float] | None = None,
) -> Schedule:
    if N < 1:
        raise ScheduleError(f"need at least one step, got {N}")
    if T <= 0:
        raise ScheduleError("terminal time must be positive")
    rule = sigma_rule if sigma_rule is not None else SigmaRule(T=T)
    sigma_of = rule.sigma if isinstance(rule, SigmaRule) else rule
    timesteps = np.linspace(0.0, T, N + 1)
    sigmas = np.array([float(sigma_of(float(t))) for t in timesteps])
    if sigmas[0] != 0.0:
        raise ScheduleError(f"sigma at t = 0 must be 0, got {sigmas[0]}")
    if not np.all(np.isfinite(sigmas)) or np.any(np.diff(sigmas) <= 0):
        raise ScheduleError("sigma rule is not strictly increasing over the timesteps")
    return Schedule(
        steps=N,
        timesteps=timesteps,
        sigmas=sigmas,
        alpha_bars=1.0 / (1.0 + sigmas**2),
        T=float(T),
        rule=rule,
    )


@dataclass(frozen=True)
class GuidanceConfig:
    eta: float = 0.0
    guidance_scale: float = 1.0
    sigma_l: float | None = None
    covariance_mode: str = "identity"
    w_schedule: str = "vp"
    cfg_weight: float = 1.0
    score_weight: str = "variance"

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if self.guidance_scale < 0:
            raise ValueError(f"guidance scale must be non-negative, got {self.guidance_scale}")
        if self.sigma_l is not None and self.sigma_l < 0:
            raise ValueError("sigma_l must be non-negative")
        if self.covariance_mode not in COVARIANCE_MODES:
            raise ValueError(f"unknown covariance mode: {self.covariance_mode}")
        if self.w_schedule not in W_SCHEDULES:
            raise ValueError(f"unknown w schedule: {self.w_schedule}")
        if self.score_weight not in SCORE_WEIGHTS:
            raise ValueError(f"unknown score weight: {self.score_weight}")

    def w(self, sigma_t: float) -> float:
        if self.w_schedule == "sigma":
            return sigma_t
        return math.sqrt(sigma_t**2 / (1.0 + sigma_t**2))

    def step_weight(self, w_t: float) -> float:
        """Factor on the likelihood score before it enters the DDIM update.

        ``variance`` scales by w_t^2, which turns the score into a pseudo-inverse correction
        that stays bounded as the noise level goes to zero. ``unit`` adds the raw score.
        """
        return w_t**2 if self.score_weight == "variance" else 1.0


def tweedie_denoise(r_t: np.ndarray, eps: np.ndarray, alpha_bar_t: float) -> np.ndarray:
    if not 0.0 < alpha_bar_t <= 1.0:
        raise ScheduleError(f"alpha_bar must lie in (0, 1], got {alpha_bar_t}")
    r_t = np.asarray(r_t, dtype=np.float64)
    return tweedie(r_t, np.asarray(eps, dtype=np.float64), alpha_bar_t)


def location_residual(
    l_diff: np.ndarray, A_diff: LinearOperatorA, r_hat: np.ndarray
) -> np.ndarray:
    """e = l_diff - A D(r_hat), flattened per frame to (frames, 3 * outputs)."""
    predicted = apply_measurement_operator(A_diff, r_hat)
    frames = predicted.shape[0]
    return (np.asarray(l_diff, dtype=np.float64) - predicted).reshape(frames, -1)


def normal_matrix(
    A_diff: LinearOperatorA,
    r_hat: np.ndarray,
    mode: str,
    w_t: float,
    sigma_l: float,
) -> np.ndarray:
    """Per-frame w^2 A Σ A^T + sigma_l^2 I, shape (frames, rows, rows)."""
    frames = r_hat.shape[0]
    rows = A_diff.matrix.shape[0]
    if mode == "identity":
        base = w_t**2 * (A_diff.matrix @ A_diff.matrix.T) + sigma_l**2 * np.eye(rows)
        return np.broadcast_to(base, (frames, rows, rows)).copy()
    joints = list(A_diff.chain_joints)
    blocks = A_diff.matrix.reshape(rows, A_diff.joint_count, 9)[:, joints, :]
    sigma = rowmajor_sigma(r_hat[:, joints, :], w_t)
    projected = np.einsum("ajm,fjmn,bjn->fab", blocks, sigma, blocks)
    return w_t**2 * projected + sigma_l**2 * np.eye(rows)


def _solve(M: np.ndarray, e: np.ndarray) -> np.ndarray:
    try:
        u = np.linalg.solve(M, e[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise SingularNormalMatrixError("normal matrix is singular") from exc
    if not np.all(np.isfinite(u)):
        raise SingularNormalMatrixError("normal matrix is singular")
    return u


def residual_objective(
    l_diff: np.ndarray,
    A_diff: LinearOperatorA,
    r_hat: np.ndarray,
    mode: str,
    w_t: float,
    sigma_l: float,
) -> float:
    """0.5 * e^T M^-1 e summed over frames, with M held at the given r_hat."""
    e = location_residual(l_diff, A_diff, r_hat)
    M = normal_matrix(A_diff, r_hat, mode, w_t, sigma_l)
    return 0.5 * float(np.sum(e * _solve(M, e)))


def likelihood_score(
    l_diff: np.ndarray,
    A_diff: LinearOperatorA,
    r_hat: np.ndarray,
    denoiser_vjp: Callable[[np.ndarray], np.ndarray],
    config: GuidanceConfig,
    w_t: float,
    sigma_l: float,
) -> np.ndarray:
    """Guidance term over the (frames, J, 6) state.

    Solves M u = e per frame, pulls A^T u back through D at r_hat and then through the
    denoiser with ``denoiser_vjp``. The normal matrix is treated as constant in r_hat.
    """
    r_hat = np.asarray(r_hat, dtype=np.float64)
    e = location_residual(l_diff, A_diff, r_hat)
    u = _solve(normal_matrix(A_diff, r_hat, config.covariance_mode, w_t, sigma_l), e)
    frames, joints = r_hat.shape[:2]
    cotangent_R = (u @ A_diff.matrix).reshape(frames, joints, 9)
    chain = list(A_diff.chain_joints)
    cotangent = np.zeros_like(r_hat)
    if chain:
        cotangent[:, chain, :] = vjp_from_sixdof(r_hat[:, chain, :], cotangent_R[:, chain, :])
    return config.guidance_scale * denoiser_vjp(cotangent)


def ddim_constants(alpha_t: float, alpha_s: float, eta: float) -> tuple[float, float]:
    if alpha_s < alpha_t:
        raise ScheduleError("target step must be less noisy than the current step")
    if alpha_t >= 1.0:
        return 0.0, 0.0
    c1 = eta * math.sqrt((1.0 - alpha_t / alpha_s) * (1.0 - alpha_s) / (1.0 - alpha_t))
    rest = 1.0 - alpha_s - c1**2
    if rest < -1e-12:
        raise ScheduleError(f"invalid schedule/eta combination: 1 - alpha_s - c1^2 = {rest:.3g}")
    return c1, math.sqrt(max(rest, 0.0))


def ddim_step(
    r_t: np.ndarray,
    r_hat: np.ndarray,
    eps_t: np.ndarray,
    g: np.ndarray,
    alpha_t: float,
    alpha_s: float,
    eta: float,
    rng: np.random.Generator | int | None = None,
) -> np.ndarray:
    c1, c2 = ddim_constants(alpha_t, alpha_s, eta)
    r_s = math.sqrt(alpha_s) * r_hat + c2 * eps_t + math.sqrt(alpha_t) * g
    if c1 > 0.0:
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        r_s = r_s + c1 * rng.standard_normal(np.shape(r_t))
    return r_s


def plan_windows(
    frames: int, window: int, overlap: int = WINDOW_OVERLAP
) -> list[tuple[int, int]]:
    if frames < 1:
        raise ValueError("empty sequence")
    if frames <= window:
        return [(0, frames)]
    stride = window - overlap
    if stride < 1:
        raise ValueError(f"overlap {overlap} leaves no stride in a {window}-frame window")
    spans = []
    start = 0
    while start + window < frames:
        spans.append((start, start + window))
        start += stride
    spans.append((frames - window, frames))
    return spans


def blend_windows(
    spans: list[tuple[int, int]], pieces: list[np.ndarray], frames: int
) -> np.ndarray:
    """Linear cross-fade in 6DoF over each overlap, then re-orthonormalise."""
    out = np.empty((frames,) + pieces[0].shape[1:])
    covered = 0
    for (start, stop), piece in zip(spans, pieces):
        shared = max(covered - start, 0)
        if shared:
            ramp = (np.arange(1, shared + 1) / (shared + 1))[:, None, None]
            out[start:covered] = (1.0 - ramp) * out[start:covered] + ramp * piece[:shared]
        out[start + shared:stop] = piece[shared:]
        covered = max(covered, stop)
    return project_sixdof(out)


def sample_window(
    measurements: MeasurementSet,
    A_diff: LinearOperatorA,
    denoiser: Denoiser,
    schedule: Schedule,
    config: GuidanceConfig,
    seed,
) -> np.ndarray:
    """One guided trajectory over a window; returns the final (frames, J, 6) state."""
    rng = np.random.default_rng(seed)
    frames = measurements.frames
    joints = A_diff.joint_count
    cond = denoiser.conditioning(measurements)
    l_diff = differential_transform(measurements.locations)
    sigma_l = measurements.sigma_l if config.sigma_l is None else config.sigma_l
    sigma_l = max(sigma_l, SIGMA_L_FLOOR)

    r = rng.standard_normal((frames, joints, 6))
    for i in range(schedule.steps, 0, -1):
        t, _, alpha_t, alpha_s = schedule.pair(i)
        eps = predict_with_cfg(denoiser, r, t, cond, config.cfg_weight)
        r_hat = tweedie_denoise(r, eps, alpha_t)
        if config.guidance_scale > 0.0:
            state = r

            def pullback(v, state=state, t=t):
                return vjp_with_cfg(denoiser, state, t, cond, v, config.cfg_weight)

            w_t = config.w(float(schedule.sigmas[i]))
            g = likelihood_score(l_diff, A_diff, r_hat, pullback, config, w_t, sigma_l)
            g = config.step_weight(w_t) * g
        else:
            g = np.zeros_like(r)
        r = ddim_step(r, r_hat, eps, g, alpha_t, alpha_s, config.eta, rng)
        norm = float(np.max(np.linalg.norm(r, axis=-1)))
        if not math.isfinite(norm) or norm > DIVERGENCE_LIMIT:
            raise DivergenceError(i, norm)
        logger.debug("step %d: max |r_j| = %.4g", i, norm)
    return r


def run_inference(
    measurements: MeasurementSet,
    skeleton: Skeleton,
    denoiser: Denoiser,
    schedule: Schedule,
    config: GuidanceConfig,
    seed: int,
    workers: int = 1,
) -> PoseSequence:
    if schedule.rule != denoiser.sigma_rule:
        raise ScheduleError("schedule and denoiser use different sigma rules")
    if tuple(measurements.measured_joints) != tuple(skeleton.measured_joints):
        raise ValueError("measurements and skeleton disagree on measured joints")
    A_diff = build_A(skeleton).to_differential()
    overlap = min(WINDOW_OVERLAP, denoiser.window // 2)
    spans = plan_windows(measurements.frames, denoiser.window, overlap)
    seeds = np.random.SeedSequence(seed).spawn(len(spans))
    logger.info("sampling %d frames in %d window(s)", measurements.frames, len(spans))

    def run(k: int) -> np.ndarray:
        start, stop = spans[k]
        return sample_window(
            measurements.window(start, stop),
            A_diff,
            denoiser.restrict(start, stop),
            schedule,
            config,
            seeds[k],
        )

    with ThreadPoolExecutor(max_workers=max(workers, 1)) as pool:
        pieces = list(pool.map(run, range(len(spans))))

    rotations = blend_windows(spans, pieces, measurements.frames)
    root = recover_root_translation(
        skeleton, batch_from_sixdof(rotations), measurements.locations[:, 0, :]
    )
    return PoseSequence(rotations, root)

