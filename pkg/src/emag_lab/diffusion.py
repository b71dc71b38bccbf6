"""Noise schedules, forward corruption and the two deterministic integrators."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

VP = "vp"
FLOW = "flow"


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete schedule indexed by integer step ``t`` in ``0..T``.

    ``vp``: variance-preserving, linear betas; ``alpha_bar[0] == 1`` exactly.
    ``flow``: rectified flow with ``sigma[t] = t / T`` (``t = T`` is pure noise).
    """

    kind: str
    T: int
    beta_start: float = 0.1
    beta_end: float = 20.0
    # explicit alpha_bar table (length T + 1) overriding the linear betas
    table: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in (VP, FLOW):
            raise ScheduleError(f"unknown schedule kind {self.kind!r}")
        if self.T < 1:
            raise ScheduleError("T must be >= 1")
        if self.table is not None:
            ab = np.asarray(self.table, dtype=np.float64)
            if self.kind != VP or ab.shape != (self.T + 1,):
                raise ScheduleError("table must be a vp alpha_bar of length T + 1")
            if np.any(np.diff(ab) > 0) or np.any(ab < 0) or np.any(ab > 1):
                raise ScheduleError("alpha_bar table must be non-increasing in [0, 1]")

    @property
    def alpha_bar(self) -> np.ndarray:
        if self.kind != VP:
            raise ScheduleError("alpha_bar is only defined for vp schedules")
        if self.table is not None:
            return np.asarray(self.table, dtype=np.float64)
        # beta_start/end are continuous-time rates; per-step betas scale as 1/T.
        betas = np.linspace(self.beta_start, self.beta_end, self.T) / self.T
        return np.concatenate([[1.0], np.cumprod(1.0 - betas)])

    @property
    def sigmas(self) -> np.ndarray:
        if self.kind != FLOW:
            raise ScheduleError("sigmas are only defined for flow schedules")
        return np.arange(self.T + 1, dtype=np.float64) / self.T

    def model_time(self, t: int) -> float:
        """Scalar time fed to the denoiser: t/T for vp, sigma_t for flow."""
        return t / self.T

    def check_step(self, t: int) -> None:
        if not 0 <= t <= self.T:
            raise ScheduleError(f"step {t} outside [0, {self.T}]")

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "T": self.T,
             "beta_start": self.beta_start, "beta_end": self.beta_end}
        if self.table is not None:
            d["table"] = list(self.table)
        return d


def forward_corrupt(x0: np.ndarray, t, noise: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Corrupt clean data to step ``t`` (int step, or per-sample array of steps).

    For flow schedules ``t`` may also be a continuous sigma in [0, 1] when
    given as a float array; integer steps are mapped through ``sigmas``.
    """
    if x0.shape != noise.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs noise {noise.shape}")
    t_arr = np.asarray(t)
    if schedule.kind == VP:
        if np.any(t_arr < 0) or np.any(t_arr > schedule.T) or t_arr.dtype.kind not in "iu":
            raise ScheduleError(f"vp step out of range: {t}")
        ab = schedule.alpha_bar[t_arr]
        ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise
    if t_arr.dtype.kind in "iu":
        if np.any(t_arr < 0) or np.any(t_arr > schedule.T):
            raise ScheduleError(f"flow step out of range: {t}")
        s = schedule.sigmas[t_arr]
    else:
        if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
            raise ScheduleError(f"flow time out of range: {t}")
        s = t_arr.astype(np.float64)
    s = s.reshape(s.shape + (1,) * (x0.ndim - s.ndim))
    return (1.0 - s) * x0 + s * noise


def ddim_step(x_t: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int,
              schedule: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta = 0) DDIM update from step ``t`` to ``t_prev``."""
    if schedule.kind != VP:
        raise ScheduleError("ddim_step needs a vp schedule")
    if not t > t_prev >= 0:
        raise ScheduleError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    schedule.check_step(t)
    ab = schedule.alpha_bar
    a_t, a_prev = ab[t], ab[t_prev]
    if a_t <= 0.0:
        raise ScheduleError(f"singular schedule: alpha_bar[{t}] = {a_t}")
    x0_hat = (x_t - np.sqrt(1.0 - a_t) * eps_hat) / np.sqrt(a_t)
    return np.sqrt(a_prev) * x0_hat + np.sqrt(1.0 - a_prev) * eps_hat


def flow_euler_step(x: np.ndarray, v_hat: np.ndarray, dt: float) -> np.ndarray:
    return x + dt * v_hat


def integrate(x: np.ndarray, pred: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Advance one sampler step from ``t`` to ``t - 1`` with the schedule's integrator."""
    if schedule.kind == VP:
        return ddim_step(x, pred, t, t - 1, schedule)
    s = schedule.sigmas
    return flow_euler_step(x, pred, s[t - 1] - s[t])
