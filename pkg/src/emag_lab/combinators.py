"""Prediction combination rules (eps or velocity space alike).

Every extrapolation ``a + w * (b - a)`` goes through :func:`lerp`, which is
algebraically that expression but evaluated so that ``w = 0`` returns ``a``,
``w = 1`` returns ``b`` and ``a == b`` returns ``a``, all bit-for-bit. The
reduction identities (EMAG at w_e = 1 or lambda = 0 equals CFG) rely on it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention_guidance import GuidanceWindow


class GuidanceConfigError(ValueError):
    pass


def lerp(a: np.ndarray, b: np.ndarray, w: float) -> np.ndarray:
    d = b - a
    if w <= 0.5:
        return a + w * d
    return b + (w - 1.0) * d


def cfg_combine(eps_u: np.ndarray, eps_c: np.ndarray, w: float) -> np.ndarray:
    """eps_u + w (eps_c - eps_u)."""
    return lerp(eps_u, eps_c, w)


def autoguidance_combine(eps_weak: np.ndarray, eps_strong: np.ndarray, w: float) -> np.ndarray:
    """eps_weak + w (eps_strong - eps_weak)."""
    return lerp(eps_weak, eps_strong, w)


def pag_combine(eps: np.ndarray, eps_perturbed: np.ndarray, w: float) -> np.ndarray:
    """eps + w (eps - eps_perturbed)."""
    return lerp(eps_perturbed, eps, 1.0 + w)


@dataclass
class BranchPredictions:
    eps_uncond: np.ndarray | None = None
    eps_cond: np.ndarray | None = None
    eps_cond_perturbed: np.ndarray | None = None
    eps_uncond_perturbed: np.ndarray | None = None

    def __post_init__(self):
        shapes = {a.shape for a in self.present().values()}
        if len(shapes) > 1:
            raise ValueError(f"branch predictions disagree in shape: {shapes}")

    def present(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.__dict__.items() if v is not None}


def emag_conditional(preds: BranchPredictions, w_e: float, w_cfg: float) -> np.ndarray:
    """Two-step conditional EMAG: guide the conditional branch away from its
    EMA-perturbed twin, then apply CFG against the unconditional branch."""
    missing = [n for n in ("eps_uncond", "eps_cond", "eps_cond_perturbed") if getattr(preds, n) is None]
    if missing:
        raise GuidanceConfigError(f"emag_conditional needs branches {missing}")
    guided_c = emag_guided_branch(preds.eps_cond, preds.eps_cond_perturbed, w_e)
    return cfg_combine(preds.eps_uncond, guided_c, w_cfg)


def emag_guided_branch(eps: np.ndarray, eps_perturbed: np.ndarray, w_e: float) -> np.ndarray:
    """eps' + w_e (eps - eps'), the first EMAG step."""
    return lerp(eps_perturbed, eps, w_e)


def emag_unconditional(eps: np.ndarray, eps_perturbed: np.ndarray, w_e: float) -> np.ndarray:
    """Unconditional EMAG: eps'(x, null) + w_e (eps(x) - eps'(x, null))."""
    return lerp(eps_perturbed, eps, w_e)


def s2_combine(cfg_out: np.ndarray, eps_perturbed_dropped: np.ndarray, s: float) -> np.ndarray:
    """CFG output minus ``s`` times the layer-dropped sub-network prediction."""
    if s == 0.0:
        return cfg_out
    return cfg_out - s * eps_perturbed_dropped


# ---------------------------------------------------------------- APG

@dataclass
class ApgMomentum:
    """Running guidance direction carried across the steps of one trajectory."""

    running: np.ndarray | None = None


def _per_sample_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    axes = tuple(range(1, a.ndim))
    return np.sum(a * b, axis=axes, keepdims=True)


def apg_project(diff: np.ndarray, ref: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split ``diff`` into components parallel and orthogonal to ``ref`` per sample."""
    ref_sq = _per_sample_dot(ref, ref)
    coef = np.divide(_per_sample_dot(diff, ref), ref_sq,
                     out=np.zeros_like(ref_sq), where=ref_sq > 0)
    parallel = coef * ref
    return parallel, diff - parallel


def apg_combine(eps_u: np.ndarray, eps_c: np.ndarray, w: float, beta_apg: float = -0.5,
                r: float = 7.5, momentum: ApgMomentum | None = None,
                eta_parallel: float = 0.0) -> np.ndarray:
    """Adaptive projected guidance.

    The CFG direction gets momentum (``beta_apg``), is clipped to norm ``r``
    per sample, then its component parallel to ``eps_c`` is scaled by
    ``eta_parallel`` before extrapolating with ``w - 1``.
    """
    diff = eps_c - eps_u
    if momentum is not None:
        if momentum.running is not None:
            diff = diff + beta_apg * momentum.running
        momentum.running = diff
    if math.isfinite(r):
        norm = np.sqrt(_per_sample_dot(diff, diff))
        factor = np.minimum(1.0, np.divide(r, norm, out=np.ones_like(norm), where=norm > 0))
        diff = diff * factor
    parallel, orthogonal = apg_project(diff, eps_c)
    return eps_c + (w - 1.0) * (orthogonal + eta_parallel * parallel)


# ---------------------------------------------------------------- CADS

@dataclass(frozen=True)
class CadsConfig:
    tau1: float = 0.6
    tau2: float = 0.9
    s: float = 0.25
    psi: float = 1.0

    def __post_init__(self):
        if not self.tau1 < self.tau2:
            raise GuidanceConfigError(f"CADS needs tau1 < tau2, got {self.tau1}, {self.tau2}")


def cads_gamma(t_norm: float, tau1: float, tau2: float) -> float:
    if t_norm <= tau1:
        return 1.0
    if t_norm >= tau2:
        return 0.0
    return (tau2 - t_norm) / (tau2 - tau1)


def cads_anneal(c_embed: np.ndarray, t_norm: float, tau1: float, tau2: float, s: float,
                psi: float, noise: np.ndarray) -> np.ndarray:
    """Anneal a conditioning embedding toward Gaussian noise early in sampling.

    ``t_norm`` is the remaining-noise fraction (1 at the first step). With
    ``psi > 0`` the result is pulled back to the per-sample mean and std of
    the clean embedding, mixed by ``psi``.
    """
    if not tau1 < tau2:
        raise GuidanceConfigError(f"CADS needs tau1 < tau2, got {tau1}, {tau2}")
    gamma = cads_gamma(t_norm, tau1, tau2)
    if gamma == 1.0:
        return c_embed
    mixed = math.sqrt(gamma) * c_embed + s * math.sqrt(1.0 - gamma) * noise
    if psi == 0.0:
        return mixed
    axes = tuple(range(1, c_embed.ndim))
    mu_c = c_embed.mean(axis=axes, keepdims=True)
    sd_c = c_embed.std(axis=axes, keepdims=True)
    mu_m = mixed.mean(axis=axes, keepdims=True)
    sd_m = mixed.std(axis=axes, keepdims=True)
    rescaled = (mixed - mu_m) / np.where(sd_m > 0, sd_m, 1.0) * sd_c + mu_c
    return psi * rescaled + (1.0 - psi) * mixed


@dataclass(frozen=True)
class ApgConfig:
    beta: float = -0.5
    r: float = 7.5
    eta_parallel: float = 0.0


@dataclass
class ComposeState:
    """Per-trajectory mutable state for composed guidance (APG momentum)."""

    apg: ApgMomentum = field(default_factory=ApgMomentum)


# ---------------------------------------------------------------- config

MODES = ("none", "cfg", "emag", "emag_i", "autoguidance", "pag", "seg", "sag", "s2")


@dataclass(frozen=True)
class GuidanceConfig:
    """Everything that decides how branch predictions are formed and combined.

    ``w_pert`` is the scale of the perturbation term for the PAG / SEG / SAG
    and autoguidance baselines; ``w_e`` is the EMAG scale.
    """

    mode: str = "cfg"
    w_cfg: float = 3.0
    w_e: float = 1.75
    w_pert: float = 1.0
    window: GuidanceWindow | None = None  # None -> tail window of the schedule
    lam: float = 1.0
    beta: float = 0.988
    layer_range: tuple[int, int] = (1, 2)
    s2_scale: float = 0.25
    s2_drop_prob: float = 0.1
    sag_layer: int | None = None
    sag_threshold: float = 1.0
    sag_kernel: int = 9
    sag_sigma: float = 1.0
    apg: ApgConfig | None = None
    cads: CadsConfig | None = None

    def __post_init__(self):
        if self.mode == "erg":
            raise GuidanceConfigError("ERG is not supported: its mechanism is not specified")
        if self.mode not in MODES:
            raise GuidanceConfigError(f"unknown guidance mode {self.mode!r}; expected one of {MODES}")
        if self.w_cfg < 0 or self.w_e < 0:
            raise GuidanceConfigError("guidance scales must be non-negative")
        if not 0.0 <= self.lam <= 1.0:
            raise GuidanceConfigError(f"lam must lie in [0, 1], got {self.lam}")
        if not 0.0 < self.beta < 1.0:
            raise GuidanceConfigError(f"beta must lie in (0, 1), got {self.beta}")
        lo, hi = self.layer_range
        if lo > hi or lo < 0:
            raise GuidanceConfigError(f"invalid layer range {self.layer_range}")
        if not 0.0 <= self.s2_drop_prob <= 1.0:
            raise GuidanceConfigError("s2_drop_prob must lie in [0, 1]")

    @property
    def is_emag(self) -> bool:
        return self.mode in ("emag", "emag_i")

    def resolved_window(self, t_max: int) -> GuidanceWindow:
        return self.window if self.window is not None else GuidanceWindow.tail(t_max)

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items()}
        d["layer_range"] = list(self.layer_range)
        d["window"] = None if self.window is None else dict(self.window.__dict__)
        d["apg"] = None if self.apg is None else dict(self.apg.__dict__)
        d["cads"] = None if self.cads is None else dict(self.cads.__dict__)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GuidanceConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise GuidanceConfigError(f"unknown guidance key(s): {sorted(unknown)}")
        kw = dict(d)
        if kw.get("window") is not None:
            w = kw["window"]
            extra = set(w) - {"tau_s", "tau_e", "warmup"}
            if extra:
                raise GuidanceConfigError(f"unknown window key(s): {sorted(extra)}")
            kw["window"] = GuidanceWindow(**w)
        if "layer_range" in kw:
            kw["layer_range"] = tuple(kw["layer_range"])
        for name, typ in (("apg", ApgConfig), ("cads", CadsConfig)):
            if kw.get(name) is not None:
                sub = kw[name]
                extra = set(sub) - set(typ.__dataclass_fields__)
                if extra:
                    raise GuidanceConfigError(f"unknown {name} key(s): {sorted(extra)}")
                kw[name] = typ(**sub)
        return cls(**kw)
