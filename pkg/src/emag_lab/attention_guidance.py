"""Attention-space perturbations: EMA accumulation, adaptive layer choice,
convex blending, the EMAG / EMAG-I partitions, and the PAG / SEG / SAG
baseline perturbations.

All attention tensors are ``(batch, heads, queries, keys)`` with rows
summing to one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

ROW_TOL = 1e-9
NEG_TOL = 1e-12

EMAG = "emag"
EMAG_I = "emag_i"


class EmaStateError(RuntimeError):
    """The attention shape changed under a live EMA buffer."""


class WindowError(ValueError):
    pass


# ---------------------------------------------------------------- EMA

def beta_from_halflife(halflife: float) -> float:
    """Decay whose gap to a constant input halves every ``halflife`` steps."""
    if not halflife > 0:
        raise ValueError(f"halflife must be positive, got {halflife}")
    return math.exp(-math.log(2.0) / halflife)


@dataclass
class EmaState:
    """Running EMA buffers keyed by ``(layer, branch)``.

    The first update of a key stores the tensor as-is; later updates apply
    ``E <- beta * E + (1 - beta) * A``. One instance belongs to one trajectory.
    """

    beta: float = 0.988
    buffers: dict[tuple[int, str], np.ndarray] = field(default_factory=dict)
    counts: dict[tuple[int, str], int] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")

    def get(self, layer: int, branch: str) -> np.ndarray | None:
        return self.buffers.get((layer, branch))

    def step_count(self, layer: int, branch: str) -> int:
        return self.counts.get((layer, branch), 0)

    def reset(self) -> None:
        self.buffers.clear()
        self.counts.clear()


def ema_update(state: EmaState, layer: int, branch: str, attn: np.ndarray) -> np.ndarray:
    """Fold ``attn`` into the ``(layer, branch)`` buffer and return the new EMA."""
    key = (layer, branch)
    prev = state.buffers.get(key)
    if prev is None:
        new = np.array(attn, dtype=np.float64, copy=True)
    else:
        if prev.shape != attn.shape:
            raise EmaStateError(
                f"attention shape changed for layer {layer}/{branch}: {prev.shape} -> {attn.shape}; "
                "reset the EMA state between trajectories")
        new = state.beta * prev + (1.0 - state.beta) * attn
    state.buffers[key] = new
    state.counts[key] = state.counts.get(key, 0) + 1
    return new


# ---------------------------------------------------------------- layer choice

def layer_delta(ema: np.ndarray, attn: np.ndarray) -> float:
    """Mean absolute difference over every entry of the attention tensor."""
    if ema.shape != attn.shape:
        raise ValueError(f"shape mismatch: {ema.shape} vs {attn.shape}")
    return float(np.mean(np.abs(ema - attn)))


def select_layer(deltas: Mapping[int, float], layer_range: tuple[int, int]) -> int:
    """Argmax of ``deltas`` over ``l_min..l_max`` inclusive; ties go to the lowest layer."""
    lo, hi = layer_range
    candidates = range(lo, hi + 1)
    if lo > hi:
        raise ValueError(f"empty layer range {layer_range}")
    best, best_val = None, -math.inf
    for layer in candidates:
        if layer not in deltas:
            raise KeyError(f"no delta for candidate layer {layer}")
        if deltas[layer] > best_val:
            best, best_val = layer, deltas[layer]
    return best


@dataclass
class LayerSelection:
    layer_range: tuple[int, int]
    deltas: dict[int, float]
    chosen: int


# ---------------------------------------------------------------- blending

def blend_replace(attn: np.ndarray, ema: np.ndarray, lam: float) -> np.ndarray:
    """``(1 - lam) * attn + lam * ema``; ``lam = 1`` is a hard replace."""
    if attn.shape != ema.shape:
        raise ValueError(f"shape mismatch: {attn.shape} vs {ema.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return (1.0 - lam) * attn + lam * ema


def make_stochastic(attn: np.ndarray) -> np.ndarray:
    """Clamp round-off negatives and renormalize rows that drifted past 1e-9.

    Returns the input object itself when nothing needed fixing.
    """
    if np.any(attn < -NEG_TOL):
        raise ValueError("attention has genuinely negative entries")
    out = attn
    if np.any(out < 0):
        out = np.maximum(out, 0.0)
    sums = out.sum(axis=-1, keepdims=True)
    bad = np.abs(sums - 1.0) > ROW_TOL
    if np.any(bad):
        out = np.where(bad, out / sums, out)
    return out


# ---------------------------------------------------------------- partition

def perturbed_region(attn: np.ndarray, mode: str, n_img: int) -> np.ndarray:
    """The block a mode perturbs: image-query rows, and image-key columns for EMAG-I."""
    if n_img > attn.shape[-2] or n_img > attn.shape[-1]:
        raise ValueError(f"partition {n_img} exceeds attention {attn.shape}")
    if mode == EMAG_I:
        return attn[..., :n_img, :n_img]
    if mode == EMAG:
        return attn[..., :n_img, :]
    raise ValueError(f"unknown partition mode {mode!r}")


def emag_partition_apply(attn: np.ndarray, mode: str, op: Callable[[np.ndarray], np.ndarray],
                         n_img: int) -> np.ndarray:
    """Apply ``op`` to the mode's block of the joint attention and reassemble.

    EMAG rewrites whole image-query rows; EMAG-I only the image->image block,
    rescaled to its original row mass so the image->text columns survive
    bit-for-bit. Text-query rows are never touched.
    """
    if mode == EMAG_I and n_img == attn.shape[-1]:
        mode = EMAG  # no text keys: the image block is the whole row
    block = perturbed_region(attn, mode, n_img)
    new_block = op(block)
    if new_block.shape != block.shape:
        raise ValueError(f"op changed block shape {block.shape} -> {new_block.shape}")
    if new_block is block:
        return attn
    if mode == EMAG_I:
        old_mass = block.sum(axis=-1, keepdims=True)
        new_mass = new_block.sum(axis=-1, keepdims=True)
        if not np.array_equal(old_mass, new_mass):
            new_block = new_block * np.divide(old_mass, new_mass,
                                              out=np.zeros_like(old_mass), where=new_mass > 0)
    out = attn.copy()
    if mode == EMAG_I:
        out[..., :n_img, :n_img] = new_block
    else:
        out[..., :n_img, :] = new_block
    return make_stochastic(out)


# ---------------------------------------------------------------- window

@dataclass(frozen=True)
class GuidanceWindow:
    """Steps ``t`` with ``tau_e < t <= tau_s`` are inside the window.

    The first ``warmup`` in-window steps accumulate the EMA without
    replacing attention. ``tau_s <= tau_e`` describes an empty window.
    """

    tau_s: int
    tau_e: int
    warmup: int = 0

    def contains(self, t: int) -> bool:
        return self.tau_e < t <= self.tau_s

    @property
    def empty(self) -> bool:
        return self.tau_s <= self.tau_e

    def validate(self, t_max: int, t0: int = 0) -> None:
        if self.empty:
            return
        if not t0 < self.tau_e < self.tau_s <= t_max:
            raise WindowError(
                f"window must satisfy t0 < tau_e < tau_s <= t_max, got "
                f"t0={t0}, tau_e={self.tau_e}, tau_s={self.tau_s}, t_max={t_max}")
        if self.warmup < 0:
            raise WindowError("warmup must be non-negative")

    @classmethod
    def tail(cls, t_max: int) -> "GuidanceWindow":
        """Default tail window: tau_s = t_max, tau_e = warmup = floor(0.2 t_max)."""
        tau_e = int(math.floor(0.2 * t_max))
        return cls(tau_s=t_max, tau_e=tau_e, warmup=tau_e)


# ---------------------------------------------------------------- baselines

def pag_identity(attn: np.ndarray, n_img: int | None = None) -> np.ndarray:
    """Replace the image->image attention with the identity (one-hot self)."""
    q, k = attn.shape[-2:]
    n = q if n_img is None else n_img
    if n_img is None and q != k:
        raise ValueError(f"identity attention needs a square map, got {q}x{k}")
    out = attn.copy()
    out[..., :n, :] = 0.0
    idx = np.arange(n)
    out[..., idx, idx] = 1.0
    return out


def seg_query_mean(q: np.ndarray, n_img: int | None = None) -> np.ndarray:
    """Replace each image query with the per-head, per-channel mean over image queries."""
    n = q.shape[-2] if n_img is None else n_img
    out = q.copy()
    out[..., :n, :] = q[..., :n, :].mean(axis=-2, keepdims=True)
    return out


def gaussian_kernel1d(size: int = 9, sigma: float = 1.0) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, size: int = 9, sigma: float = 1.0) -> np.ndarray:
    """Separable blur over the last two axes with reflect padding."""
    k = gaussian_kernel1d(size, sigma)
    pad = size // 2
    out = img
    for axis in (-1, -2):
        widths = [(0, 0)] * out.ndim
        widths[axis] = (pad, pad)
        p = np.pad(out, widths, mode="reflect")
        n = out.shape[axis]
        acc = np.zeros_like(out)
        for j, w in enumerate(k):
            acc = acc + w * np.take(p, np.arange(j, j + n), axis=axis)
        out = acc
    return out


def sag_mask(attn: np.ndarray, grid: int, patch: int, threshold: float = 1.0,
             n_img: int | None = None) -> np.ndarray:
    """Boolean latent-resolution mask of image tokens attended above ``threshold``.

    Head-averaged attention is summed over queries (how much each key is
    looked at), thresholded, then upsampled to pixels by nearest neighbour.
    """
    n = grid * grid if n_img is None else n_img
    block = attn[..., :n, :n]
    received = block.mean(axis=1).sum(axis=1)              # (B, keys)
    mask = (received > threshold).reshape(-1, grid, grid)
    return np.repeat(np.repeat(mask, patch, axis=1), patch, axis=2)


def sag_degrade(x: np.ndarray, mask: np.ndarray, size: int = 9, sigma: float = 1.0) -> np.ndarray:
    """Blur ``x`` inside ``mask``; outside the mask ``x`` is returned unchanged."""
    if not mask.any():
        return x
    return np.where(mask, gaussian_blur(x, size, sigma), x)


def baseline_perturb(operand: np.ndarray, kind: str, **kw) -> np.ndarray:
    """Dispatch to the PAG / SEG / SAG perturbation of ``operand``.

    ``PAG`` takes an attention map, ``SEG`` a query tensor, and ``SAG`` an
    attention map plus ``latent=``; SAG returns the degraded latent.
    """
    kind = kind.upper()
    if kind == "PAG":
        return pag_identity(operand, kw.get("n_img"))
    if kind == "SEG":
        return seg_query_mean(operand, kw.get("n_img"))
    if kind in ("SAG", "SAG-MASK"):
        latent = kw["latent"]
        grid, patch = kw.get("grid", 4), kw.get("patch", 2)
        mask = sag_mask(operand, grid, patch, kw.get("threshold", 1.0), kw.get("n_img"))
        return sag_degrade(latent, mask, kw.get("kernel", 9), kw.get("sigma", 1.0))
    raise ValueError(f"unknown perturbation kind {kind!r}")
