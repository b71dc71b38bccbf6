"""Guided reverse-time sampling with per-step branch logging."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import attention_guidance as ag
from . import combinators as cb
from .diffusion import FLOW, VP, NoiseSchedule, ScheduleError, integrate
from .metrics import attention_entropy
from .model import GRID, IMG, N_IMG_TOKENS, PATCH, AttentionHookBus, ToyModelParams, forward

log = logging.getLogger(__name__)

STREAM_INIT, STREAM_S2, STREAM_CADS = 0, 1, 2


class DivergenceError(FloatingPointError):
    def __init__(self, step: int, what: str = "latent"):
        super().__init__(f"non-finite {what} at sampler step {step}")
        self.step = step


def stream(seed: int, which: int) -> np.random.Generator:
    """Counter-based generator for one named random stream of a trajectory."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, which])))


@dataclass
class TrajectoryStep:
    t: int
    time: float
    x: np.ndarray
    preds: cb.BranchPredictions
    combined: np.ndarray
    emag_active: bool = False
    in_window: bool = False
    selection: ag.LayerSelection | None = None
    entropy: dict[int, float] = field(default_factory=dict)
    dropped_layers: tuple[int, ...] = ()


@dataclass
class SamplerTrajectory:
    schedule: NoiseSchedule
    guidance: cb.GuidanceConfig
    seed: int
    labels: np.ndarray | None
    steps: list[TrajectoryStep] = field(default_factory=list)
    final: np.ndarray | None = None
    n_model_calls: int = 0

    @property
    def selected_layers(self) -> list[int | None]:
        return [s.selection.chosen if s.selection else None for s in self.steps]


def _check_schedule(params: ToyModelParams, schedule: NoiseSchedule) -> None:
    cfg = params.config
    want = VP if cfg.mode == "eps" else FLOW
    if schedule.kind != want:
        raise ScheduleError(f"a {cfg.mode}-mode model needs a {want} schedule, got {schedule.kind}")
    if schedule.kind == VP and schedule.table is None and schedule.T != cfg.T:
        raise ScheduleError(f"vp sampling uses the training discretization T={cfg.T}, got {schedule.T}")


def run_sampler(
    params: ToyModelParams,
    guidance: cb.GuidanceConfig,
    schedule: NoiseSchedule,
    seed: int,
    *,
    labels=None,
    n: int = 1,
    weak_params: ToyModelParams | None = None,
) -> SamplerTrajectory:
    """Integrate from pure noise to data, combining branches per ``guidance``.

    ``labels`` selects class-conditional sampling (one label per sample);
    ``None`` samples ``n`` images unconditionally. All randomness comes from
    counter-based streams keyed by ``seed``; guidance branches never draw.
    """
    _check_schedule(params, schedule)
    cfg = params.config
    g = guidance
    conditional = labels is not None
    if conditional:
        labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        n = len(labels)
    elif g.mode in ("cfg",):
        raise cb.GuidanceConfigError("cfg needs class labels")
    if g.mode == "autoguidance" and weak_params is None:
        raise cb.GuidanceConfigError("autoguidance needs weak_params")
    lo, hi = g.layer_range
    if hi >= cfg.n_layers:
        raise cb.GuidanceConfigError(f"layer range {g.layer_range} exceeds {cfg.n_layers} layers")
    window = g.resolved_window(schedule.T)
    if g.is_emag:
        window.validate(schedule.T)
    part_mode = ag.EMAG_I if g.mode == "emag_i" else ag.EMAG
    main_label = labels if conditional else None
    branch = "cond" if conditional else "uncond"
    sag_layer = g.sag_layer if g.sag_layer is not None else (lo + hi) // 2

    x = stream(seed, STREAM_INIT).standard_normal((n, IMG, IMG))
    s2_rng = stream(seed, STREAM_S2)
    cads_rng = stream(seed, STREAM_CADS)
    ema = ag.EmaState(beta=g.beta)
    compose = cb.ComposeState()
    traj = SamplerTrajectory(schedule, g, seed, labels)
    in_window = 0

    def second_stage(eps_u, eps_c):
        if g.apg is not None:
            return cb.apg_combine(eps_u, eps_c, g.w_cfg, g.apg.beta, g.apg.r, compose.apg,
                                  g.apg.eta_parallel)
        return cb.cfg_combine(eps_u, eps_c, g.w_cfg)

    for t in range(schedule.T, 0, -1):
        tm = schedule.model_time(t)
        cads_fn = None
        if g.cads is not None and conditional:
            c = g.cads
            noise = {}

            def cads_fn(emb, _t=t, _noise=noise):
                key = emb.shape
                if key not in _noise:
                    _noise[key] = cads_rng.standard_normal(key)
                return cb.cads_anneal(emb, _t / schedule.T, c.tau1, c.tau2, c.s, c.psi, _noise[key])

            # draw both conditioning noises up front so the stream advances identically each step
            cads_fn(np.zeros((n, cfg.d_model)))
            if cfg.joint:
                cads_fn(np.zeros((n, cfg.n_txt * cfg.d_model)))

        def call(lab, hooks=None, x_in=None, model=params, **kw):
            traj.n_model_calls += 1
            ct = cads_fn if lab is not None else None
            return forward(model, x if x_in is None else x_in, tm, lab, hooks, cond_transform=ct, **kw)

        captured: dict[int, np.ndarray] = {}
        observer = AttentionHookBus()
        for layer in range(cfg.n_layers):
            observer.register(layer, lambda layer, a: captured.__setitem__(layer, a))

        step = TrajectoryStep(t=t, time=float(schedule.model_time(t)), x=x, preds=None, combined=None)
        preds = cb.BranchPredictions()

        # ---- clean branches
        if g.mode == "autoguidance":
            preds_main = call(main_label, observer)
            weak = call(main_label, model=weak_params)
            if conditional:
                preds.eps_cond, preds.eps_cond_perturbed = preds_main, weak
            else:
                preds.eps_uncond, preds.eps_uncond_perturbed = preds_main, weak
            combined = cb.autoguidance_combine(weak, preds_main, g.w_pert)
        else:
            if conditional:
                if g.mode != "none":
                    sag_bus = AttentionHookBus()
                    if g.mode == "sag":
                        sag_bus.register(sag_layer, lambda layer, a: captured.__setitem__(-1, a))
                    preds.eps_uncond = call(None, sag_bus)
                preds.eps_cond = call(labels, observer)
                eps_main = preds.eps_cond
                base = preds.eps_cond if g.mode == "none" else second_stage(preds.eps_uncond, preds.eps_cond)
            else:
                preds.eps_uncond = call(None, observer)
                eps_main = preds.eps_uncond
                base = preds.eps_uncond
            combined = base

            if g.is_emag and window.contains(t):
                in_window += 1
                step.in_window = True
                deltas = {}
                for layer in range(lo, hi + 1):
                    region = ag.perturbed_region(captured[layer], part_mode, N_IMG_TOKENS)
                    e = ag.ema_update(ema, layer, branch, region)
                    deltas[layer] = ag.layer_delta(e, region)
                chosen = ag.select_layer(deltas, g.layer_range)
                step.selection = ag.LayerSelection(g.layer_range, deltas, chosen)
                if in_window > window.warmup:
                    e_sel = ema.get(chosen, branch)

                    def emag_hook(layer, a, _e=e_sel):
                        return ag.emag_partition_apply(
                            a, part_mode, lambda blk: ag.blend_replace(blk, _e, g.lam), N_IMG_TOKENS)

                    eps_p = call(main_label, AttentionHookBus().register(chosen, emag_hook))
                    step.emag_active = True
                    if conditional:
                        preds.eps_cond_perturbed = eps_p
                        if g.apg is None:
                            combined = cb.emag_conditional(preds, g.w_e, g.w_cfg)
                        else:
                            combined = second_stage(preds.eps_uncond,
                                                    cb.emag_guided_branch(preds.eps_cond, eps_p, g.w_e))
                    else:
                        preds.eps_uncond_perturbed = eps_p
                        combined = cb.emag_unconditional(preds.eps_uncond, eps_p, g.w_e)
            elif g.mode == "pag":
                bus = AttentionHookBus()
                for layer in range(lo, hi + 1):
                    bus.register(layer, lambda layer, a: ag.pag_identity(a, N_IMG_TOKENS))
                eps_p = call(main_label, bus)
                if conditional:
                    preds.eps_cond_perturbed = eps_p
                    combined = base + g.w_pert * (eps_main - eps_p)
                else:
                    preds.eps_uncond_perturbed = eps_p
                    combined = cb.pag_combine(eps_main, eps_p, g.w_pert)
            elif g.mode == "seg":
                bus = AttentionHookBus()
                for layer in range(lo, hi + 1):
                    bus.register_query(layer, lambda layer, q: ag.seg_query_mean(q, N_IMG_TOKENS))
                eps_p = call(None, bus)
                preds.eps_uncond_perturbed = eps_p
                if conditional:
                    combined = base + g.w_pert * (preds.eps_uncond - eps_p)
                else:
                    combined = cb.autoguidance_combine(eps_p, preds.eps_uncond, g.w_pert)
            elif g.mode == "sag":
                attn = captured[-1] if conditional else captured[sag_layer]
                mask = ag.sag_mask(attn, GRID, PATCH, g.sag_threshold, N_IMG_TOKENS)
                x_deg = ag.sag_degrade(x, mask, g.sag_kernel, g.sag_sigma)
                eps_p = call(None, x_in=x_deg)
                preds.eps_uncond_perturbed = eps_p
                if conditional:
                    combined = base + g.w_pert * (preds.eps_uncond - eps_p)
                else:
                    combined = cb.pag_combine(preds.eps_uncond, eps_p, g.w_pert)
            elif g.mode == "s2":
                drop = tuple(int(i) for i in np.flatnonzero(s2_rng.random(cfg.n_layers) < g.s2_drop_prob))
                step.dropped_layers = drop
                eps_p = call(main_label, skip_layers=drop)
                if conditional:
                    preds.eps_cond_perturbed = eps_p
                else:
                    preds.eps_uncond_perturbed = eps_p
                combined = cb.s2_combine(base, eps_p, g.s2_scale)

        step.entropy = {layer: attention_entropy(a[..., :N_IMG_TOKENS, :])
                        for layer, a in captured.items() if layer >= 0}
        step.preds = cb.BranchPredictions(**preds.present())
        step.combined = combined
        traj.steps.append(step)
        if not np.all(np.isfinite(combined)):
            raise DivergenceError(t, "prediction")
        with np.errstate(over="ignore", invalid="ignore"):
            x = integrate(x, combined, t, schedule)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(t)

    traj.final = x
    return traj
