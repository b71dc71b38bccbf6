import numpy as np
import pytest

from emag_lab import combinators as cb
from emag_lab.attention_guidance import GuidanceWindow
from emag_lab.diffusion import FLOW, VP, NoiseSchedule, ScheduleError
from emag_lab.model import ModelConfig, init_params
from emag_lab.sampler import DivergenceError, run_sampler

VP50 = NoiseSchedule(VP, 50)
LABELS = np.array([0, 1, 1])


def G(**kw):
    return cb.GuidanceConfig(**kw)


@pytest.fixture(scope="module")
def flow_model():
    return init_params(ModelConfig(mode="velocity"), seed=11)


def test_single_step_unguided(random_model):
    s = NoiseSchedule(VP, 1, table=(1.0, 0.02))
    tr = run_sampler(random_model, G(mode="none"), s, 0, n=2)
    assert len(tr.steps) == 1 and tr.n_model_calls == 1
    assert tr.final.shape == (2, 8, 8)


def test_determinism(random_model):
    a = run_sampler(random_model, G(mode="emag"), VP50, 5, labels=LABELS)
    b = run_sampler(random_model, G(mode="emag"), VP50, 5, labels=LABELS)
    assert np.array_equal(a.final, b.final)
    for x, y in zip(a.steps, b.steps):
        assert np.array_equal(x.combined, y.combined)
    c = run_sampler(random_model, G(mode="emag"), VP50, 6, labels=LABELS)
    assert not np.array_equal(a.final, c.final)


@pytest.mark.parametrize("kw", [dict(lam=0.0), dict(w_e=1.0), dict(window=GuidanceWindow(20, 20))])
def test_emag_reductions_to_cfg(random_model, kw):
    cfg = run_sampler(random_model, G(mode="cfg"), VP50, 1, labels=LABELS)
    for mode in ("emag", "emag_i"):
        em = run_sampler(random_model, G(mode=mode, **kw), VP50, 1, labels=LABELS)
        assert np.array_equal(em.final, cfg.final)


def test_unconditional_reduction(random_model):
    base = run_sampler(random_model, G(mode="none"), VP50, 2, n=2)
    em = run_sampler(random_model, G(mode="emag", w_e=1.0), VP50, 2, n=2)
    assert np.array_equal(em.final, base.final)


def test_window_and_warmup_accounting(random_model):
    w = GuidanceWindow(40, 10, warmup=4)
    tr = run_sampler(random_model, G(mode="emag", window=w), VP50, 0, labels=LABELS)
    in_win = [s.t for s in tr.steps if s.in_window]
    active = [s.t for s in tr.steps if s.emag_active]
    assert in_win == list(range(40, 10, -1))
    assert active == list(range(36, 10, -1))
    for s in tr.steps:
        assert (s.preds.eps_cond_perturbed is not None) == s.emag_active
        assert (s.selection is not None) == s.in_window
    # 2 calls per step, plus one perturbed call per active step
    assert tr.n_model_calls == 2 * 50 + len(active)


def test_alg2_offline_recomputation(random_model):
    g = G(mode="emag", w_e=1.75, w_cfg=3.0)
    tr = run_sampler(random_model, g, VP50, 3, labels=LABELS)
    assert any(s.emag_active for s in tr.steps)
    for s in tr.steps:
        u, c = s.preds.eps_uncond, s.preds.eps_cond
        if s.emag_active:
            cp = s.preds.eps_cond_perturbed
            guided = cp + g.w_e * (c - cp)
            want = u + g.w_cfg * (guided - u)
        else:
            want = u + g.w_cfg * (c - u)
        assert np.max(np.abs(s.combined - want)) <= 1e-12


def test_unconditional_alg1_recomputation(random_model):
    g = G(mode="emag", w_e=5.125)
    tr = run_sampler(random_model, g, VP50, 3, n=2)
    for s in tr.steps:
        if s.emag_active:
            e, p = s.preds.eps_uncond, s.preds.eps_uncond_perturbed
            assert np.max(np.abs(s.combined - (p + g.w_e * (e - p)))) <= 1e-12
        else:
            assert np.array_equal(s.combined, s.preds.eps_uncond)


def test_selection_is_argmax_of_logged_deltas(random_model):
    tr = run_sampler(random_model, G(mode="emag", layer_range=(0, 3)), VP50, 4, labels=LABELS)
    for s in tr.steps:
        if s.selection is not None:
            best = max(s.selection.deltas.values())
            assert s.selection.deltas[s.selection.chosen] == best
            assert all(s.selection.deltas[k] < best for k in range(s.selection.chosen))


def test_flow_schedule_sampling(flow_model):
    s = NoiseSchedule(FLOW, 26)
    tr = run_sampler(flow_model, G(mode="emag"), s, 0, labels=LABELS)
    assert len(tr.steps) == 26
    assert [st.t for st in tr.steps if st.in_window][-1] == 6
    assert np.all(np.isfinite(tr.final))


def test_schedule_mismatch_rejected(random_model, flow_model):
    with pytest.raises(ScheduleError):
        run_sampler(random_model, G(mode="none"), NoiseSchedule(FLOW, 26), 0, n=1)
    with pytest.raises(ScheduleError):
        run_sampler(random_model, G(mode="none"), NoiseSchedule(VP, 20), 0, n=1)


def test_config_errors(random_model):
    with pytest.raises(cb.GuidanceConfigError):
        run_sampler(random_model, G(mode="cfg"), VP50, 0, n=1)
    with pytest.raises(cb.GuidanceConfigError):
        run_sampler(random_model, G(mode="autoguidance"), VP50, 0, labels=LABELS)
    with pytest.raises(cb.GuidanceConfigError):
        run_sampler(random_model, G(mode="emag", layer_range=(1, 4)), VP50, 0, labels=LABELS)


@pytest.mark.parametrize("mode", ["pag", "seg", "sag", "s2"])
@pytest.mark.parametrize("conditional", [True, False])
def test_baseline_modes_run(random_model, mode, conditional):
    kw = dict(labels=LABELS) if conditional else dict(n=2)
    tr = run_sampler(random_model, G(mode=mode, w_pert=1.5), VP50, 0, **kw)
    assert np.all(np.isfinite(tr.final))
    again = run_sampler(random_model, G(mode=mode, w_pert=1.5), VP50, 0, **kw)
    assert np.array_equal(tr.final, again.final)


def test_pag_conditional_formula(random_model):
    tr = run_sampler(random_model, G(mode="pag", w_pert=2.0, w_cfg=3.0), VP50, 0, labels=LABELS)
    s = tr.steps[0]
    u, c, cp = s.preds.eps_uncond, s.preds.eps_cond, s.preds.eps_cond_perturbed
    assert np.allclose(s.combined, u + 3.0 * (c - u) + 2.0 * (c - cp), atol=1e-12)


def test_s2_drop_nothing_equals_cfg_minus_scaled_cond(random_model):
    tr = run_sampler(random_model, G(mode="s2", s2_drop_prob=0.0, s2_scale=0.25), VP50, 0,
                     labels=LABELS)
    for s in tr.steps:
        assert s.dropped_layers == ()
        assert np.array_equal(s.preds.eps_cond_perturbed, s.preds.eps_cond)
        want = cb.cfg_combine(s.preds.eps_uncond, s.preds.eps_cond, 3.0) - 0.25 * s.preds.eps_cond
        assert np.array_equal(s.combined, want)


def test_autoguidance(random_model):
    weak = init_params(random_model.config, seed=99)
    tr = run_sampler(random_model, G(mode="autoguidance", w_pert=2.0), VP50, 0, labels=LABELS,
                     weak_params=weak)
    s = tr.steps[0]
    w, m = s.preds.eps_cond_perturbed, s.preds.eps_cond
    assert np.allclose(s.combined, w + 2.0 * (m - w), atol=1e-12)
    same = run_sampler(random_model, G(mode="autoguidance", w_pert=3.0), VP50, 0, labels=LABELS,
                       weak_params=random_model)
    plain = run_sampler(random_model, G(mode="none"), VP50, 0, labels=LABELS)
    assert np.array_equal(same.final, plain.final)


def test_apg_and_cads_compose_with_emag(random_model):
    g = G(mode="emag", apg=cb.ApgConfig(), cads=cb.CadsConfig())
    a = run_sampler(random_model, g, VP50, 0, labels=LABELS)
    b = run_sampler(random_model, g, VP50, 0, labels=LABELS)
    assert np.array_equal(a.final, b.final) and np.all(np.isfinite(a.final))
    plain = run_sampler(random_model, G(mode="emag"), VP50, 0, labels=LABELS)
    assert not np.array_equal(a.final, plain.final)


def test_joint_model_emag_i(joint_model):
    a = run_sampler(joint_model, G(mode="emag"), VP50, 0, labels=LABELS)
    b = run_sampler(joint_model, G(mode="emag_i"), VP50, 0, labels=LABELS)
    assert np.all(np.isfinite(a.final)) and np.all(np.isfinite(b.final))
    assert not np.array_equal(a.final, b.final)


def test_divergence_reports_step(random_model):
    with pytest.raises(DivergenceError) as err:
        run_sampler(random_model, G(mode="cfg", w_cfg=1e308), VP50, 0, labels=LABELS)
    assert err.value.step == 50


def test_entropy_recorded_per_layer(random_model):
    tr = run_sampler(random_model, G(mode="none"), VP50, 0, n=1)
    assert all(set(s.entropy) == {0, 1, 2, 3} for s in tr.steps)
    assert all(0 <= v <= np.log(16) + 1e-12 for s in tr.steps for v in s.entropy.values())
