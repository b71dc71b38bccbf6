"""The twelve acceptance criteria, each at its stated tolerance.

Every test records a one-line verdict that the terminal summary prints
(``[PASS] #n ...``) and then asserts it, so a failure is both visible in the
summary and fails the run.
"""
import json
import math
import time
from pathlib import Path

import numpy as np

from conftest import ACCEPTANCE
from emag_lab import attention_guidance as ag
from emag_lab import cli
from emag_lab import combinators as cb
from emag_lab import metrics as mt
from emag_lab.attention_guidance import GuidanceWindow
from emag_lab.diffusion import VP, NoiseSchedule
from emag_lab.model import toy_shapes
from emag_lab.sampler import run_sampler
from emag_lab.tensor_kernel import load_csv

VP50 = NoiseSchedule(VP, 50)


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"[{'PASS' if ok else 'FAIL'}] #{n} {detail}")
    assert ok, detail


# ---------------------------------------------------------------- 1

def test_01_ema_oracle_equivalence():
    start = time.perf_counter()
    r = np.random.default_rng(101)
    beta = 0.988
    seq = r.random((100, 2, 2, 16, 16))
    seq /= seq.sum(-1, keepdims=True)
    s = ag.EmaState(beta=beta)
    worst = 0.0
    for t in range(1, 101):
        e = ag.ema_update(s, 1, "cond", seq[t - 1])
        w = (1 - beta) * beta ** (t - np.arange(2, t + 1))
        closed = beta ** (t - 1) * seq[0] + np.tensordot(w, seq[1:t], axes=1)
        worst = max(worst, float(np.max(np.abs(e - closed))))
    elapsed = time.perf_counter() - start
    record(1, worst <= 1e-10 and elapsed < 1.0,
           f"EMA vs closed form: max err {worst:.2e} (tol 1e-10), {elapsed:.3f}s (< 1s)")


# ---------------------------------------------------------------- 2

def test_02_halflife_law():
    ratios = {}
    for H in (1, 10, 50):
        s = ag.EmaState(beta=ag.beta_from_halflife(H))
        target = np.array([0.25])
        ag.ema_update(s, 0, "c", np.array([1.0]))
        gap0 = 1.0 - 0.25
        for _ in range(H):
            e = ag.ema_update(s, 0, "c", target)
        ratios[H] = float((e[0] - 0.25) / gap0)
    ok = all(abs(v - 0.5) <= 1e-9 for v in ratios.values())
    record(2, ok, "halflife gap ratios " + ", ".join(f"H={h}: {v:.12f}" for h, v in ratios.items()))


# ---------------------------------------------------------------- 3

def test_03_reduction_identities(trained_model):
    labels = np.array([0, 1, 0, 1])
    variants = {"lam=0": dict(lam=0.0), "w_e=1": dict(w_e=1.0),
                "empty window": dict(window=GuidanceWindow(25, 25))}
    failures = []
    for seed in range(4):
        base = run_sampler(trained_model, cb.GuidanceConfig(mode="cfg"), VP50, seed, labels=labels)
        for name, kw in variants.items():
            em = run_sampler(trained_model, cb.GuidanceConfig(mode="emag", **kw), VP50, seed,
                             labels=labels)
            same = np.array_equal(em.final, base.final) and all(
                np.array_equal(a.combined, b.combined) and np.array_equal(a.x, b.x)
                for a, b in zip(em.steps, base.steps))
            if not same:
                failures.append(f"{name}/seed{seed}")
    record(3, not failures,
           "EMAG == CFG bitwise for lam=0, w_e=1, empty window over 4 seeds"
           + (f"; mismatches: {failures}" if failures else ""))


# ---------------------------------------------------------------- 4

def test_04_layer_selection_brute_force():
    r = np.random.default_rng(104)
    bad = 0
    ties = 0
    for i in range(1000):
        n = int(r.integers(1, 9))
        lo = int(r.integers(0, n))
        hi = int(r.integers(lo, n))
        if i % 3 == 0:
            vals = r.choice([0.0, 0.1, 0.2], size=n)    # many exact ties
        else:
            vals = r.random(n)
        deltas = {k: float(v) for k, v in enumerate(vals)}
        cand = list(range(lo, hi + 1))
        best = max(deltas[k] for k in cand)
        brute = min(k for k in cand if deltas[k] == best)
        ties += sum(deltas[k] == best for k in cand) > 1
        bad += ag.select_layer(deltas, (lo, hi)) != brute
    record(4, bad == 0, f"select_layer vs brute force on 1000 maps ({ties} with ties): {bad} mismatches")


# ---------------------------------------------------------------- 5

def test_05_alg2_conformance(trained_checkpoint, tmp_path):
    w_e, w_cfg = 1.75, 3.0
    cfg = {"model": {"mode": "eps", "checkpoint": str(trained_checkpoint)},
           "guidance": {"mode": "emag", "w_e": w_e, "w_cfg": w_cfg},
           "sample": {"n": 4, "seed": 5}}
    run = cli.cmd_sample(cfg, str(tmp_path))
    index = json.loads((run / "trajectory" / "index.json").read_text())["steps"]
    worst, n_active = 0.0, 0
    for step in index:
        f = {k: load_csv(run / "trajectory" / v) for k, v in step["files"].items()}
        u, c = f["eps_uncond"], f["eps_cond"]
        if step["emag_active"]:
            n_active += 1
            cp = f["eps_cond_perturbed"]
            guided = cp + w_e * (c - cp)
            want = u + w_cfg * (guided - u)
        else:
            want = u + w_cfg * (c - u)
        worst = max(worst, float(np.max(np.abs(f["combined"] - want))))
    record(5, worst <= 1e-12 and n_active > 0,
           f"offline two-step recomputation over {len(index)} steps ({n_active} EMAG-active): "
           f"max err {worst:.2e} (tol 1e-12)")


# ---------------------------------------------------------------- 6

def test_06_hopfield():
    r = np.random.default_rng(106)
    worst_rise = -math.inf
    single_ok = True
    zero_err = 0.0
    for _ in range(1000):
        d, N = int(r.integers(1, 9)), int(r.integers(1, 17))
        inst = mt.HopfieldInstance(r.standard_normal((d, N)), r.standard_normal(d),
                                   float(r.uniform(0.1, 5)))
        new = mt.hopfield_update(inst)
        worst_rise = max(worst_rise, mt.hopfield_energy(inst, new) - mt.hopfield_energy(inst))
        x = r.standard_normal((d, 1))
        one = mt.HopfieldInstance(x, r.standard_normal(d), float(r.uniform(0.1, 5)))
        single_ok &= bool(np.array_equal(mt.hopfield_update(one), x[:, 0]))
        zero_err = max(zero_err, abs(mt.hopfield_energy(one, x[:, 0])))
    ok = worst_rise <= 1e-8 and single_ok and zero_err <= 1e-10
    record(6, ok, f"max energy rise {worst_rise:.2e} (tol 1e-8); N=1 one-step retrieval exact: "
                  f"{single_ok}; |E(x1)| max {zero_err:.2e} (tol 1e-10)")


# ---------------------------------------------------------------- 7

def test_07_entropy_trend(trained_model):
    start = time.perf_counter()
    lower = 0
    for seed in range(32):
        tr = run_sampler(trained_model, cb.GuidanceConfig(mode="cfg"), VP50, seed,
                         labels=np.array([seed % 2]))
        ent = np.array([np.mean([s.entropy[k] for k in sorted(s.entropy)]) for s in tr.steps])
        q = len(ent) // 4
        lower += ent[-q:].mean() < ent[:q].mean()
    elapsed = time.perf_counter() - start
    record(7, lower >= 28 and elapsed < 300,
           f"late-quarter entropy below early-quarter on {lower}/32 trajectories (need >= 28), "
           f"{elapsed:.1f}s (< 300s)")


# ---------------------------------------------------------------- 8

def test_08_hardness_monotonicity(trained_model):
    lams = (0.0, 0.25, 0.5, 0.75, 1.0)
    mae = {}
    for lam in lams:
        per_traj = []
        for seed in range(32):
            tr = run_sampler(trained_model, cb.GuidanceConfig(mode="emag", lam=lam), VP50, seed,
                             labels=np.array([seed % 2]))
            per_traj.append(np.mean([np.mean(np.abs(s.preds.eps_cond_perturbed - s.preds.eps_cond))
                                     for s in tr.steps if s.emag_active]))
        mae[lam] = float(np.mean(per_traj))
    vals = [mae[l] for l in lams]
    ok = (all(a <= b for a, b in zip(vals, vals[1:])) and vals[0] == 0.0
          and all(vals[-1] > v for v in vals[:-1]))
    record(8, ok, "perturbed-vs-clean MAE by lambda: "
                  + ", ".join(f"{l}: {mae[l]:.3e}" for l in lams))


# ---------------------------------------------------------------- 9

def _brute_prdc(real, fake, k):
    def dist(a, b):
        return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))

    def radii(s):
        return [sorted(dist(p, q) for q in s)[k] for p in s]

    rr, rf = radii(real), radii(fake)
    return {
        "precision": sum(any(dist(f, real[i]) < rr[i] for i in range(len(real))) for f in fake) / len(fake),
        "recall": sum(any(dist(x, fake[j]) < rf[j] for j in range(len(fake))) for x in real) / len(real),
        "density": sum(sum(dist(f, real[i]) < rr[i] for i in range(len(real))) for f in fake)
        / (k * len(fake)),
        "coverage": sum(min(dist(real[i], f) for f in fake) < rr[i] for i in range(len(real))) / len(real),
    }


def test_09_prdc_and_frechet():
    r = np.random.default_rng(109)
    x = r.standard_normal((100, 5))
    same = mt.prdc(x, x, 5)
    fd_same = mt.frechet_gaussian(x, x)
    ident_ok = same["precision"] == same["recall"] == same["coverage"] == 1.0 and abs(fd_same) <= 1e-8
    brute_ok = True
    for _ in range(20):
        real, fake = r.standard_normal((20, 3)).tolist(), (r.standard_normal((20, 3)) * 1.3).tolist()
        brute_ok &= mt.prdc(np.array(real), np.array(fake), 3) == _brute_prdc(real, fake, 3)
    worst = 0.0
    for _ in range(200):
        m1, m2 = r.normal(size=2) * 3
        s1, s2 = r.uniform(0.05, 4, size=2)
        got = mt.frechet_from_moments([m1], [[s1 * s1]], [m2], [[s2 * s2]])
        worst = max(worst, abs(got - ((m1 - m2) ** 2 + (s1 - s2) ** 2)))
    record(9, ident_ok and brute_ok and worst <= 1e-10,
           f"identical sets P/R/C=1 and FD={fd_same:.1e}: {ident_ok}; PRDC == brute force on 20-pt "
           f"sets: {brute_ok}; 1-D Frechet max err {worst:.2e} (tol 1e-10)")


# ---------------------------------------------------------------- 10

def test_10_guidance_algebra():
    r = np.random.default_rng(110)
    a, b = r.standard_normal(16), r.standard_normal(16)
    pr = cb.BranchPredictions(a, b, r.standard_normal(16))
    exact = [
        np.array_equal(cb.cfg_combine(a, b, 1.0), b),
        np.array_equal(cb.cfg_combine(a, b, 0.0), a),
        cb.cfg_combine(np.array(0.0), np.array(1.0), 7.0) == 7.0,
        np.array_equal(cb.autoguidance_combine(a, b, 1.0), b),
        np.array_equal(cb.autoguidance_combine(a, a, 2.3), a),
        cb.autoguidance_combine(np.array(2.0), np.array(4.0), 1.5) == 5.0,
        np.array_equal(cb.pag_combine(a, b, 0.0), a),
        np.array_equal(cb.pag_combine(a, a, 3.1), a),
        cb.pag_combine(np.array(1.0), np.array(0.5), 2.0) == 2.0,
        np.array_equal(cb.emag_conditional(pr, 1.0, 4.5), cb.cfg_combine(pr.eps_uncond, pr.eps_cond, 4.5)),
        np.array_equal(cb.emag_conditional(pr, 0.0, 4.5),
                       cb.cfg_combine(pr.eps_uncond, pr.eps_cond_perturbed, 4.5)),
        np.array_equal(cb.emag_unconditional(a, b, 1.0), a),
        np.array_equal(cb.emag_unconditional(a, a, 5.125), a),
        np.array_equal(cb.s2_combine(a, b, 0.0), a),
        cb.s2_combine(np.array(7.0), np.array(1.0), 0.25) == 6.75,
    ]
    worst_rec, worst_orth = 0.0, 0.0
    for _ in range(1000):
        d, ref = r.standard_normal((1, 16)), r.standard_normal((1, 16))
        par, orth = cb.apg_project(d, ref)
        worst_rec = max(worst_rec, float(np.max(np.abs(par + orth - d))))
        worst_orth = max(worst_orth, abs(float(np.sum(par * orth))))
    ok = all(exact) and worst_rec <= 1e-10 and worst_orth <= 1e-10
    record(10, ok, f"{sum(exact)}/{len(exact)} reduction examples exact; APG reconstruction "
                   f"{worst_rec:.1e}, orthogonality {worst_orth:.1e} (tol 1e-10)")


# ---------------------------------------------------------------- 11

def test_11_determinism(trained_checkpoint, tmp_path):
    cfg = {"model": {"mode": "eps", "checkpoint": str(trained_checkpoint)},
           "guidance": {"preset": "conditional"}, "sample": {"n": 8, "seed": 3}}
    a = cli.cmd_sample(cfg, str(tmp_path / "a"))
    b = cli.cmd_sample(cfg, str(tmp_path / "b"))
    names = ["samples.csv", "diagnostics.csv", "entropy.csv", "labels.csv"]
    names += sorted(str(p.relative_to(a)) for p in (a / "trajectory").iterdir())
    same = [(a / n).read_bytes() == (b / n).read_bytes() for n in names]
    record(11, all(same) and a.name == b.name,
           f"rerun byte-identical: {sum(same)}/{len(same)} files, run dir {a.name}")


# ---------------------------------------------------------------- 12

def test_12_smoke_quality(trained_model):
    n = 128
    labels = np.arange(n) % 2
    real, _ = toy_shapes(512, seed=12345, classes=np.arange(512) % 2)
    real = real.reshape(512, -1)

    def fd(mode, **kw):
        tr = run_sampler(trained_model, cb.GuidanceConfig(mode=mode, **kw), VP50, 0, labels=labels)
        fake = tr.final.reshape(n, -1)
        return mt.evaluate(real, fake, k=5), tr

    none_rep, _ = fd("none")
    cfg_rep, _ = fd("cfg", w_cfg=3.0)
    emag_rep, tr = fd("emag", w_cfg=3.0, w_e=1.75)
    chosen = [s.selection.chosen for s in tr.steps if s.selection is not None]
    switches = sum(x != y for x, y in zip(chosen, chosen[1:]))
    frac = switches / max(1, len(chosen) - 1)
    finite = all(math.isfinite(v) for v in (emag_rep.frechet, emag_rep.precision, emag_rep.recall,
                                            emag_rep.density, emag_rep.coverage))
    ok = cfg_rep.frechet < none_rep.frechet and finite and frac > 0
    record(12, ok, f"toy Frechet none {none_rep.frechet:.2f} -> CFG {cfg_rep.frechet:.2f}; EMAG "
                   f"{emag_rep.frechet:.2f} (finite: {finite}); selected layer changes on "
                   f"{frac:.1%} of consecutive window steps, layers used {sorted(set(chosen))}")
