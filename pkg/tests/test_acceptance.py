"""Acceptance criteria 1-8.

Under pytest every criterion is one test, and the PASS/FAIL lines are repeated in
the terminal summary. Run directly for the lines alone:

    python3 tests/test_acceptance.py            # all criteria
    python3 tests/test_acceptance.py 1 2 4      # a subset

Criteria 5 and 7 share one toy dataset (10 bottles x 64 views) and one trained
VAEsp. Criterion 6 trains its three models on a second bottle set with more shapes
and fewer views (40 x 16, the same image count). Everything is built on first use;
set SHAPEPOSE_ACCEPTANCE_DIR to keep the rendered datasets.
"""
from __future__ import annotations

import functools
import math
import os
import sys
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy.stats import multivariate_normal

sys.path.insert(0, str(Path(__file__).resolve().parent))

from oracles import finite_difference_check, naive_mse, naive_ssim  # noqa: E402
from shapepose import evaluation as ev  # noqa: E402
from shapepose.checkpoint import read_config, save_checkpoint  # noqa: E402
from shapepose.dataset import DatasetConfig, MultiViewDataset, generate_dataset  # noqa: E402
from shapepose.metrics import mse, ssim  # noqa: E402
from shapepose.models import (PUBLISHED_PARAMETER_COUNTS, KINDS, GaussianBelief, build_model,  # noqa: E402
                              count_parameters)
from shapepose.planner import (LinearGaussianToy, PlannerConfig, PreferredState, gaussian_nll,  # noqa: E402
                               select_action)
from shapepose.training import CONSTRAINTS, TrainingConfig, kl_diag_gaussian, kl_to_standard_normal, train  # noqa: E402

# run settings; see the README for why these values
SETUPS = {
    "toy": dict(data=dict(instances=10, views=64, data_seed=1),
                train=dict(learning_rate=1e-3, epochs=20, mse_tolerance=60.0, seed=0)),
    # swap partners need many distinct shapes for the shape-free pose code to carry over to held-out bottles
    "shapes": dict(data=dict(instances=40, views=16, data_seed=1),
                   train=dict(learning_rate=1e-3, epochs=45, mse_tolerance=60.0, seed=0)),
}
CATEGORY = "bottle"
SATISFIED_MARGIN = 0.1  # "satisfied by margin": EMA below (1 - margin) * tolerance
SWEEP_SEED = 0
REACH_TRIALS = 50

RESULTS: dict = {}


@dataclass
class Outcome:
    ok: bool
    detail: str


def _b(m, lv):
    return GaussianBelief(torch.as_tensor(m, dtype=torch.float64), torch.as_tensor(lv, dtype=torch.float64))


# ------------------------------------------------------------ shared toy models

@functools.lru_cache(maxsize=None)
def dataset(setup):
    d = SETUPS[setup]["data"]
    base = os.environ.get("SHAPEPOSE_ACCEPTANCE_DIR") or tempfile.mkdtemp(prefix="shapepose_acc_")
    root = Path(base) / setup
    if not (root / CATEGORY / "manifest.json").exists():
        root.mkdir(parents=True, exist_ok=True)
        generate_dataset(DatasetConfig(root=str(root), category=CATEGORY, instances=d["instances"],
                                       views=d["views"], seed=d["data_seed"]))
    return MultiViewDataset.from_root(root, CATEGORY)


@functools.lru_cache(maxsize=None)
def trained(setup, kind, swap_probability):
    """(TrainResult, wall seconds); runs within a setup share data and seed."""
    cfg = TrainingConfig(category=CATEGORY, swap_probability=swap_probability, **SETUPS[setup]["train"])
    t0 = time.time()
    res = train(kind, dataset(setup), cfg)
    return res, time.time() - t0


@functools.lru_cache(maxsize=None)
def sweeps():
    return ev.make_sweeps(CATEGORY, 50, seed=SWEEP_SEED)


# ------------------------------------------------------------ criteria

def criterion_1():
    """Trainable-parameter counts within 1% of the published ones, configuration stored in the checkpoint."""
    parts, ok = [], True
    with tempfile.TemporaryDirectory() as tmp:
        for kind in KINDS:
            m = build_model(kind)
            n, ref = count_parameters(m), PUBLISHED_PARAMETER_COUNTS[kind]
            rel = (n - ref) / ref
            conf = read_config(save_checkpoint(Path(tmp) / f"{kind}.zip", m))
            documented = (conf["trainable_parameters"] == n
                          and tuple(conf["arch"]["decoder_features"]) == m.cfg.decoder_features
                          and tuple(conf["arch"]["bridge_shape"]) == m.cfg.bridge_shape)
            ok &= abs(rel) <= 0.01 and documented
            parts.append(f"{kind} {n} vs {ref} ({rel:+.2%})")
    return Outcome(ok, "; ".join(parts))


def criterion_2():
    """Closed-form values of the analytic helpers."""
    q = _b([0.3, -1.0, 2.0], [0.1, -0.5, 1.0])
    checks = {
        "kl(q,q)=0": bool(torch.all(kl_diag_gaussian(q, q) == 0)),
        "kl(N(1,1)||N(0,1))=0.5/dim": bool(np.allclose(
            kl_diag_gaussian(_b(np.ones(6), np.zeros(6)), _b(np.zeros(6), np.zeros(6))).numpy(), 0.5, atol=1e-15)
            and np.allclose(kl_to_standard_normal(_b(np.ones(6), np.zeros(6))).numpy(), 0.5, atol=1e-15)),
        "nll at mode D=8": abs(gaussian_nll(np.zeros(8), _b(np.zeros(8), np.zeros(8))) - 4 * math.log(2 * math.pi))
        < 1e-9,
    }
    a = np.random.default_rng(0).uniform(size=(120, 120, 3))
    checks["ssim(a,a)=1"] = ssim(a, a) == 1.0
    checks["mse(a,a)=0"] = mse(a, a) == 0.0
    bad = [k for k, v in checks.items() if not v]
    return Outcome(not bad, "all 5 identities hold" if not bad else "failed: " + ", ".join(bad))


def criterion_3():
    """Central finite differences of the full objective, reduced float64 models."""
    parts, ok = [], True
    for kind in KINDS:
        errs, skipped = finite_difference_check(kind, n_params=20, seed=0)
        worst = max(errs) if errs else float("inf")
        ok &= len(errs) >= 20 and worst < 1e-3
        parts.append(f"{kind} n={len(errs)} max_rel={worst:.1e}")
    return Outcome(ok, "; ".join(parts) + " (tol 1e-3)")


def _toy_planner_case(seed):
    g = np.random.default_rng(seed)
    toy = LinearGaussianToy(g.normal(size=(2, 2)) * 0.5, g.normal(size=(2, 2)), log_var=-12.0)
    z0 = g.normal(size=2)
    pref = PreferredState(_b(g.normal(size=2) * 2, g.normal(size=2) * 0.3))
    grid = np.stack(np.meshgrid(np.linspace(-2, 2, 10), np.linspace(-2, 2, 10)), -1).reshape(-1, 2)
    return toy, z0, pref, grid


def criterion_4():
    """Metrics, the Gaussian NLL and the planner argmin against independent references."""
    g = np.random.default_rng(4)
    mse_err = max(abs(mse(a, b) - naive_mse(a, b))
                  for a, b in (g.uniform(size=(2, 120, 120, 3)) for _ in range(3)))
    ssim_err = 0.0
    for _ in range(3):
        a = g.uniform(size=(40, 36, 3))
        b = np.clip(a + g.normal(scale=0.2, size=a.shape), 0, 1)
        ssim_err = max(ssim_err, abs(ssim(a, b) - naive_ssim(a, b)))
    nll_err = 0.0
    for d in (1, 3, 8, 24):
        m, lv, x = g.normal(size=d), g.normal(size=d), g.normal(size=d)
        ref = -multivariate_normal(mean=m, cov=np.diag(np.exp(lv))).logpdf(x)
        nll_err = max(nll_err, abs(gaussian_nll(x, _b(m, lv)) - ref))
    hits = 0
    for seed in range(100):
        toy, z0, pref, grid = _toy_planner_case(seed)
        plan = select_action(toy, z0, pref, PlannerConfig(n_candidates=len(grid), seed=seed), candidates=grid)
        hits += plan.index == int(np.argmin(toy.expected_nll(z0, grid, pref)))
    ok = mse_err < 1e-12 and ssim_err < 1e-9 and nll_err < 1e-9 and hits == 100
    return Outcome(ok, f"mse {mse_err:.1e} (1e-12); ssim {ssim_err:.1e} (1e-9); nll {nll_err:.1e} (1e-9); "
                       f"toy argmin {hits}/100")


def multiplier_behaviour(records, tol, margin=SATISFIED_MARGIN):
    """Counts of (violated steps, violated steps where a multiplier did not rise,
    satisfied-by-margin steps, such steps where a multiplier rose)."""
    n_viol = bad_viol = n_sat = bad_sat = 0
    for r in records:
        lam, nxt, ema = (np.asarray(r[k]) for k in ("multipliers", "multipliers_next", "constraint_ema"))
        viol = ema > tol
        sat = ema < (1 - margin) * tol
        n_viol += int(viol.sum())
        bad_viol += int((nxt[viol] <= lam[viol]).sum())
        n_sat += int(sat.sum())
        bad_sat += int((nxt[sat] > lam[sat]).sum())
    return n_viol, bad_viol, n_sat, bad_sat


def criterion_5():
    """Toy VAEsp reaches the tolerance within 50 epochs in under 30 minutes; multipliers follow the constraint."""
    res, secs = trained("toy", "vaesp", 0.5)
    tol = SETUPS["toy"]["train"]["mse_tolerance"]
    by_epoch = {}
    for r in res.records:
        by_epoch.setdefault(r["epoch"], []).append([r[c] for c in CONSTRAINTS])
    epoch_means = [np.mean(by_epoch[e], axis=0) for e in sorted(by_epoch)]
    below = [e for e, m in enumerate(epoch_means) if np.all(m < tol)]
    first = below[0] + 1 if below else None
    n_viol, bad_viol, n_sat, bad_sat = multiplier_behaviour(res.records, tol)
    ok = (first is not None and first <= 50 and secs < 30 * 60
          and n_viol > 0 and bad_viol == 0 and n_sat > 0 and bad_sat == 0)
    return Outcome(ok, f"below tol {tol:g} at epoch {first} of {len(epoch_means)} "
                       f"(final {np.round(epoch_means[-1], 1).tolist()}), {secs / 60:.1f} min; "
                       f"multiplier rose on {n_viol - bad_viol}/{n_viol} violated entries, "
                       f"did not rise on {n_sat - bad_sat}/{n_sat} satisfied-by-{SATISFIED_MARGIN:.0%} entries")


def criterion_6():
    """Swap-trained VAEsp is disentangled (>= 0.75) and beats VAE and swap-free VAEsp by >= 0.05."""
    t0 = time.time()
    scores = {}
    runs = (("vaesp_swap0.5", "vaesp", 0.5), ("vaesp_swap0", "vaesp", 0.0), ("vae", "vae", 0.5))
    for name, kind, p in runs:
        scores[name] = ev.disentanglement_profile(trained("shapes", kind, p)[0].model, sweeps()).score
    train_secs = sum(trained("shapes", k, p)[1] for _, k, p in runs)
    s = scores["vaesp_swap0.5"]
    ok = (s >= 0.75 and s - scores["vaesp_swap0"] >= 0.05 and s - scores["vae"] >= 0.05
          and train_secs + (time.time() - t0) <= 3600)
    return Outcome(ok, ", ".join(f"{k} {v:.3f}" for k, v in scores.items())
                   + f"; training {train_secs / 60:.1f} min")


def criterion_7():
    """EFE planner beats uniform-random actions over 50 paired reach trials."""
    model = trained("toy", "vaesp", 0.5)[0].model
    t0 = time.time()
    res = ev.eval_reach(model, CATEGORY, n_trials=REACH_TRIALS, cfg=PlannerConfig(), test="paired")
    secs = time.time() - t0
    med_p, med_r = np.median(res.planner.per_sample), np.median(res.random.per_sample)
    ok = med_p < med_r and res.p_value < 0.05 and secs < 15 * 60
    return Outcome(ok, f"median mse planner {med_p:.5f} vs random {med_r:.5f}, paired t-test p={res.p_value:.2g}, "
                       f"{res.planner.n} trials, {secs / 60:.1f} min")


def criterion_8():
    """Swap round trip and shape constancy, 1000 hypothesis examples each."""
    import test_training as tt

    failures = []
    for name, prop in (("swap round trip", tt.test_swap_round_trip), ("shape constancy", tt.test_shape_constancy)):
        try:
            prop()
        except Exception as err:  # hypothesis re-raises the falsifying example
            failures.append(f"{name}: {type(err).__name__}")
    return Outcome(not failures, "both properties hold on 1000 examples" if not failures else "; ".join(failures))


CRITERIA = {1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4,
            5: criterion_5, 6: criterion_6, 7: criterion_7, 8: criterion_8}


def run_criterion(n):
    t0 = time.time()
    try:
        out = CRITERIA[n]()
    except Exception as err:
        out = Outcome(False, f"error: {type(err).__name__}: {err}")
    line = f"criterion {n}: {'PASS' if out.ok else 'FAIL'}  {out.detail}  [{time.time() - t0:.0f}s]"
    RESULTS[n] = line
    print(line, flush=True)
    return out


@pytest.mark.parametrize("n", [pytest.param(n, marks=pytest.mark.slow) if n in (5, 6, 7) else n
                               for n in sorted(CRITERIA)])
def test_criterion(n):
    out = run_criterion(n)
    assert out.ok, out.detail


def main(argv=None):
    from hypothesis import HealthCheck, settings

    settings.register_profile("acceptance", deadline=None, suppress_health_check=[HealthCheck.too_slow])
    settings.load_profile("acceptance")
    wanted = [int(a) for a in (argv if argv is not None else sys.argv[1:])] or sorted(CRITERIA)
    outcomes = [run_criterion(n) for n in wanted]
    return 0 if all(o.ok for o in outcomes) else 1


if __name__ == "__main__":
    sys.exit(main())
