"""Acceptance criteria 1-10; each test reports one PASS/FAIL line.

Criteria 7 and 8 train four toy models (about 25 min CPU in total) and share
them through a module-scoped fixture.
"""

import time

import numpy as np
import pytest
import torch

from swimvg.backbone import Role
from swimvg.boxes import BoundingBox, giou
from swimvg.budget import budget_diff, closed_form_budget, param_budget
from swimvg.checkpoint import load_checkpoint, save_checkpoint
from swimvg.config import profile
from swimvg.data import GenConfig, make_split
from swimvg.fusion import CIA, DoSA
from swimvg.model import SwimVG
from swimvg.trainer import (
    collate,
    evaluate,
    finite_diff_check,
    init_state,
    iterate_batches,
    train,
    train_step,
)

from conftest import frozen_digest, report_criterion
from test_budget import random_configs

REFERENCE_TUNABLE_FRACTION = 0.0204

# Training recipe for the fusion-necessity runs (criteria 7-9). No learning
# rate is published; these are the pinned desk-scale defaults.
RECIPE = {"epochs": 60, "eval_every": 20}
RUN_BUDGET_S = 600.0


# -- 1 -------------------------------------------------------------------------

def test_c1_freezing_invariant(small_split):
    cfg = profile("toy", batch_size=16)
    model = SwimVG(cfg)
    before = frozen_digest(model)
    state = init_state(model, cfg)
    t0 = time.time()
    batches = [collate(c) for c in iterate_batches(small_split["train"], 16)]
    while state.step < 100:
        train_step(model, batches[state.step % len(batches)], state)
    elapsed = time.time() - t0
    ok = frozen_digest(model) == before and elapsed < 60
    report_criterion(1, ok, f"frozen hash unchanged after {state.step} steps ({elapsed:.1f}s, limit 60s)")
    assert ok


# -- 2 -------------------------------------------------------------------------

def test_c2_residual_identities():
    gen = torch.Generator().manual_seed(0)
    failures = 0
    for trial in range(100):
        cia = CIA(48, 32, 8, 2, 0.2, own_bridge=True)
        dosa = DoSA(32, 8, 0.2)
        cia.reset_parameters(gen)
        dosa.reset_parameters(gen)
        with torch.no_grad():
            for p in (cia.up, dosa.up):
                p.normal_(0, 1, generator=gen)
        f_v = torch.randn(9, 48, generator=gen) * 3
        f_t = torch.randn(5, 32, generator=gen) * 3
        text = torch.randn(5, 32, generator=gen)
        # scale = 0
        cia.scale = dosa.scale = 0.0
        failures += not torch.equal(cia(f_v, text), f_v)
        failures += not torch.equal(dosa(f_t), f_t)
        # zero up-projection with a nonzero scale
        cia.scale = dosa.scale = 0.2
        with torch.no_grad():
            cia.up.zero_()
            dosa.up.zero_()
        failures += not torch.equal(cia(f_v, text), f_v)
        failures += not torch.equal(dosa(f_t), f_t)
    report_criterion(2, failures == 0, f"CIA/DoSA bit-exact identities on 100 inputs x 4 cases, {failures} failures")
    assert failures == 0


# -- 3 -------------------------------------------------------------------------

def test_c3_gradient_correctness(small_split):
    cfg = profile("toy", dtype="float64")
    model = SwimVG(cfg)
    gen = torch.Generator().manual_seed(1)
    with torch.no_grad():
        # zero-initialised up-projections would make upstream adapter gradients trivially zero
        for m in list(model.cia.values()) + list(model.dosa.values()):
            m.up.normal_(0, 0.3, generator=gen)
    t0 = time.time()
    res = finite_diff_check(model, collate(small_split["train"][:4], torch.float64), eps=1e-5)
    elapsed = time.time() - t0
    groups = {"prompts", "bridges", "cia", "dosa", "head", "reg"}
    ok = (res["max_rel_error"] < 1e-4 and set(res["per_group"]) == groups
          and res["frozen_grads_none"] and elapsed < 300)
    worst = ", ".join(f"{g} {e:.1e}" for g, e in sorted(res["per_group"].items()))
    report_criterion(3, ok, f"max rel error {res['max_rel_error']:.2e} < 1e-4 over {res['coords']} coords "
                            f"[{worst}] ({elapsed:.0f}s)")
    assert ok


# -- 4 -------------------------------------------------------------------------

def _pixel_giou(a: BoundingBox, b: BoundingBox, gen: np.random.Generator, n: int = 512) -> float:
    """Stratified Monte-Carlo estimate: one random point per cell of an n x n grid over the hull."""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    cx1, cy1 = min(ax1, bx1), min(ay1, by1)
    cx2, cy2 = max(ax2, bx2), max(ay2, by2)
    j = np.arange(n)
    xs = cx1 + (j[None, :] + gen.random((n, n))) * (cx2 - cx1) / n
    ys = cy1 + (j[:, None] + gen.random((n, n))) * (cy2 - cy1) / n
    in_a = (xs >= ax1) & (xs < ax2) & (ys >= ay1) & (ys < ay2)
    in_b = (xs >= bx1) & (xs < bx2) & (ys >= by1) & (ys < by2)
    inter, union = (in_a & in_b).sum(), (in_a | in_b).sum()
    return inter / union - (n * n - union) / (n * n)


def test_c4_giou_oracle():
    unit = BoundingBox.from_corners(0, 0, 1, 1)
    closed = [
        (giou(unit, unit), 1.0),
        (giou(unit, BoundingBox.from_corners(1, 0, 2, 1)), 0.0),
        (giou(unit, BoundingBox.from_corners(2, 0, 3, 1)), -1 / 3),
    ]
    closed_err = max(abs(a - b) for a, b in closed)
    rng = np.random.default_rng(0)
    gen = np.random.default_rng(1)
    worst = 0.0
    for _ in range(1000):
        c = rng.uniform(0.1, 0.9, (2, 2))
        s = rng.uniform(0.05, 0.5, (2, 2))
        a, b = BoundingBox(*c[0], *s[0]), BoundingBox(*c[1], *s[1])
        worst = max(worst, abs(giou(a, b) - _pixel_giou(a, b, gen)))
    ok = closed_err <= 1e-12 and worst <= 2e-3
    report_criterion(4, ok, f"closed forms err {closed_err:.1e} <= 1e-12; 1000 pairs vs 512x512 pixel oracle "
                            f"max |diff| {worst:.2e} <= 2e-3")
    assert ok


# -- 5 -------------------------------------------------------------------------

def _traced_counts(cfg, device):
    with torch.device(device):
        model = SwimVG(cfg)
        images = torch.zeros(1, cfg.image_size, cfg.image_size, 3)
        words = torch.zeros(1, cfg.max_text_len, dtype=torch.long)
        words[0, 0] = 2
        out = model(images, words)
    return [r.shape[-1] for r in out.vision_trace.roles], out.vision_trace.roles


def test_c5_swip_token_counts():
    results = []
    for name, cfg, device in (
        ("text 12 / vision 24", profile("full"), "meta"),
        ("toy", profile("toy"), "cpu"),
    ):
        counts, roles = _traced_counts(cfg, device)
        expected = [1 + min(i + 1, cfg.text_depth) + cfg.patch_count for i in range(cfg.vision_depth)]
        ok = counts == expected
        if device == "cpu":
            # layout: REG first, then the Swips in injection order, then patches
            for i, r in enumerate(roles):
                n_swip = min(i + 1, cfg.text_depth)
                ok &= bool((r[0, 0] == Role.REG) and (r[0, 1:1 + n_swip] == Role.SWIP).all()
                           and (r[0, 1 + n_swip:] == Role.PATCH).all())
        results.append((name, ok, counts))
    ok = all(r[1] for r in results)
    detail = "; ".join(f"{n}: {c[0]}..{c[-1]} {'ok' if o else 'MISMATCH'}" for n, o, c in results)
    report_criterion(5, ok, f"vision tokens per layer == 1 + min(i+1, l) + N ({detail})")
    assert ok


# -- 6 -------------------------------------------------------------------------

def test_c6_parameter_budget():
    mismatches = 0
    for cfg in random_configs():
        mismatches += bool(budget_diff(param_budget(SwimVG(cfg)), closed_form_budget(cfg)))
    cfg = profile("full")
    with torch.device("meta"):
        enum = param_budget(SwimVG(cfg))
    budget_ok = not budget_diff(enum, closed_form_budget(cfg))
    frac = enum.tunable_fraction
    ok = mismatches == 0 and budget_ok and 0.015 <= frac <= 0.026
    report_criterion(6, ok, f"10-config matrix mismatches {mismatches}; full-scale profile tunable fraction "
                            f"{100 * frac:.3f}% in [1.5%, 2.6%] (reference 2.04%)")
    assert ok


# -- 7 / 8 / 9: fusion necessity ----------------------------------------------

VARIANTS = {
    "full": {},
    "swip_only": {"cia_enabled": False},
    "cia_only": {"swip_enabled": False},
    "fusion_off": {"swip_enabled": False, "cia_enabled": False},
}


@pytest.fixture(scope="module")
def fusion_runs():
    base = profile("toy", **RECIPE)
    split = make_split(GenConfig.from_model_config(base), base.n_train, base.n_eval, base.data_seed)
    assert len(split["train"]) == 2000 and len(split["eval"]) == 500
    runs = {}
    for name, overrides in VARIANTS.items():
        cfg = base.replace(**overrides)
        torch.manual_seed(cfg.seed)
        model = SwimVG(cfg)
        reports = []
        t0 = time.time()
        train(model, split["train"], split["eval"], epochs=cfg.epochs,
              on_eval=lambda e, r, s: reports.append(r))
        elapsed = time.time() - t0
        runs[name] = {"final": reports[-1], "reports": reports, "seconds": elapsed}
        amb = reports[-1].subsets["ambiguous"]["pr@0.5"]
        print(f"{name}: pr@0.5 {reports[-1].pr(0.5):.3f} ambiguous {amb:.3f} ({elapsed:.0f}s)")
    return runs


def _amb(run):
    return run["final"].subsets["ambiguous"]["pr@0.5"]


@pytest.mark.slow
def test_c7_fusion_necessity(fusion_runs):
    full, off = fusion_runs["full"], fusion_runs["fusion_off"]
    pr = full["final"].pr(0.5)
    ok_full = pr >= 0.85 and full["seconds"] <= RUN_BUDGET_S
    ok_off = _amb(off) <= 0.60
    ok = ok_full and ok_off
    report_criterion(7, ok, f"full Pr@0.5 {pr:.3f} (need >= 0.85, {full['seconds']:.0f}s of {RUN_BUDGET_S:.0f}s); "
                            f"fusion-off ambiguous Pr@0.5 {_amb(off):.3f} (need <= 0.60)")
    assert ok


@pytest.mark.slow
def test_c8_ablation_ordering(fusion_runs):
    off = _amb(fusion_runs["fusion_off"])
    swip, cia, full = (_amb(fusion_runs[k]) for k in ("swip_only", "cia_only", "full"))
    ok = swip >= off + 0.05 and cia >= off + 0.05 and full >= max(swip, cia) - 0.01
    report_criterion(8, ok, f"ambiguous Pr@0.5 off {off:.3f}, swip-only {swip:.3f}, cia-only {cia:.3f}, "
                            f"both {full:.3f} (need each single >= off + 0.05, both >= max - 0.01)")
    assert ok


@pytest.mark.slow
def test_c9_metric_monotonicity(fusion_runs):
    reports = [r for run in fusion_runs.values() for r in run["reports"]]
    # plus 1000 random predictions
    rng = np.random.default_rng(9)
    pred = torch.tensor(np.column_stack([rng.uniform(0.2, 0.8, (1000, 2)), rng.uniform(0.05, 0.4, (1000, 2))]))
    gt = torch.tensor(np.column_stack([rng.uniform(0.2, 0.8, (1000, 2)), rng.uniform(0.05, 0.4, (1000, 2))]))
    from swimvg.boxes import box_iou_giou
    from swimvg.trainer import _precisions
    random_p = _precisions(box_iou_giou(pred, gt)[0], (0.5, 0.6, 0.8))
    checks = [(r.pr(0.8), r.pr(0.6), r.pr(0.5)) for r in reports]
    for r in reports:
        checks += [(s["pr@0.8"], s["pr@0.6"], s["pr@0.5"]) for s in r.subsets.values()]
    checks.append((random_p[0.8], random_p[0.6], random_p[0.5]))
    bad = [c for c in checks if not (0.0 <= c[0] <= c[1] <= c[2] <= 1.0)]
    report_criterion(9, not bad, f"Pr@0.8 <= Pr@0.6 <= Pr@0.5 on {len(checks)} evaluations, {len(bad)} violations")
    assert not bad


# -- 10 ------------------------------------------------------------------------

def test_c10_determinism_and_round_trip(small_split, tmp_path):
    def ten_losses():
        cfg = profile("toy", batch_size=16)
        torch.manual_seed(123)
        model = SwimVG(cfg)
        state = init_state(model, cfg)
        losses = []
        for chunk in iterate_batches(small_split["train"], 16, state.generator):
            losses.append(train_step(model, collate(chunk), state).total)
            if len(losses) == 4:
                break
        while len(losses) < 10:
            for chunk in iterate_batches(small_split["train"], 16, state.generator):
                losses.append(train_step(model, collate(chunk), state).total)
                if len(losses) == 10:
                    break
        return losses, model, state

    a, model, state = ten_losses()
    b, _, _ = ten_losses()
    path = str(tmp_path / "c10.ckpt")
    save_checkpoint(model, state, path)
    loaded, _ = load_checkpoint(path)
    r1 = evaluate(model, small_split["eval"]).to_json()
    r2 = evaluate(loaded, small_split["eval"]).to_json()
    ok = a == b and r1 == r2
    report_criterion(10, ok, f"10-step loss sequences identical ({a == b}); save-load-eval report "
                             f"byte-identical ({r1 == r2})")
    assert ok
