"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py`` (lines appear in the terminal summary)
or ``python tests/test_acceptance.py``.
"""

import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from reference_mtt import meta_gradient  # noqa: E402
from trajdistill import autodiff as ad  # noqa: E402
from trajdistill import buffer as B  # noqa: E402
from trajdistill import distill as D  # noqa: E402
from trajdistill import gradcheck as gc  # noqa: E402
from trajdistill import storage  # noqa: E402
from trajdistill.autodiff import Tensor  # noqa: E402
from trajdistill.datasets import (SyntheticDataset, gen_blobs, load_idx, load_synthetic,  # noqa: E402
                                  save_synthetic, split_per_class)
from trajdistill.evaluate import baseline_random_subset, evaluate  # noqa: E402
from trajdistill.nn import (LayerRecord, ModelSpec, ParamVector, filter_slices, init_params,  # noqa: E402
                            param_count)

RESULTS: list = []

MLP = ModelSpec("mlp", 1, 32, (16,), 3)
EXPERT_OPT = B.OptimizerSettings(lr=0.05, momentum=0.9, batch_size=30)


def _fixture(separation=1.0):
    return split_per_class(gen_blobs(3, 140, 16, 0.12, 0, separation=separation), 40, 1)


def _report(number, title, passed, detail, seconds):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} | {detail} | {seconds:.1f}s"
    RESULTS.append(line)
    print(line)
    return passed


# ---------------------------------------------------------------------------


def criterion_1():
    t0 = time.perf_counter()
    report = gc.run_suite()
    seconds = time.perf_counter() - t0
    kinds = {r.kind for r in report.results}
    ops = {r.name for r in report.results if r.kind == "first-order"}
    traj, _, _ = gc.meta_fixture()
    n_params = param_count(traj.spec)
    first_ok = all(r.error < 1e-6 for r in report.results if r.kind == "first-order")
    rest_ok = all(r.error < 1e-4 for r in report.results if r.kind != "first-order")
    covered = {c.name for c in gc.OP_CASES} <= ops and any("meta" in r.name for r in report.results)
    passed = first_ok and rest_ok and covered and n_params <= 200 and seconds < 60
    first_max = max(r.error for r in report.results if r.kind == "first-order")
    other_max = max(r.error for r in report.results if r.kind != "first-order")
    return _report(1, "gradient oracle suite", passed,
                   f"{len(report.results)} checks ({', '.join(sorted(kinds))}); first-order max "
                   f"{first_max:.1e} < 1e-6; penalty/meta max {other_max:.1e} < 1e-4; "
                   f"meta model {n_params} params", seconds)


def criterion_2():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    grads = [rng.normal(size=7) for _ in range(10)]
    recs = (LayerRecord("w", (7,), 0),)
    pv, state = ParamVector(np.zeros(7), recs), B.MomentumState.zeros(7, 0.9, 0.05)
    vs = []
    for g in grads:
        pv, state = B.momentum_step(pv, g, state)
        vs.append(state.v)
    closed = B.velocity_closed_form(grads, 0.9, 0.05)
    gap = max(float(np.abs(a - b).max()) for a, b in zip(vs, closed))
    pv, state = ParamVector(np.zeros(7), recs), B.MomentumState.zeros(7, 0.0, 0.05)
    delta_max = 0.0
    for g in grads:
        pv, state = B.momentum_step(pv, g, state)
        delta_max = max(delta_max, float(np.abs(B.cumulative_term(state.v, g, 0.05)).max()))
    seconds = time.perf_counter() - t0
    passed = gap <= 1e-12 and delta_max == 0.0 and seconds < 1
    return _report(2, "momentum identities", passed,
                   f"recurrence vs closed form max |diff| {gap:.1e} <= 1e-12; "
                   f"max |delta| at gamma=0 = {delta_max}", seconds)


def criterion_3():
    t0 = time.perf_counter()
    tr, te = _fixture()
    seeds = (0, 1)
    runs = {
        "sgd": (B.SmoothnessConfig(enabled=False), B.OptimizerSettings(lr=0.05, momentum=0.0, batch_size=30)),
        "mom": (B.SmoothnessConfig(enabled=False), EXPERT_OPT),
        "sc": (B.SmoothnessConfig(), EXPERT_OPT),
    }
    var, acc = {}, {}
    for key, (cfg, opt) in runs.items():
        trajs = [B.train_expert(tr, MLP, cfg, opt, 20, s, te) for s in seeds]
        var[key] = float(np.mean([B.avg_var(t) for t in trajs]))
        acc[key] = float(np.mean([t.meta["metrics"][-1]["test_acc"] for t in trajs]))
    seconds = time.perf_counter() - t0
    r_mom = var["mom"] / var["sgd"]
    r_sc = var["sc"] / var["mom"]
    passed = r_mom >= 5 and r_sc <= 0.5 and acc["sc"] >= acc["sgd"] - 0.01 and seconds < 300
    return _report(3, "smoothness direction", passed,
                   f"avg_var mom/sgd {r_mom:.1f} >= 5; sc/mom {r_sc:.2f} <= 0.5; "
                   f"test acc sc {acc['sc']:.3f} vs sgd {acc['sgd']:.3f} (-1pt allowed)", seconds)


def criterion_4():
    t0 = time.perf_counter()
    tr, te = _fixture()
    trajs = B.train_experts(tr, MLP, B.SmoothnessConfig(), EXPERT_OPT, 20, [0, 1])
    cfg = D.DistillConfig(M=2, N=20, T_plus=2, ipc=1, alpha0=0.05, outer_iters=200,
                          lr_images=0.01, lr_alpha=1e-3, rho=0.1, balance=True, intermediate=True)
    syn0 = D.representative_init(tr, trajs[0], 1, 0, 0.05)
    out, _ = D.run_distillation(trajs, syn0, cfg)
    seeds = (0, 1, 2)
    distilled = evaluate(out, MLP, te, seeds, iters=1000).mean
    full = evaluate(tr, MLP, te, seeds, iters=1000, lr=0.05).mean
    random = float(np.mean([evaluate(baseline_random_subset(tr, 1, s, 0.05), MLP, te, (s,),
                                     iters=1000).mean for s in seeds]))
    seconds = time.perf_counter() - t0
    passed = distilled >= random + 0.05 and distilled >= 0.9 * full and seconds < 600
    return _report(4, "end-to-end distillation", passed,
                   f"distilled {distilled:.3f} vs random {random:.3f} (+5pt needed) and "
                   f">= 0.9 x full {full:.3f} = {0.9 * full:.3f}", seconds)


def criterion_5():
    t0 = time.perf_counter()
    nu_mid = D.balance_coefficient(4, 8, 8.0)
    nu_exact = abs(nu_mid - math.log(8)) <= 1e-12
    # reciprocity as exact identity: nu(lower branch) is defined as 1 / nu(upper branch)
    recip = all(D.balance_coefficient(4 - d, 8) == 1.0 / D.balance_coefficient(4 + d, 8)
                for d in (1, 2, 3, 4))
    tr, _ = _fixture(separation=3.0)
    traj = B.train_expert(tr, MLP, B.SmoothnessConfig(), EXPERT_OPT, 20, 0)
    student = D.representative_init(tr, traj, 1, 0, 0.05)
    rows = D.inner_loss_profile(student, traj, 8)
    raw = D.spread_ratio([r["raw"] for r in rows])
    bal = D.spread_ratio([r["balanced"] for r in rows])
    seconds = time.perf_counter() - t0
    passed = bal < raw and nu_exact and recip
    return _report(5, "balanced inner loss", passed,
                   f"max/min over starts 0..8: balanced {bal:.2f} < raw {raw:.2f}; "
                   f"nu(mid) - ln 8 = {nu_mid - math.log(8):.1e}; reciprocity exact: {recip}",
                   seconds)


def criterion_6():
    import itertools
    t0 = time.perf_counter()
    checks = {}
    checks["schedule"] = D.match_schedule(30, 3).xi == (10, 20, 30)
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=9), rng.normal(size=9)
    checks["matching"] = (D.matching_loss(Tensor(b), a, b).item() == 0.0
                          and abs(D.matching_loss(Tensor(a), a, b).item() - 1.0) <= 1e-15)
    theta = init_params(ModelSpec("convnet", 1, 4, (2, 6, 6), 3, "none"), 0)
    theta = theta.with_data(theta.data + 0.05)
    pert = D.perturb_weights(theta, 0.2, 3)
    checks["perturbation"] = all(
        abs(np.linalg.norm(pert.data[i] - theta.data[i]) - 0.2 * np.linalg.norm(theta.data[i]))
        <= 1e-12 * np.linalg.norm(theta.data[i]) for i in filter_slices(theta.layout))
    checks["rho0"] = D.perturb_weights(theta, 0.0, 3) == theta
    ok_km = True
    for trial in range(5):
        X = rng.normal(size=(8, 3))
        best = min(D.inertia(X, np.stack([X[np.array(p) == k].mean(axis=0) for k in (0, 1)]),
                             np.array(p))
                   for p in itertools.product((0, 1), repeat=8) if 0 < sum(p) < 8)
        C, asg = D.kmeans(X, 2, seed=trial)
        ok_km &= abs(D.inertia(X, C, asg) - best) <= 1e-12 * best
    checks["kmeans"] = ok_km
    seconds = time.perf_counter() - t0
    passed = all(checks.values()) and seconds < 10
    return _report(6, "formula unit suite", passed,
                   ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in checks.items()), seconds)


def criterion_7():
    t0 = time.perf_counter()
    spec = ModelSpec("mlp", 0, 1, (8,), 3)
    data = gen_blobs(3, 30, 8, 0.1, 3)
    traj = B.train_expert(data, spec, B.SmoothnessConfig(enabled=False),
                          B.OptimizerSettings(lr=0.1, batch_size=30), 4, 0)
    idx = [0, 1, 30, 31, 60, 61]
    syn = SyntheticDataset(data.images[idx], data.labels[idx], 0.05, 3)
    cfg = D.DistillConfig(M=2, N=5, T_plus=2, rho=0.0, balance=False, intermediate=False,
                          beta_mode="equal", outer_iters=1, lr_images=0.01, lr_alpha=1e-3)
    plan = D.plan_iteration(cfg, 1, len(syn), 0)
    start = traj.checkpoints[plan.start].data
    target = traj.checkpoints[plan.start + cfg.M].data
    _, dS, da = meta_gradient(syn.images, np.eye(3)[syn.labels], syn.alpha, start, target, cfg.N)
    out, _ = D.run_distillation([traj], syn, cfg)
    expect_images = np.clip(syn.images - cfg.lr_images * dS, 0, 1)
    expect_alpha = syn.alpha - cfg.lr_alpha * da
    img = Tensor(syn.images, requires_grad=True)
    al = Tensor(syn.alpha, requires_grad=True)
    total, _ = D.segment_loss(img, al, syn.labels, traj, plan, cfg)
    gi, ga = ad.grad(total, [img, al])
    err_s = float(np.abs(gi.data - dS).max() / np.abs(dS).max())
    err_a = abs(float(ga.data) - da) / abs(da)
    upd = max(float(np.abs(out.images - expect_images).max()), abs(out.alpha - expect_alpha))
    seconds = time.perf_counter() - t0
    passed = err_s <= 1e-10 and err_a <= 1e-10 and upd <= 1e-10
    return _report(7, "ablation recovery", passed,
                   f"{len(start)}-param model; rel err pixels {err_s:.1e}, alpha {err_a:.1e}; "
                   f"outer update diff {upd:.1e} (tol 1e-10)", seconds)


def criterion_8():
    import struct
    t0 = time.perf_counter()
    checks = {}
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        data = gen_blobs(3, 10, 6, 0.1, 0)
        spec = ModelSpec("mlp", 1, 8, (6,), 3)
        traj = B.train_expert(data, spec, B.SmoothnessConfig(), B.OptimizerSettings(lr=0.05, batch_size=10), 2, 0)
        B.save_trajectory(traj, tmp / "traj")
        back = B.load_trajectory(tmp / "traj")
        checks["trajectory"] = back == traj and all(
            a.data.tobytes() == b.data.tobytes() for a, b in zip(back.checkpoints, traj.checkpoints))
        syn = SyntheticDataset(np.random.default_rng(1).uniform(size=(3, 6)), [0, 1, 2], 0.0123, 3)
        save_synthetic(syn, tmp / "syn")
        sb = load_synthetic(tmp / "syn")
        checks["synthetic"] = (sb.images.tobytes() == syn.images.tobytes() and sb.alpha == syn.alpha
                               and np.array_equal(sb.labels, syn.labels))
        path = tmp / "traj" / "epoch_0001.bin"
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0x10
        path.write_bytes(bytes(raw))
        try:
            B.load_trajectory(tmp / "traj")
            checks["checksum"] = False
        except storage.ChecksumError:
            checks["checksum"] = True
        pixels = np.array([[[0, 255, 51], [102, 0, 255]], [[1, 2, 3], [4, 5, 6]]], dtype=np.uint8)
        (tmp / "i.idx").write_bytes(struct.pack(">IIII", 0x803, 2, 2, 3) + pixels.tobytes())
        (tmp / "l.idx").write_bytes(struct.pack(">II", 0x801, 2) + bytes([1, 0]))
        d = load_idx(tmp / "i.idx", tmp / "l.idx")
        checks["idx"] = (d.images.shape == (2, 1, 2, 3) and d.labels.tolist() == [1, 0]
                         and np.array_equal(d.images[0, 0], [[0, 1, 0.2], [0.4, 0, 1]]))
    seconds = time.perf_counter() - t0
    passed = all(checks.values())
    return _report(8, "persistence", passed,
                   ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in checks.items()), seconds)


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6,
            criterion_7, criterion_8]


@pytest.mark.parametrize("criterion", CRITERIA, ids=[f"criterion_{i}" for i in range(1, 9)])
def test_criterion(criterion):
    assert criterion(), RESULTS[-1]


if __name__ == "__main__":
    outcomes = [c() for c in CRITERIA]
    sys.exit(0 if all(outcomes) else 1)
