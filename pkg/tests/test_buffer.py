import json

import numpy as np
import pytest

from trajdistill import autodiff as ad
from trajdistill import buffer as B
from trajdistill import storage
from trajdistill.autodiff import Tensor
from trajdistill.nn import LayerRecord, ParamVector, forward, init_params


def test_momentum_recursion_matches_closed_form(rng):
    grads = [rng.normal(size=5) for _ in range(12)]
    state = B.MomentumState.zeros(5, 0.9, 0.03)
    pv = ParamVector(np.zeros(5), (LayerRecord("w", (5,), 0),))
    vs = []
    for g in grads:
        pv, state = B.momentum_step(pv, g, state)
        vs.append(state.v)
    for a, b in zip(vs, B.velocity_closed_form(grads, 0.9, 0.03)):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)
    np.testing.assert_allclose(pv.data, -np.sum(vs, axis=0), atol=1e-12)


def test_zero_momentum_has_no_cumulative_term(rng):
    pv = ParamVector(np.zeros(3), (LayerRecord("w", (3,), 0),))
    state = B.MomentumState.zeros(3, 0.0, 0.1)
    for _ in range(5):
        g = rng.normal(size=3)
        pv, state = B.momentum_step(pv, g, state)
        assert np.array_equal(B.cumulative_term(state.v, g, 0.1), np.zeros(3))


def test_momentum_state_validation():
    with pytest.raises(ValueError):
        B.MomentumState.zeros(3, 1.0, 0.1)
    with pytest.raises(ValueError):
        B.MomentumState.zeros(3, 0.5, 0.0)


def test_alignment_gap_values():
    assert B.alignment_gap([np.array([1.0, 2.0]), np.array([1.0, 0.0])]) == 8.0
    assert B.alignment_gap([np.ones(2)], [np.ones(2)]) == 0.0


def test_lambda_ramp_and_schedule():
    cfg = B.SmoothnessConfig(lambda_start=0.5, ramp_epochs=5)
    assert [cfg.lam(e) for e in range(7)] == [0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.0]
    assert B.SmoothnessConfig(enabled=False).lam(0) == 1.0
    assert B.SmoothnessConfig(lambda_schedule=(0.5, 0.75)).lam(1) == 0.75
    with pytest.raises(ValueError):
        B.SmoothnessConfig(lambda_schedule=(0.9, 0.6))
    with pytest.raises(ValueError):
        B.SmoothnessConfig(lambda_start=0.2)


def test_penalty_matches_loop_oracle(small_data, small_spec):
    p = init_params(small_spec, 2)
    x0 = small_data.images[:4]
    y = small_data.labels[:4]
    x = Tensor(x0, requires_grad=True)
    per = ad.cross_entropy(forward(small_spec, p, x), y, reduction="none")
    got = B.gradient_penalty(per, x, 1.0).item()
    ref = []
    for i in range(4):
        def ce_i(v, i=i):
            xi = x0.copy()
            xi[i] = v
            return ad.cross_entropy(forward(small_spec, p, Tensor(xi)), y, reduction="none").data[i]
        g = ad.finite_diff(ce_i, x0[i], 1e-6)
        ref.append((np.linalg.norm(g) - 1.0) ** 2)
    assert got == pytest.approx(np.mean(ref), rel=1e-6)


def test_smooth_loss_parameter_gradient_matches_finite_differences(small_data, small_spec):
    cfg = B.SmoothnessConfig(mu=0.7, k_target=0.5)
    x0, y = small_data.images[:5], small_data.labels[:5]
    p0 = init_params(small_spec, 3).data

    def value(theta):
        x = Tensor(x0, requires_grad=True)
        return B.smooth_loss(forward(small_spec, Tensor(theta), x), y, x, cfg, 1).item()

    theta = Tensor(p0, requires_grad=True)
    x = Tensor(x0, requires_grad=True)
    (g,) = ad.grad(B.smooth_loss(forward(small_spec, theta, x), y, x, cfg, 1), [theta])
    fd = ad.finite_diff(value, p0)
    assert ad.rel_error(g, fd) < 1e-6


def test_smooth_loss_requires_input_grad(small_data, small_spec):
    x = Tensor(small_data.images[:2])
    logits = forward(small_spec, init_params(small_spec, 0), x)
    with pytest.raises(ValueError):
        B.smooth_loss(logits, small_data.labels[:2], x, B.SmoothnessConfig(), 0)


def test_avg_var_matches_loop(small_traj):
    cps = [c.data for c in small_traj.checkpoints]
    ref = sum(float(np.dot(a - b, a - b)) for a, b in zip(cps, cps[1:])) / (len(cps) - 1)
    assert B.avg_var(small_traj) == pytest.approx(ref, rel=1e-12)
    assert small_traj.diagnostics.avg_var == pytest.approx(ref, rel=1e-12)
    with pytest.raises(ValueError):
        B.avg_var(small_traj.checkpoints[:1])


def test_single_epoch_trajectory_matches_manual_loop(small_data, small_spec):
    cfg = B.SmoothnessConfig(enabled=False)
    opt = B.OptimizerSettings(lr=0.05, momentum=0.9, batch_size=20)
    traj = B.train_expert(small_data, small_spec, cfg, opt, epochs=1, seed=4)
    assert traj.epochs == 1 and len(traj.checkpoints) == 2
    rng = np.random.default_rng(4)
    theta = init_params(small_spec, 4).data.copy()
    v = np.zeros_like(theta)
    order = rng.permutation(len(small_data))
    for s in range(0, len(order), 20):
        idx = order[s:s + 20]
        t = Tensor(theta, requires_grad=True)
        loss = ad.cross_entropy(forward(small_spec, t, small_data.images[idx]), small_data.labels[idx])
        (g,) = ad.grad(loss, [t])
        v = 0.9 * v + 0.05 * g.data
        theta = theta - v
    np.testing.assert_allclose(traj.checkpoints[1].data, theta, rtol=0, atol=1e-14)
    assert traj.checkpoints[0] == init_params(small_spec, 4)


def test_lr_halving():
    opt = B.OptimizerSettings(lr=0.1)
    assert [B.lr_for_epoch(opt, e, 5) for e in range(5)] == [0.1, 0.1, 0.1, 0.05, 0.05]
    assert B.lr_for_epoch(B.OptimizerSettings(lr=0.1, halve_lr=False), 4, 5) == 0.1


def test_training_is_deterministic(small_data, small_spec, small_traj):
    again = B.train_expert(small_data, small_spec, B.SmoothnessConfig(),
                           B.OptimizerSettings(lr=0.05, batch_size=20), epochs=4, seed=1)
    assert again == small_traj


def test_trajectory_round_trip(tmp_path, small_traj):
    B.save_trajectory(small_traj, tmp_path / "e")
    back = B.load_trajectory(tmp_path / "e")
    assert back == small_traj
    assert all(a.data.tobytes() == b.data.tobytes()
               for a, b in zip(back.checkpoints, small_traj.checkpoints))


def test_trajectory_checksum_and_count_errors(tmp_path, small_traj):
    d = B.save_trajectory(small_traj, tmp_path / "e")
    raw = bytearray((d / "epoch_0002.bin").read_bytes())
    raw[-1] ^= 1
    (d / "epoch_0002.bin").write_bytes(bytes(raw))
    with pytest.raises(storage.ChecksumError):
        B.load_trajectory(d)
    (d / "epoch_0004.bin").unlink()
    with pytest.raises(B.TrajectoryFormatError, match="4 epochs"):
        B.load_trajectory(d)
    m = json.loads((d / "manifest.json").read_text())
    m["format_version"] = 7
    (d / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(storage.VersionMismatchError):
        B.load_trajectory(d)


def test_divergence_is_reported(small_data, small_spec):
    opt = B.OptimizerSettings(lr=1e306, momentum=0.9, batch_size=5)
    with pytest.raises(B.TrainingDivergedError) as err:
        B.train_expert(small_data, small_spec, B.SmoothnessConfig(enabled=False), opt, 3, 0)
    assert err.value.epoch >= 1


def test_argument_validation(small_data, small_spec):
    with pytest.raises(ValueError):
        B.train_expert(small_data, small_spec, B.SmoothnessConfig(), B.OptimizerSettings(), 0, 0)
    with pytest.raises(ValueError):
        B.train_expert(small_data, small_spec, B.SmoothnessConfig(),
                       B.OptimizerSettings(batch_size=1000), 1, 0)


def test_parallel_experts_equal_serial(small_data, small_spec):
    cfg, opt = B.SmoothnessConfig(enabled=False), B.OptimizerSettings(lr=0.05, batch_size=20)
    serial = B.train_experts(small_data, small_spec, cfg, opt, 2, [0, 1])
    parallel = B.train_experts(small_data, small_spec, cfg, opt, 2, [0, 1], threads=2)
    assert serial == parallel
