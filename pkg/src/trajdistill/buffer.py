"""Expert trajectory generation with momentum SGD and the smoothness-constrained loss."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import storage
from .autodiff import Tensor
from .datasets import LabeledDataset
from .nn import ModelSpec, ParamVector, accuracy, forward, init_params, layout

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"expert training diverged in epoch {epoch}" + (f": {detail}" if detail else ""))
        self.epoch = epoch


class TrajectoryFormatError(storage.StorageError):
    pass


# ---------------------------------------------------------------------------
# momentum


@dataclass(frozen=True)
class MomentumState:
    v: np.ndarray
    gamma: float = 0.9
    eta: float = 0.01
    step: int = 0

    @classmethod
    def zeros(cls, size: int, gamma: float, eta: float) -> "MomentumState":
        if not 0.0 <= gamma < 1.0:
            raise ValueError(f"momentum factor must lie in [0, 1), got {gamma}")
        if eta <= 0:
            raise ValueError(f"learning rate must be positive, got {eta}")
        return cls(np.zeros(size), gamma, eta, 0)


def momentum_step(params: ParamVector, grad, state: MomentumState):
    """``v' = gamma*v + eta*g``; ``theta' = theta - v'``."""
    g = np.asarray(grad.data if isinstance(grad, (ParamVector, Tensor)) else grad, dtype=np.float64)
    if g.shape != params.data.shape or state.v.shape != params.data.shape:
        raise ValueError(f"momentum_step: shapes {params.data.shape}, {g.shape}, {state.v.shape}")
    if not np.isfinite(g).all():
        raise FloatingPointError(f"momentum_step: non-finite gradient at step {state.step + 1}")
    v = state.gamma * state.v + state.eta * g
    new_state = MomentumState(v, state.gamma, state.eta, state.step + 1)
    return params.with_data(params.data - v), new_state


def velocity_closed_form(grads, gamma: float, eta: float) -> list:
    """Velocities from the unrolled sum ``eta * (sum_k gamma^(t-k) g_k + g_t)``."""
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    out = []
    for t in range(len(grads)):
        acc = grads[t].copy()
        for k in range(t):
            acc = acc + gamma ** (t - k) * grads[k]
        out.append(eta * acc)
    return out


def cumulative_term(v: np.ndarray, g: np.ndarray, eta: float) -> np.ndarray:
    """The part of a momentum update that plain SGD would not take: ``v - eta*g``."""
    return np.asarray(v) - eta * np.asarray(g)


def alignment_gap(expert_terms, student_terms=()) -> float:
    """Squared norm of the difference between summed cumulative terms of two segments.

    A plain-SGD student contributes no cumulative terms, so by default the gap
    is the squared norm of the expert's summed terms.
    """
    e = np.sum(expert_terms, axis=0) if len(expert_terms) else 0.0
    s = np.sum(student_terms, axis=0) if len(student_terms) else 0.0
    d = np.asarray(e - s, dtype=np.float64)
    return float(np.sum(d * d))


@dataclass
class MomentumDiagnostics:
    delta_norms: list = field(default_factory=list)
    epsilon: list = field(default_factory=list)
    avg_var: float = float("nan")


# ---------------------------------------------------------------------------
# smoothness-constrained loss


@dataclass(frozen=True)
class SmoothnessConfig:
    enabled: bool = True
    lambda_start: float = 0.5
    ramp_epochs: int = 5
    mu: float = 1.0
    k_target: float = 1.0
    lambda_schedule: tuple | None = None

    def __post_init__(self):
        if self.mu < 0 or self.k_target <= 0:
            raise ValueError("need mu >= 0 and k_target > 0")
        if not 0.5 <= self.lambda_start <= 1.0:
            raise ValueError("lambda_start must lie in [0.5, 1]")
        if self.lambda_schedule is not None:
            sched = tuple(float(v) for v in self.lambda_schedule)
            if any(b < a for a, b in zip(sched, sched[1:])) or any(not 0.5 <= v <= 1 for v in sched):
                raise ValueError("lambda_schedule must be non-decreasing within [0.5, 1]")
            object.__setattr__(self, "lambda_schedule", sched)

    def lam(self, epoch: int) -> float:
        """Clipping coefficient for a 0-based epoch; 1 beyond the ramp."""
        if not self.enabled:
            return 1.0
        if self.lambda_schedule is not None:
            return self.lambda_schedule[epoch] if epoch < len(self.lambda_schedule) else 1.0
        if epoch >= self.ramp_epochs:
            return 1.0
        return self.lambda_start + (1.0 - self.lambda_start) * epoch / self.ramp_epochs

    @property
    def penalty_weight(self) -> float:
        return self.mu if self.enabled else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda_schedule"] = list(self.lambda_schedule) if self.lambda_schedule else None
        return d


def gradient_penalty(per_sample: Tensor, inputs: Tensor, k_target: float) -> Tensor:
    """``mean_i (||d per_sample_i / d x_i|| - K)^2``, differentiable (second order)."""
    (gx,) = ad.grad(per_sample.sum(), [inputs], create_graph=True)
    flat = gx.reshape(gx.shape[0], -1)
    sq = (flat * flat).sum(axis=1)
    # sqrt has no derivative at 0; nudge exact zeros only
    sq = sq + Tensor((sq.data == 0.0) * 1e-24)
    norms = ad.sqrt(sq)
    dev = norms - k_target
    return (dev * dev).mean()


def smooth_loss(logits: Tensor, labels, inputs: Tensor, cfg: SmoothnessConfig, epoch: int) -> Tensor:
    """Clipped cross-entropy plus the two-sided input-gradient penalty.

    ``logits`` must have been computed from ``inputs`` (a tensor with
    ``requires_grad``) when the penalty is active.  The per-sample
    cross-entropy plays the role of the scalar critic.
    """
    per_sample = ad.cross_entropy(logits, labels, reduction="none")
    lam = cfg.lam(epoch)
    loss = per_sample.mean()
    if lam != 1.0:
        loss = loss * lam
    mu = cfg.penalty_weight
    if mu > 0:
        if not inputs.requires_grad:
            raise ValueError("smooth_loss: inputs must require grad for the gradient penalty")
        loss = loss + mu * gradient_penalty(per_sample, inputs, cfg.k_target)
    return loss


# ---------------------------------------------------------------------------
# expert training


@dataclass(frozen=True)
class OptimizerSettings:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    halve_lr: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class Trajectory:
    """Parameters at initialisation (index 0) and at the end of every epoch."""

    checkpoints: list
    spec: ModelSpec
    meta: dict = field(default_factory=dict)
    diagnostics: MomentumDiagnostics | None = None

    @property
    def epochs(self) -> int:
        return len(self.checkpoints) - 1

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (self.spec == other.spec and len(self.checkpoints) == len(other.checkpoints)
                and all(a == b for a, b in zip(self.checkpoints, other.checkpoints))
                and self.meta == other.meta)


def lr_for_epoch(opt: OptimizerSettings, epoch: int, epochs: int) -> float:
    """The step size is halved once ceil(E/2) epochs have completed."""
    if opt.halve_lr and epoch >= math.ceil(epochs / 2) and epochs > 1:
        return opt.lr * 0.5
    return opt.lr


def train_expert(data: LabeledDataset, spec: ModelSpec, cfg: SmoothnessConfig,
                 opt: OptimizerSettings, epochs: int, seed: int,
                 test: LabeledDataset | None = None, init_seed: int | None = None) -> Trajectory:
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if not 1 <= opt.batch_size <= len(data):
        raise ValueError(f"batch size {opt.batch_size} outside 1..{len(data)}")
    rng = np.random.default_rng(seed)
    params = init_params(spec, seed if init_seed is None else init_seed)
    state = MomentumState.zeros(len(params), opt.momentum, opt.lr)
    checkpoints = [params]
    diag = MomentumDiagnostics()
    metrics = [_epoch_metrics(0, spec, params, data, test, None, None)]
    penalised = cfg.penalty_weight > 0

    for epoch in range(epochs):
        eta = lr_for_epoch(opt, epoch, epochs)
        state = MomentumState(state.v, state.gamma, eta, state.step)
        order = rng.permutation(len(data))
        losses, deltas = [], []
        try:
            for start in range(0, len(order), opt.batch_size):
                idx = order[start:start + opt.batch_size]
                theta = Tensor(params.data, requires_grad=True)
                x = Tensor(data.images[idx], requires_grad=penalised)
                logits = forward(spec, theta, x)
                loss = smooth_loss(logits, data.labels[idx], x, cfg, epoch)
                (g,) = ad.grad(loss, [theta])
                params, state = momentum_step(params, g, state)
                delta = cumulative_term(state.v, g.data, eta)
                deltas.append(delta)
                diag.delta_norms.append(float(np.linalg.norm(delta)))
                losses.append(loss.item())
        except FloatingPointError as exc:
            raise TrainingDivergedError(epoch + 1, str(exc)) from exc
        diag.epsilon.append(alignment_gap(deltas))
        checkpoints.append(params)
        metrics.append(_epoch_metrics(epoch + 1, spec, params, data, test,
                                      float(np.mean(losses)), cfg.lam(epoch)))
        logger.info("epoch %d loss %.4f train %.3f", epoch + 1, metrics[-1]["loss"],
                    metrics[-1]["train_acc"])

    traj = Trajectory(checkpoints, spec, {
        "epochs": epochs,
        "seed": int(seed),
        "optimizer": opt.to_dict(),
        "smoothness": cfg.to_dict(),
        "dataset": data.fingerprint(),
        "metrics": metrics,
    }, diag)
    diag.avg_var = avg_var(traj)
    return traj


def _epoch_metrics(epoch, spec, params, data, test, loss, lam) -> dict:
    row = {"epoch": epoch, "loss": loss, "lambda": lam,
           "train_acc": accuracy(spec, params, data.images, data.labels)}
    if test is not None:
        row["test_acc"] = accuracy(spec, params, test.images, test.labels)
    return row


def _train_job(args):
    return train_expert(*args)


def train_experts(data, spec, cfg, opt, epochs, seeds, test=None, threads: int = 1) -> list:
    """One trajectory per seed; seeds run in separate processes when ``threads > 1``."""
    jobs = [(data, spec, cfg, opt, epochs, s, test) for s in seeds]
    if threads <= 1 or len(jobs) == 1:
        return [_train_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
        return list(pool.map(_train_job, jobs))


def avg_var(traj) -> float:
    """Mean squared L2 distance between consecutive checkpoints."""
    cps = traj.checkpoints if isinstance(traj, Trajectory) else traj
    if len(cps) < 2:
        raise ValueError("avg_var needs at least two checkpoints")
    arrs = [c.data if isinstance(c, ParamVector) else np.asarray(c, dtype=np.float64) for c in cps]
    return float(np.mean([np.sum((a - b) ** 2) for a, b in zip(arrs, arrs[1:])]))


# ---------------------------------------------------------------------------
# persistence


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialise {type(o)}")


def save_trajectory(traj: Trajectory, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {}
    for i, cp in enumerate(traj.checkpoints):
        name = f"epoch_{i:04d}.bin"
        files[name] = storage.write(d / name, cp.layout, cp.data)
    manifest = {
        "format_version": FORMAT_VERSION,
        "spec": traj.spec.to_dict(),
        "meta": traj.meta,
        "files": files,
    }
    if traj.diagnostics is not None:
        manifest["diagnostics"] = asdict(traj.diagnostics)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, default=_json_default))
    return d


def load_trajectory(directory) -> Trajectory:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise TrajectoryFormatError(f"{d}: unreadable manifest ({exc})") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise storage.VersionMismatchError(
            f"{d}: trajectory format {manifest.get('format_version')}, expected {FORMAT_VERSION}")
    spec = ModelSpec.from_dict(manifest["spec"])
    meta = manifest["meta"]
    expected = meta["epochs"] + 1
    files = manifest["files"]
    present = sorted(p.name for p in d.glob("epoch_*.bin"))
    if len(files) != expected or len(present) != expected:
        raise TrajectoryFormatError(
            f"{d}: manifest declares {meta['epochs']} epochs ({expected} checkpoints) "
            f"but {len(present)} checkpoint files exist")
    recs = layout(spec)
    checkpoints = []
    for i in range(expected):
        name = f"epoch_{i:04d}.bin"
        if name not in files or not (d / name).exists():
            raise TrajectoryFormatError(f"{d}: missing {name}")
        got, values = storage.read(d / name, files[name])
        if got != recs:
            raise storage.LayoutMismatchError(f"{d / name}: layout does not match model spec")
        checkpoints.append(ParamVector(values, recs))
    diag = None
    if "diagnostics" in manifest:
        diag = MomentumDiagnostics(**manifest["diagnostics"])
    return Trajectory(checkpoints, spec, meta, diag)
