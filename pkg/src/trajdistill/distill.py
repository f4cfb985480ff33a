"""Synthetic-set learning by aligning student parameters with expert trajectories."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .buffer import Trajectory
from .datasets import AugmentationPolicy, LabeledDataset, SyntheticDataset, augment
from .nn import ModelSpec, ParamVector, features, filter_slices, forward

logger = logging.getLogger(__name__)


class DistillationAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class DistillConfig:
    M: int = 2
    N: int = 10
    T_plus: int = 8
    ipc: int = 1
    beta_mode: str = "equal"
    rho: float = 0.1
    vartheta: float = 8.0
    alpha0: float = 0.01
    outer_iters: int = 200
    lr_images: float = 10.0
    lr_alpha: float = 1e-4
    policy: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    seed: int = 0
    intermediate: bool = True
    balance: bool = True
    syn_batch: int = 0
    alpha_floor: float = 1e-6
    max_skip_fraction: float = 0.1

    def __post_init__(self):
        if not 1 <= self.M <= self.N:
            raise ValueError(f"need 1 <= M <= N, got M={self.M}, N={self.N}")
        if self.T_plus < 0 or self.ipc < 1 or self.outer_iters < 0:
            raise ValueError("T_plus, ipc and outer_iters must be non-negative (ipc >= 1)")
        if self.rho < 0:
            raise ValueError("rho must be >= 0")
        if self.vartheta <= 1:
            raise ValueError("vartheta must exceed 1 so that the log stays positive")
        if self.alpha0 <= 0:
            raise ValueError("alpha0 must be positive")
        if self.beta_mode not in ("equal", "scaled"):
            raise ValueError(f"unknown beta_mode {self.beta_mode!r}")

    def check_trajectory(self, traj: Trajectory) -> None:
        if self.T_plus + self.M > traj.epochs:
            raise ValueError(
                f"T_plus + M = {self.T_plus + self.M} exceeds the {traj.epochs} expert epochs")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["policy"] = self.policy.to_dict()
        return d


# ---------------------------------------------------------------------------
# schedules and coefficients


@dataclass(frozen=True)
class MatchSchedule:
    xi: tuple
    expert_offsets: tuple

    def __len__(self) -> int:
        return len(self.xi)


def match_schedule(N: int, M: int, intermediate: bool = True) -> MatchSchedule:
    """Student steps ``floor(i*N/M)`` for i < M plus the terminal step N."""
    if not 1 <= M <= N:
        raise ValueError(f"need 1 <= M <= N, got M={M}, N={N}")
    if not intermediate:
        return MatchSchedule((N,), (M,))
    xi = tuple((i * N) // M for i in range(1, M)) + (N,)
    return MatchSchedule(xi, tuple(range(1, M + 1)))


def beta_weights(schedule: MatchSchedule, M: int, mode: str = "equal") -> np.ndarray:
    if mode == "equal":
        return np.ones(len(schedule))
    return np.array(schedule.expert_offsets, dtype=np.float64) / M


def balance_coefficient(start: float, T_plus: float, vartheta: float = 8.0) -> float:
    """Loss scale for a start epoch: damp early starts, boost late ones."""
    middle = T_plus / 2
    if start >= middle:
        return math.log(abs(start - middle) + vartheta)
    return 1.0 / math.log(abs(middle - start) + vartheta)


def inner_loss_profile(syn: SyntheticDataset, traj: Trajectory, T_plus: int,
                       vartheta: float = 8.0) -> list:
    """Plain and balanced inner loss of ``syn`` at every start epoch 0..T_plus."""
    rows = []
    with ad.no_grad():
        for t in range(T_plus + 1):
            raw = ad.cross_entropy(forward(traj.spec, traj.checkpoints[t], syn.images),
                                   syn.labels).item()
            nu = balance_coefficient(t, T_plus, vartheta)
            rows.append({"start": t, "nu": nu, "raw": raw, "balanced": nu * raw})
    return rows


def spread_ratio(values) -> float:
    """max/min of positive values (1 means perfectly level)."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.max() / v.min())


# ---------------------------------------------------------------------------
# representative initialisation


def kmeans(points, K: int, seed: int = 0, max_iters: int = 100, n_init: int = 4):
    """Lloyd's algorithm with k-means++ seeding; returns ``(centroids, assignments)``.

    The best of ``n_init`` seeded runs (lowest inertia) is kept.  A cluster that
    empties is reseeded at the point farthest from its current centroid.
    """
    X = np.asarray(points, dtype=np.float64)
    n = len(X)
    if n < K:
        raise ValueError(f"kmeans: {n} points cannot form {K} clusters")
    if K < 1:
        raise ValueError("kmeans: K must be >= 1")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        C, a = _lloyd(X, _plusplus(X, K, rng), max_iters)
        score = inertia(X, C, a)
        if best is None or score < best[0]:
            best = (score, C, a)
    return best[1], best[2]


def _sq_dists(X, C):
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def _plusplus(X, K, rng):
    n = len(X)
    chosen = [int(rng.integers(n))]
    for _ in range(1, K):
        d2 = _sq_dists(X, X[chosen]).min(axis=1)
        d2[chosen] = 0.0
        total = d2.sum()
        if total > 0:
            chosen.append(int(rng.choice(n, p=d2 / total)))
        else:
            rest = np.setdiff1d(np.arange(n), chosen)
            chosen.append(int(rng.choice(rest)))
    return X[chosen].copy()


def _lloyd(X, C, max_iters):
    assign = None
    for _ in range(max_iters):
        d2 = _sq_dists(X, C)
        new = d2.argmin(axis=1)
        for k in range(len(C)):
            if not np.any(new == k):
                # take the worst-fitting point from a cluster that can spare it
                own = d2[np.arange(len(X)), new].copy()
                own[np.bincount(new, minlength=len(C))[new] < 2] = -1.0
                far = int(own.argmax())
                new[far] = k
                d2[far, k] = 0.0
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        C = np.stack([X[assign == k].mean(axis=0) for k in range(len(C))])
    return C, assign


def inertia(points, centroids, assignments) -> float:
    X = np.asarray(points, dtype=np.float64)
    return float(((X - np.asarray(centroids)[assignments]) ** 2).sum())


def cluster_plan(ipc: int) -> tuple:
    """(clusters, picks per cluster); large ipc uses 10 clusters with several picks each."""
    if ipc >= 50 and ipc % 10 == 0:
        return 10, ipc // 10
    return ipc, 1


def select_representatives(feats, ipc: int, seed: int = 0) -> np.ndarray:
    """Indices of the samples nearest to each k-means centroid (no repeats)."""
    X = np.asarray(feats, dtype=np.float64)
    k, per = cluster_plan(ipc)
    C, assign = kmeans(X, k, seed)
    groups = []
    for j in range(k):
        members = np.flatnonzero(assign == j)
        order = members[np.argsort(((X[members] - C[j]) ** 2).sum(axis=1), kind="stable")]
        groups.append(order[:per].tolist())
    # clusters are disjoint, so own members never collide; top up small ones afterwards
    for j, group in enumerate(groups):
        short = per - len(group)
        if short:
            taken = [i for g in groups for i in g]
            rest = np.setdiff1d(np.arange(len(X)), taken)
            near = rest[np.argsort(((X[rest] - C[j]) ** 2).sum(axis=1), kind="stable")]
            group.extend(near[:short].tolist())
    return np.array([i for g in groups for i in g], dtype=np.int64)


def representative_init(data: LabeledDataset, traj: Trajectory, ipc: int, seed: int = 0,
                        alpha0: float = 0.01) -> SyntheticDataset:
    """Per class, real samples nearest to k-means centroids of final-expert features."""
    short = [c for c in range(data.class_count) if len(data.class_indices(c)) < ipc]
    if short:
        raise ValueError(f"classes with fewer than ipc={ipc} samples: {short}")
    params = traj.checkpoints[-1]
    images, labels = [], []
    for c in range(data.class_count):
        idx = data.class_indices(c)
        feats = features(traj.spec, params, data.images[idx])
        chosen = idx[select_representatives(feats, ipc, seed + c)]
        images.append(data.images[chosen])
        labels.extend([c] * ipc)
    return SyntheticDataset(np.concatenate(images), np.array(labels), alpha0, data.class_count)


# ---------------------------------------------------------------------------
# losses and perturbation


def inner_loss(syn_batch, labels, student, spec: ModelSpec, policy: AugmentationPolicy,
               step_seed, nu: float) -> Tensor:
    """``nu`` times the cross-entropy of the student on augmented synthetic samples."""
    x = augment(syn_batch, policy, step_seed)
    loss = ad.cross_entropy(forward(spec, student, x), labels)
    return loss if nu == 1.0 else loss * nu


def matching_loss(student, expert_start, expert_target) -> Tensor:
    """``||student - target||^2 / ||start - target||^2``."""
    start = np.asarray(getattr(expert_start, "data", expert_start), dtype=np.float64)
    target = np.asarray(getattr(expert_target, "data", expert_target), dtype=np.float64)
    denom = float(np.sum((start - target) ** 2))
    if denom == 0.0:
        raise ValueError("degenerate expert segment")
    if isinstance(student, ParamVector):
        student = Tensor(student.data)
    student = ad.as_tensor(student)
    return ad.squared_distance(student, Tensor(target)) / denom


def perturb_weights(theta: ParamVector, rho: float, seed) -> ParamVector:
    """Add ``rho`` times Gaussian noise rescaled to each filter's Frobenius norm."""
    if rho < 0:
        raise ValueError("rho must be >= 0")
    if rho == 0:
        return theta
    rng = np.random.default_rng(seed)
    d = rng.standard_normal(len(theta))
    for idx in filter_slices(theta.layout):
        target = np.linalg.norm(theta.data[idx])
        norm = np.linalg.norm(d[idx])
        if target == 0.0 or norm == 0.0:
            logger.debug("zero-norm filter; left unperturbed")
            d[idx] = 0.0
        else:
            d[idx] *= target / norm
    return theta.with_data(theta.data + rho * d)


# ---------------------------------------------------------------------------
# one outer iteration


@dataclass
class SegmentPlan:
    """Everything random about one outer iteration, drawn up front."""

    trajectory: int
    start: int
    perturb_seed: int
    step_seeds: tuple
    batches: tuple | None = None


def plan_iteration(cfg: DistillConfig, n_traj: int, n_syn: int, iteration: int) -> SegmentPlan:
    rng = np.random.default_rng([cfg.seed, iteration])
    traj = int(rng.integers(n_traj))
    start = int(rng.integers(cfg.T_plus + 1))
    perturb_seed = int(rng.integers(2**31))
    step_seeds = tuple(int(s) for s in rng.integers(2**31, size=cfg.N))
    batches = None
    if cfg.syn_batch and cfg.syn_batch < n_syn:
        batches = tuple(np.sort(rng.choice(n_syn, cfg.syn_batch, replace=False)) for _ in range(cfg.N))
    return SegmentPlan(traj, start, perturb_seed, step_seeds, batches)


def segment_loss(images: Tensor, alpha: Tensor, labels, traj: Trajectory, plan: SegmentPlan,
                 cfg: DistillConfig, nu: float | None = None):
    """Unroll the student from a (perturbed) expert checkpoint and return ``(L, info)``.

    ``L`` is the beta-weighted sum of matching losses and stays differentiable
    with respect to ``images`` and ``alpha``.
    """
    spec = traj.spec
    t = plan.start
    if nu is None:
        nu = balance_coefficient(t, cfg.T_plus, cfg.vartheta) if cfg.balance else 1.0
    start = traj.checkpoints[t]
    theta0 = perturb_weights(start, cfg.rho, plan.perturb_seed)
    schedule = match_schedule(cfg.N, cfg.M, cfg.intermediate)
    betas = beta_weights(schedule, cfg.M, cfg.beta_mode)
    student = Tensor(theta0.data, requires_grad=True)
    labels = np.asarray(labels)
    matches, inner = [], []
    total = None
    for n in range(1, cfg.N + 1):
        if plan.batches is not None:
            idx = plan.batches[n - 1]
            x, y = images[idx], labels[idx]
        else:
            x, y = images, labels
        loss = inner_loss(x, y, student, spec, cfg.policy, plan.step_seeds[n - 1], nu)
        inner.append(loss.item())
        (g,) = ad.grad(loss, [student], create_graph=True)
        student = student - alpha * g
        if n in schedule.xi:
            i = schedule.xi.index(n)
            target = traj.checkpoints[t + schedule.expert_offsets[i]]
            term = matching_loss(student, start, target)
            matches.append(term.item())
            weighted = term * betas[i]
            total = weighted if total is None else total + weighted
    info = {"nu": nu, "matches": matches, "inner": inner}
    return total, info


def _consistent(trajectories) -> ModelSpec:
    specs = {t.spec for t in trajectories}
    if len(specs) != 1:
        raise ValueError("trajectories do not share one model spec")
    return specs.pop()


def run_distillation(trajectories, syn: SyntheticDataset, cfg: DistillConfig, callback=None):
    """Outer loop; returns the learned synthetic set and one log row per iteration.

    ``callback(iteration, syn)`` runs after every outer update when given.
    """
    if not trajectories:
        raise ValueError("no expert trajectories")
    _consistent(trajectories)
    for traj in trajectories:
        cfg.check_trajectory(traj)
    images = np.array(syn.images)
    alpha = syn.alpha
    log = []
    skipped = 0
    for it in range(cfg.outer_iters):
        plan = plan_iteration(cfg, len(trajectories), len(images), it)
        row = {"iteration": it, "trajectory": plan.trajectory, "start_epoch": plan.start}
        img_t = Tensor(images, requires_grad=True)
        alpha_t = Tensor(alpha, requires_grad=True)
        try:
            total, info = segment_loss(img_t, alpha_t, syn.labels, trajectories[plan.trajectory],
                                       plan, cfg)
            g_img, g_alpha = ad.grad(total, [img_t, alpha_t])
            ok = np.isfinite(g_img.data).all() and np.isfinite(g_alpha.data).all()
        except NonFiniteError as exc:
            logger.warning("iteration %d skipped: %s", it, exc)
            ok, info, total = False, None, None
        if not ok:
            skipped += 1
            row.update(skipped=1, alpha=alpha)
            log.append(row)
            if skipped > cfg.max_skip_fraction * max(it + 1, 10):
                raise DistillationAborted(
                    f"{skipped} of {it + 1} outer iterations had non-finite meta-gradients")
            continue
        images = np.clip(images - cfg.lr_images * g_img.data, 0.0, 1.0)
        alpha = max(alpha - cfg.lr_alpha * float(g_alpha.data), cfg.alpha_floor)
        row.update(nu=info["nu"], loss=total.item(), alpha=alpha,
                   grad_norm_images=float(np.linalg.norm(g_img.data)),
                   grad_norm_alpha=float(abs(g_alpha.data)),
                   inner_first=info["inner"][0], inner_last=info["inner"][-1], skipped=0)
        for i, m in enumerate(info["matches"], 1):
            row[f"match_{i}"] = m
        log.append(row)
        if callback is not None:
            callback(it, syn.replace(images=images, alpha=alpha))
    return syn.replace(images=images, alpha=alpha), log
