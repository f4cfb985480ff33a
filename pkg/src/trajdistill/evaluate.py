"""Train-from-scratch evaluation of synthetic sets, and the random-subset baseline."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datasets import AugmentationPolicy, LabeledDataset, SyntheticDataset, augment
from .nn import ModelSpec, accuracy, forward, init_params


@dataclass
class EvalReport:
    seeds: list
    accuracies: list
    iters: int
    spec: dict
    tag: str = ""
    diverged: list = field(default_factory=list)

    @property
    def valid(self) -> list:
        return [a for a in self.accuracies if not math.isnan(a)]

    @property
    def mean(self) -> float:
        v = self.valid
        return float(np.mean(v)) if v else float("nan")

    @property
    def std(self) -> float:
        v = self.valid
        return float(np.std(v)) if v else float("nan")

    def to_dict(self) -> dict:
        return {
            "tag": self.tag,
            "seeds": list(self.seeds),
            "accuracies": [None if math.isnan(a) else a for a in self.accuracies],
            "mean": self.mean,
            "std": self.std,
            "iters": self.iters,
            "spec": self.spec,
            "diverged": list(self.diverged),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def csv_rows(self, artifact: str) -> list:
        return [{"artifact": artifact, "tag": self.tag, "seed": s, "accuracy": a}
                for s, a in zip(self.seeds, self.accuracies)]

    def to_csv(self, artifact: str) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["artifact", "tag", "seed", "accuracy"])
        writer.writeheader()
        writer.writerows(self.csv_rows(artifact))
        return buf.getvalue()


def train_on(images, labels, spec: ModelSpec, seed: int, iters: int, lr: float,
             halve_at: int | None = None, policy: AugmentationPolicy | None = None,
             batch_size: int = 256):
    """Plain SGD from a fresh initialisation; returns the final ParamVector."""
    params = init_params(spec, seed)
    rng = np.random.default_rng([seed, 1])
    policy = policy or AugmentationPolicy()
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    for step in range(iters):
        step_lr = lr * 0.5 if halve_at is not None and step >= halve_at else lr
        if len(images) > batch_size:
            idx = rng.choice(len(images), batch_size, replace=False)
            x, y = images[idx], labels[idx]
        else:
            x, y = images, labels
        theta = Tensor(params.data, requires_grad=True)
        xa = augment(x, policy, int(rng.integers(2**31)))
        (g,) = ad.grad(ad.cross_entropy(forward(spec, theta, xa), y), [theta])
        params = params.with_data(params.data - step_lr * g.data)
    return params


def evaluate(syn, spec: ModelSpec, test: LabeledDataset, seeds=(0, 1, 2), iters: int = 300,
             lr: float | None = None, halve_at: int | None = -1,
             policy: AugmentationPolicy | None = None, tag: str = "") -> EvalReport:
    """Train one network per seed on ``syn`` and report test accuracy.

    ``lr`` defaults to the synthetic set's learned step size.  ``halve_at=-1``
    halves the rate at the midpoint; ``None`` keeps it fixed.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if lr is None:
        if not isinstance(syn, SyntheticDataset):
            raise ValueError("lr is required for a plain labelled dataset")
        lr = syn.alpha
    if halve_at == -1:
        halve_at = iters // 2
    accs, diverged = [], []
    for s in seeds:
        try:
            params = train_on(syn.images, syn.labels, spec, s, iters, lr, halve_at, policy)
            accs.append(accuracy(spec, params, test.images, test.labels))
        except FloatingPointError:
            accs.append(float("nan"))
            diverged.append(s)
    return EvalReport(list(seeds), accs, iters, spec.to_dict(), tag, diverged)


def baseline_random_subset(data: LabeledDataset, ipc: int, seed: int,
                           alpha: float = 0.01) -> SyntheticDataset:
    """``ipc`` samples per class drawn uniformly without replacement."""
    rng = np.random.default_rng(seed)
    short = [c for c in range(data.class_count) if len(data.class_indices(c)) < ipc]
    if short:
        raise ValueError(f"classes with fewer than ipc={ipc} samples: {short}")
    idx = np.concatenate([rng.choice(data.class_indices(c), ipc, replace=False)
                          for c in range(data.class_count)])
    return SyntheticDataset(data.images[idx], data.labels[idx], alpha, data.class_count)
