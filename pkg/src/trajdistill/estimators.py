"""scikit-learn style wrappers around the buffer, distillation and evaluation phases."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, clone
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import buffer as buf
from . import distill as dst
from .datasets import LabeledDataset, SyntheticDataset
from .evaluate import baseline_random_subset, train_on
from .nn import ModelSpec, forward, predict


def _validate(X, y):
    X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
    if X.ndim not in (2, 4):
        raise ValueError(f"expected X of shape (n, features) or (n, c, h, w), got {X.shape}")
    classes, encoded = np.unique(y, return_inverse=True)
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    return X, encoded, classes


def _spec(model: str, depth: int, width: int, X: np.ndarray, n_classes: int) -> ModelSpec:
    kind = model if model != "auto" else ("mlp" if X.ndim == 2 else "convnet")
    return ModelSpec(kind, depth, width, X.shape[1:], n_classes)


class ExpertTrajectoryBuffer(BaseEstimator):
    """Train expert networks and keep their per-epoch parameter checkpoints.

    Parameters
    ----------
    model : {"auto", "mlp", "convnet"}
        ``auto`` picks an MLP for 2-D input and a ConvNet for image batches.
    smooth : bool
        Train with clipped cross-entropy plus the input-gradient penalty.

    Attributes
    ----------
    trajectories_ : list of Trajectory
    avg_var_ : float
        Mean over experts of the mean squared step between checkpoints.
    """

    def __init__(self, model="auto", depth=1, width=32, n_experts=2, epochs=20,
                 learning_rate=0.05, momentum=0.9, batch_size=30, smooth=True, mu=1.0,
                 k_target=1.0, n_jobs=1, random_state=0):
        self.model = model
        self.depth = depth
        self.width = width
        self.n_experts = n_experts
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.smooth = smooth
        self.mu = mu
        self.k_target = k_target
        self.n_jobs = n_jobs
        self.random_state = random_state

    def fit(self, X, y):
        X, enc, classes = _validate(X, y)
        self.classes_ = classes
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.spec_ = _spec(self.model, self.depth, self.width, X, len(classes))
        data = LabeledDataset(X, enc, len(classes))
        cfg = buf.SmoothnessConfig(enabled=self.smooth, mu=self.mu, k_target=self.k_target)
        opt = buf.OptimizerSettings(lr=self.learning_rate, momentum=self.momentum,
                                    batch_size=min(self.batch_size, len(data)))
        seeds = [int(self.random_state) + i for i in range(self.n_experts)]
        self.trajectories_ = buf.train_experts(data, self.spec_, cfg, opt, self.epochs, seeds,
                                               threads=self.n_jobs)
        self.avg_var_ = float(np.mean([buf.avg_var(t) for t in self.trajectories_]))
        return self


class TrajectoryDistiller(BaseEstimator):
    """Learn ``ipc`` synthetic samples per class whose training mimics the experts.

    ``buffer`` may be a fitted :class:`ExpertTrajectoryBuffer` (reused as is)
    or an unfitted one (cloned and fitted on the same data).  ``fit_resample``
    returns the synthetic samples with their original class labels.
    """

    def __init__(self, ipc=1, M=2, N=20, T_plus=2, rho=0.1, vartheta=8.0, balance=True,
                 intermediate=True, beta_mode="equal", alpha0=0.05, outer_iters=200,
                 lr_images=0.01, lr_alpha=1e-3, init="representative", buffer=None,
                 random_state=0):
        self.ipc = ipc
        self.M = M
        self.N = N
        self.T_plus = T_plus
        self.rho = rho
        self.vartheta = vartheta
        self.balance = balance
        self.intermediate = intermediate
        self.beta_mode = beta_mode
        self.alpha0 = alpha0
        self.outer_iters = outer_iters
        self.lr_images = lr_images
        self.lr_alpha = lr_alpha
        self.init = init
        self.buffer = buffer
        self.random_state = random_state

    def _config(self) -> dst.DistillConfig:
        return dst.DistillConfig(M=self.M, N=self.N, T_plus=self.T_plus, ipc=self.ipc,
                                 beta_mode=self.beta_mode, rho=self.rho, vartheta=self.vartheta,
                                 alpha0=self.alpha0, outer_iters=self.outer_iters,
                                 lr_images=self.lr_images, lr_alpha=self.lr_alpha,
                                 seed=int(self.random_state), intermediate=self.intermediate,
                                 balance=self.balance)

    def fit(self, X, y):
        if self.init not in ("representative", "random"):
            raise ValueError(f"init must be 'representative' or 'random', got {self.init!r}")
        X, enc, classes = _validate(X, y)
        cfg = self._config()
        buffer = self.buffer
        if buffer is None:
            buffer = ExpertTrajectoryBuffer(random_state=self.random_state)
        try:
            check_is_fitted(buffer, "trajectories_")
        except NotFittedError:
            self.buffer_ = clone(buffer).fit(X, y)
        else:
            if not np.array_equal(buffer.classes_, classes):
                raise ValueError("the fitted buffer was trained on different classes")
            self.buffer_ = buffer
        trajs = self.buffer_.trajectories_
        data = LabeledDataset(X, enc, len(classes))
        if self.init == "representative":
            syn = dst.representative_init(data, trajs[0], self.ipc, int(self.random_state),
                                          self.alpha0)
        else:
            syn = baseline_random_subset(data, self.ipc, int(self.random_state), self.alpha0)
        self.synthetic_, self.log_ = dst.run_distillation(trajs, syn, cfg)
        self.classes_ = classes
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.images_ = self.synthetic_.images
        self.labels_ = classes[self.synthetic_.labels]
        self.alpha_ = self.synthetic_.alpha
        return self

    def fit_resample(self, X, y):
        self.fit(X, y)
        return self.images_.copy(), self.labels_.copy()


class SyntheticSetClassifier(ClassifierMixin, BaseEstimator):
    """A network trained from scratch on a (small) training set.

    Without ``distiller`` the network is trained on ``X, y`` directly with
    ``learning_rate``.  With a :class:`TrajectoryDistiller`, ``fit`` first
    distils ``X, y`` and trains on the synthetic set at its learned step size.
    """

    def __init__(self, model="auto", depth=1, width=32, learning_rate=0.05, iters=1000,
                 halve_at=-1, distiller=None, random_state=0):
        self.model = model
        self.depth = depth
        self.width = width
        self.learning_rate = learning_rate
        self.iters = iters
        self.halve_at = halve_at
        self.distiller = distiller
        self.random_state = random_state

    def fit(self, X, y):
        X, enc, classes = _validate(X, y)
        lr = self.learning_rate
        if self.distiller is not None:
            self.distiller_ = clone(self.distiller).fit(X, y)
            syn: SyntheticDataset = self.distiller_.synthetic_
            X, enc, lr = syn.images, syn.labels, syn.alpha
        self.classes_ = classes
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.spec_ = _spec(self.model, self.depth, self.width, X, len(classes))
        halve = self.iters // 2 if self.halve_at == -1 else self.halve_at
        self.params_ = train_on(X, enc, self.spec_, int(self.random_state), self.iters, lr, halve)
        return self

    def _check(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if X.shape[1:] != self.spec_.input_shape:
            raise ValueError(f"expected samples of shape {self.spec_.input_shape}, got {X.shape[1:]}")
        return X

    def predict_proba(self, X):
        X = self._check(X)
        logits = forward(self.spec_, self.params_, X).data
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        X = self._check(X)
        return self.classes_[predict(self.spec_, self.params_, X)]
