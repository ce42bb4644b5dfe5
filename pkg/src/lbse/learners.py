"""Linear regression and nearest-neighbour predictors used by the pipelines."""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

SIGMA_FLOOR = 1e-6


class RankDeficiencyWarning(UserWarning):
    pass


@dataclass(frozen=True)
class LinearModel:
    """``y = weights @ x + intercept`` for every output row."""

    weights: np.ndarray          # outputs x features
    intercept: np.ndarray        # outputs
    residual_sigma: np.ndarray   # outputs, training-residual std (floored)
    feature_names: tuple[str, ...] = ()
    output_names: tuple[str, ...] = ()
    train_mse: np.ndarray | None = None
    train_residual_mean: np.ndarray | None = None

    @property
    def n_features(self) -> int:
        return self.weights.shape[1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        feats = list(self.feature_names) or [f"x{k}" for k in range(self.n_features)]
        outs = list(self.output_names) or [f"y{k}" for k in range(len(self.intercept))]
        w.writerow(["output", "intercept", *feats, "residual_sigma"])
        for k, name in enumerate(outs):
            w.writerow([name, repr(float(self.intercept[k])),
                        *(repr(float(c)) for c in self.weights[k]),
                        repr(float(self.residual_sigma[k]))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "LinearModel":
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        feats = tuple(header[2:-1])
        arr = np.array([[float(x) for x in r[1:]] for r in body])
        return cls(weights=arr[:, 1:-1], intercept=arr[:, 0], residual_sigma=arr[:, -1],
                   feature_names=feats, output_names=tuple(r[0] for r in body))


def fit_linear(X: np.ndarray, Y: np.ndarray, feature_names: Sequence[str] = (),
               output_names: Sequence[str] = (), sigma_floor: float = SIGMA_FLOOR) -> LinearModel:
    """Ordinary least squares with intercept, one independent fit per output column.

    The problem is solved on centered data by an SVD-based least-squares
    routine; rank-deficient designs get the minimal-norm coefficients and a
    :class:`RankDeficiencyWarning`.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    k, p = X.shape
    if k <= p + 1:
        raise ValueError(f"need more than {p + 1} instances for {p} features, got {k}")
    x_mean = X.mean(axis=0)
    y_mean = Y.mean(axis=0)
    Xc = X - x_mean
    coef, _, rank, _ = np.linalg.lstsq(Xc, Y - y_mean, rcond=None)
    if rank < p:
        warnings.warn(f"design matrix rank {rank} < {p} features; using minimal-norm solution",
                      RankDeficiencyWarning, stacklevel=2)
    W = coef.T
    c = y_mean - W @ x_mean
    resid = Y - (X @ W.T + c)
    return LinearModel(weights=W, intercept=c,
                       residual_sigma=np.maximum(resid.std(axis=0), sigma_floor),
                       feature_names=tuple(feature_names), output_names=tuple(output_names),
                       train_mse=np.mean(resid ** 2, axis=0),
                       train_residual_mean=resid.mean(axis=0))


def predict(model: LinearModel, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=float)
    if features.shape[-1] != model.n_features:
        raise ValueError(f"expected {model.n_features} features, got {features.shape[-1]}")
    return features @ model.weights.T + model.intercept


def knn_predict(train_z_a: np.ndarray, train_targets: np.ndarray, query_z_a: np.ndarray,
                k: int, standardize: bool = False, chunk: int = 512) -> np.ndarray:
    """Unweighted mean target of the ``k`` nearest training rows (Euclidean distance).

    ``query_z_a`` may be one vector or a matrix of queries.
    """
    train = np.asarray(train_z_a, dtype=float)
    targets = np.asarray(train_targets, dtype=float)
    if train.shape[0] == 0:
        raise ValueError("empty training set")
    if not 1 <= k <= train.shape[0]:
        raise ValueError(f"k={k} outside 1..{train.shape[0]}")
    query = np.asarray(query_z_a, dtype=float)
    single = query.ndim == 1
    query = np.atleast_2d(query)
    if standardize:
        mu, sd = train.mean(axis=0), train.std(axis=0)
        sd[sd == 0] = 1.0
        train, query = (train - mu) / sd, (query - mu) / sd
    sq_train = np.einsum("ij,ij->i", train, train)
    out = np.empty((query.shape[0],) + targets.shape[1:])
    for start in range(0, query.shape[0], chunk):
        q = query[start:start + chunk]
        d2 = sq_train[None, :] - 2.0 * q @ train.T + np.einsum("ij,ij->i", q, q)[:, None]
        if k == train.shape[0]:
            nearest = np.broadcast_to(np.arange(k), (q.shape[0], k))
        else:
            nearest = np.argpartition(d2, k - 1, axis=1)[:, :k]
        out[start:start + chunk] = targets[nearest].mean(axis=1)
    return out[0] if single else out


PLAIN = "plain"
ENHANCED = "enhanced"


def assemble_features(z_a: np.ndarray, mode: str,
                      pseudo: Callable[[np.ndarray], np.ndarray | None] | None = None) -> np.ndarray | None:
    """Feature vector for one instance.

    ``pseudo`` maps ``z_a`` to the delayed values implied by the unobservable
    estimate (``None`` when that solve did not converge, in which case the
    instance has no enhanced features and ``None`` is returned).
    """
    z_a = np.asarray(z_a, dtype=float)
    if mode == PLAIN:
        return z_a
    if mode != ENHANCED:
        raise ValueError(f"unknown feature mode {mode!r}")
    if pseudo is None:
        raise ValueError("enhanced features need an unobservable-estimate callback")
    extra = pseudo(z_a)
    if extra is None:
        return None
    return np.concatenate([z_a, np.asarray(extra, dtype=float)])
