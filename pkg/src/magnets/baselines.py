"""Reference predictors: constant mean, linear models on flattened series, and a CNN.

The CNN reuses the mask generator's encoder (same depth and widths), pools over
time and applies one linear output, so its capacity matches the masking
network. :func:`integrated_gradients` explains any differentiable predictor.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import TimeSeriesDataset
from .metrics import normalize_attribution
from .model import encoder_forward, encoder_param_shapes, init_conv_params, read_checkpoint, \
    write_checkpoint, CheckpointError
from .training import TrainConfig, train


class SingularSystemError(np.linalg.LinAlgError):
    pass


class LassoConvergenceWarning(UserWarning):
    pass


# ---------------------------------------------------------------- mean


@dataclass
class MeanModel:
    value: float

    def predict(self, x) -> np.ndarray:
        return np.full(len(x), self.value)


def fit_mean(y_train) -> MeanModel:
    y_train = np.asarray(y_train, dtype=float)
    if y_train.size == 0:
        raise ValueError("empty training set")
    return MeanModel(float(y_train.mean()))


# ---------------------------------------------------------------- linear


@dataclass
class LinearBaselineModel:
    weights: np.ndarray  # [C*T], on standardized columns
    intercept: float
    regularization: str = "none"
    lam: float = 0.0
    col_mean: np.ndarray | None = None
    col_std: np.ndarray | None = None
    history: list = field(default_factory=list)
    residual: float = 0.0

    def design(self, x) -> np.ndarray:
        flat = np.asarray(x, dtype=float).reshape(len(x), -1)
        if self.col_mean is None:
            return flat
        return (flat - self.col_mean) / self.col_std

    def predict(self, x) -> np.ndarray:
        return self.intercept + self.design(x) @ self.weights


def _standardize_columns(x):
    flat = np.asarray(x, dtype=float).reshape(len(x), -1)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return (flat - mean) / std, mean, std


def fit_ols(x, y, standardize: bool = True) -> LinearBaselineModel:
    """Least squares with intercept; rank-deficient designs are rejected."""
    y = np.asarray(y, dtype=float)
    if len(y) < 1:
        raise ValueError("empty training set")
    if standardize:
        X, mean, std = _standardize_columns(x)
    else:
        X, mean, std = np.asarray(x, dtype=float).reshape(len(x), -1), None, None
    A = np.hstack([np.ones((len(X), 1)), X])
    coef, _, rank, _ = np.linalg.lstsq(A, y, rcond=None)
    if rank < A.shape[1]:
        raise SingularSystemError(
            f"design matrix has rank {rank} < {A.shape[1]} columns; use ridge regression instead")
    return LinearBaselineModel(coef[1:], float(coef[0]), "none", 0.0, mean, std)


def fit_ridge(x, y, lam: float = 1.0, standardize: bool = True) -> LinearBaselineModel:
    """Solve ``(X^T X + lam I) w = X^T (y - mean y)`` on centred columns; intercept unpenalized."""
    y = np.asarray(y, dtype=float)
    if len(y) < 1:
        raise ValueError("empty training set")
    if standardize:
        X, mean, std = _standardize_columns(x)
    else:
        flat = np.asarray(x, dtype=float).reshape(len(x), -1)
        mean, std = flat.mean(axis=0), np.ones(flat.shape[1])
        X = flat - mean
    yc = y - y.mean()
    gram = X.T @ X + lam * np.eye(X.shape[1])
    try:
        w = np.linalg.solve(gram, X.T @ yc)
    except np.linalg.LinAlgError as err:
        raise SingularSystemError("ridge system is singular; increase lambda") from err
    return LinearBaselineModel(w, float(y.mean()), "ridge", lam, mean, std)


def soft_threshold(v, lam):
    return np.sign(v) * np.maximum(np.abs(v) - lam, 0.0)


def lasso_objective(X, y, w, intercept, lam) -> float:
    r = y - intercept - X @ w
    return float(0.5 * np.mean(r ** 2) + lam * np.abs(w).sum())


def fit_lasso(x, y, lam: float = 1.0, tol: float = 1e-6, max_sweeps: int = 1000,
              standardize: bool = True, track: bool = False) -> LinearBaselineModel:
    """Cyclic coordinate descent on ``(1/2n)||y - b - Xw||^2 + lam ||w||_1``.

    Works on the Gram matrix, so each sweep costs O(p^2). Stops when no
    coefficient moves by more than ``tol`` in a sweep.
    """
    y = np.asarray(y, dtype=float)
    n = len(y)
    if n < 1:
        raise ValueError("empty training set")
    if standardize:
        X, mean, std = _standardize_columns(x)
    else:
        X, mean, std = np.asarray(x, dtype=float).reshape(n, -1), None, None
    x_bar = X.mean(axis=0)
    Xc = X - x_bar
    yc = y - y.mean()
    G = Xc.T @ Xc / n
    c = Xc.T @ yc / n
    diag = np.diag(G).copy()
    p = len(c)
    w = np.zeros(p)
    corr = c.copy()  # c - G w, kept in sync
    history = []
    converged = False
    for _ in range(max_sweeps):
        biggest = 0.0
        for j in range(p):
            if diag[j] == 0:
                continue
            old = w[j]
            new = soft_threshold(corr[j] + diag[j] * old, lam) / diag[j]
            if new != old:
                corr -= G[:, j] * (new - old)
                w[j] = new
                biggest = max(biggest, abs(new - old))
        if track:
            history.append(lasso_objective(Xc, yc, w, 0.0, lam))
        if biggest < tol:
            converged = True
            break
    # KKT residual: |c_j - (Gw)_j| <= lam off the support, == lam * sign on it
    kkt = np.where(w != 0, np.abs(corr - lam * np.sign(w)), np.maximum(np.abs(corr) - lam, 0.0))
    residual = float(kkt.max()) if p else 0.0
    if not converged:
        warnings.warn(f"lasso did not converge in {max_sweeps} sweeps; KKT residual {residual:.3g}",
                      LassoConvergenceWarning, stacklevel=2)
    intercept = float(y.mean() - x_bar @ w)
    return LinearBaselineModel(w, intercept, "lasso", lam, mean, std, history, residual)


# ---------------------------------------------------------------- CNN


def cnn_param_shapes(channels: int, widths) -> dict[str, tuple]:
    shapes = encoder_param_shapes(channels, widths)
    shapes["head.w"] = (widths[-1],)
    shapes["head.b"] = ()
    return shapes


@dataclass
class CnnConfig:
    channels: int
    length: int
    widths: list[int] = field(default_factory=lambda: [32, 64, 128])


class CnnBaselineModel:
    """Encoder -> global average pool over time -> linear output."""

    def __init__(self, config: CnnConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: CnnConfig, seed: int = 0) -> "CnnBaselineModel":
        rng = np.random.default_rng(seed)
        shapes = cnn_param_shapes(config.channels, config.widths)
        params = init_conv_params({k: v for k, v in shapes.items() if not k.startswith("head")}, rng)
        params["head.w"] = Tensor(_head_init(rng, config.widths[-1]), True, "head.w")
        params["head.b"] = Tensor(np.zeros(()), True, "head.b")
        return cls(config, params)

    def n_params(self) -> int:
        return int(np.sum([p.size for p in self.params.values()]))

    def forward(self, x: Tensor) -> Tensor:
        h, _ = encoder_forward(self.params, x)
        pooled = ad.scale(ad.sum(h, axis=2), 1.0 / h.shape[2])
        return ad.linear(pooled, self.params["head.w"], self.params["head.b"])

    def loss(self, x, y, rng=None, valid=None):
        y_hat = self.forward(Tensor(x))
        mse = ad.mean(ad.square(ad.sub(y_hat, Tensor(y))))
        return mse, {"train_mse": mse.item()}

    def predict(self, x, valid=None, batch: int = 256) -> np.ndarray:
        out = [self.forward(Tensor(x[i:i + batch])).data for i in range(0, len(x), batch)]
        return np.concatenate(out) if out else np.zeros(0)

    def save(self, path, extra: dict | None = None) -> None:
        write_checkpoint(path, "cnn", asdict(self.config), self.params, extra)


def _head_init(rng, fan_in):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=fan_in)


def load_cnn(path) -> tuple[CnnBaselineModel, dict]:
    header, params = read_checkpoint(path)
    if header["kind"] != "cnn":
        raise CheckpointError(f"expected a cnn checkpoint, got {header['kind']!r}")
    return CnnBaselineModel(CnnConfig(**header["config"]), params), header.get("extra", {})


def train_cnn(train_ds: TimeSeriesDataset, test_ds: TimeSeriesDataset | None, cfg: TrainConfig,
              widths=(32, 64, 128), **kw):
    model = CnnBaselineModel.init(CnnConfig(train_ds.c, train_ds.t, list(widths)), seed=cfg.seed)
    return train(model, train_ds, test_ds, cfg, **kw)


# ---------------------------------------------------------------- attributions


def integrated_gradients(f, x: np.ndarray, baseline: np.ndarray | None = None,
                         steps: int = 50) -> np.ndarray:
    """Path-integrated gradients of scalar predictor ``f`` for one input ``x``.

    ``f`` maps a Tensor batch [B, ...] to predictions [B]. Gradients are taken at
    ``baseline + (i / steps) (x - baseline)`` for i = 1..steps and averaged
    (right-endpoint Riemann sum), then multiplied by ``x - baseline``.
    """
    if steps < 2:
        raise ValueError("need at least 2 integration steps")
    x = np.asarray(x, dtype=float)
    baseline = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=float)
    diff = x - baseline
    alphas = np.arange(1, steps + 1) / steps
    path = Tensor(baseline[None] + alphas.reshape((-1,) + (1,) * x.ndim) * diff[None],
                  requires_grad=True)
    with ad.Tape() as tape:
        out = ad.sum(f(path))
    tape.backward(out)
    return diff * path.grad.mean(axis=0)


def cnn_attributions(model: CnnBaselineModel, x: np.ndarray, steps: int = 50,
                     valid: int | None = None) -> np.ndarray:
    """Integrated gradients for every sample of a standardized batch [N, C, T]."""
    attr = np.stack([integrated_gradients(model.forward, xi, steps=steps) for xi in x])
    return attr if valid is None else attr[..., :valid]


def write_attributions_csv(path, attributions: np.ndarray, sample_ids=None) -> None:
    """Rows of ``sample_id, channel, time, attribution, attribution_normalized``."""
    if sample_ids is None:
        sample_ids = range(len(attributions))
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["sample_id", "channel", "time", "attribution", "attribution_normalized"])
        for sid, attr in zip(sample_ids, attributions):
            norm = normalize_attribution(attr)
            for ch in range(attr.shape[0]):
                for t in range(attr.shape[1]):
                    out.writerow([sid, ch, t, repr(float(attr[ch, t])), repr(float(norm[ch, t]))])

