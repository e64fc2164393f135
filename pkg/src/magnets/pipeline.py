"""Fit, evaluate, save and reload every model family through one interface."""

from __future__ import annotations

import json
import time
import zlib
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .baselines import (
    CnnBaselineModel,
    CnnConfig,
    LinearBaselineModel,
    MeanModel,
    cnn_attributions,
    fit_lasso,
    fit_mean,
    fit_ols,
    fit_ridge,
    load_cnn,
)
from .data import GeneratorConfig, TimeSeriesDataset, make_splits
from .metrics import MetricsReport, magnets_mask_scores, normalize_attribution, r2, rmse, \
    score_explanations
from .model import MagnetsConfig, MagnetsModel, forward, load_model, orthogonality_loss, \
    read_checkpoint, write_checkpoint, CheckpointError
from .training import Standardizer, TrainConfig, prepare, train

MODEL_KINDS = ("magnets", "cnn", "mean", "ols", "ridge", "lasso")

# reference values per dataset: R^2 (regression table) and (AUC, F1) (explanation table)
REFERENCE_R2 = {
    "magnets_l1": {"univariate": .9989, "bivariate": .9990, "trivariate1": .9993, "trivariate2": .9979},
    "magnets_l0": {"univariate": .9993, "bivariate": .9991, "trivariate1": .9993, "trivariate2": .9984},
    "cnn": {"univariate": .9999, "bivariate": .9986, "trivariate1": .9994, "trivariate2": .9968},
    "mean": {"univariate": .0000, "bivariate": -.0003, "trivariate1": .0000, "trivariate2": .0000},
    "ols": {"univariate": .5229, "bivariate": .1645, "trivariate1": .6434, "trivariate2": .5983},
    "lasso": {"univariate": .5231, "bivariate": .1689, "trivariate1": .6443, "trivariate2": .5996},
    "ridge": {"univariate": .5243, "bivariate": .1694, "trivariate1": .6450, "trivariate2": .6012},
}
REFERENCE_EXPL = {
    "cnn": {"univariate": (0.99, 0.69), "bivariate": (0.98, 0.49), "trivariate1": (0.83, 0.36),
            "trivariate2": (0.66, 0.34)},
    "magnets_l0": {"univariate": (1.00, 1.00), "bivariate": (1.00, 1.00), "trivariate1": (1.00, 1.00),
                   "trivariate2": (0.98, 0.94)},
    "magnets_l1": {"univariate": (0.99, 0.93), "bivariate": (1.00, 1.00), "trivariate1": (1.00, 1.00),
                   "trivariate2": (0.99, 0.95)},
}


def magnets_scores(model: MagnetsModel, x: np.ndarray, valid: int, pool: str = "weighted",
                   batch: int = 256) -> np.ndarray:
    """Eval-mode relevance maps [N, C, valid] for standardized, padded inputs."""
    fw = model.feature_weights()
    out = []
    for i in range(0, len(x), batch):
        masks = forward(model, Tensor(x[i:i + batch]), valid=valid).masks.data[..., :valid]
        out.extend(magnets_mask_scores(m, fw, pool) for m in masks)
    return np.array(out) if out else np.zeros((0, x.shape[1], valid))


def cnn_scores(model: CnnBaselineModel, x: np.ndarray, valid: int, steps: int = 50) -> np.ndarray:
    attr = cnn_attributions(model, x, steps=steps, valid=valid)
    return np.array([normalize_attribution(a) for a in attr])


def predict_raw(kind: str, model, scaler: Standardizer | None, ds: TimeSeriesDataset) -> np.ndarray:
    if kind in ("mean", "ols", "ridge", "lasso"):
        return model.predict(ds.x)
    data = prepare(ds, scaler)
    return scaler.inverse_y(model.predict(data.x, valid=data.valid))


def evaluate(kind: str, model, scaler: Standardizer | None, test_ds: TimeSeriesDataset, *,
             mask_pool: str = "weighted", ig_steps: int = 50, ig_samples: int | None = None,
             seed: int | None = None) -> MetricsReport:
    t0 = time.perf_counter()
    pred = predict_raw(kind, model, scaler, test_ds)
    rep = MetricsReport(dataset=test_ds.name, model=kind, rmse_raw=rmse(test_ds.y, pred),
                        r2=r2(test_ds.y, pred), seed=seed)
    if kind == "magnets":
        rep.lambda_spars = model.config.lambda_spars
        rep.lambda_ortho = model.config.lambda_ortho
    if test_ds.gt_mask is not None and kind in ("magnets", "cnn"):
        sub = test_ds if ig_samples is None or kind == "magnets" else \
            test_ds.subset(np.arange(min(ig_samples, test_ds.n)))
        data = prepare(sub, scaler)
        if kind == "magnets":
            scores = magnets_scores(model, data.x, data.valid, mask_pool)
        else:
            scores = cnn_scores(model, data.x, data.valid, ig_steps)
        es = score_explanations(scores, sub.gt_mask)
        rep.expl_auc_mean, rep.expl_f1_mean = es.auc_mean, es.f1_mean
        rep.n_evaluated, rep.n_skipped = es.n_evaluated, es.n_skipped
    rep.wall_ms = round(1000 * (time.perf_counter() - t0), 3)
    return rep


def fit(kind: str, train_ds: TimeSeriesDataset, test_ds: TimeSeriesDataset | None,
        tcfg: TrainConfig, *, magnets_cfg: dict | None = None, widths=(32, 64, 128), lam: float = 1.0,
        log_path=None, checkpoint_path=None, progress: bool = False):
    """Train one model; returns ``(model, scaler, runlog)``. Linear fits have an empty log."""
    if kind == "mean":
        return fit_mean(train_ds.y), None, []
    if kind in ("ols", "ridge", "lasso"):
        fitter = {"ols": lambda x, y: fit_ols(x, y), "ridge": lambda x, y: fit_ridge(x, y, lam),
                  "lasso": lambda x, y: fit_lasso(x, y, lam)}[kind]
        return fitter(train_ds.x, train_ds.y), None, []
    if kind == "cnn":
        model = CnnBaselineModel.init(CnnConfig(train_ds.c, _padded(train_ds.t), list(widths)), tcfg.seed)
    elif kind == "magnets":
        cfg = MagnetsConfig(channels=train_ds.c, length=_padded(train_ds.t), widths=list(widths),
                            **(magnets_cfg or {}))
        model = MagnetsModel.init(cfg, tcfg.seed)
    else:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    model, log = train(model, train_ds, test_ds, tcfg, log_path=log_path,
                       checkpoint_path=checkpoint_path, progress=progress)
    return model, model.scaler, log


def _padded(t: int) -> int:
    return -(-t // 8) * 8


def save(kind: str, model, scaler: Standardizer | None, path, extra: dict | None = None) -> None:
    extra = dict(extra or {})
    if scaler is not None:
        extra["scaler"] = scaler.to_dict()
    if kind == "magnets" or kind == "cnn":
        model.save(path, extra)
    elif kind == "mean":
        write_checkpoint(path, "mean", {"value": model.value}, {}, extra)
    else:
        params = {"weights": Tensor(model.weights)}
        if model.col_mean is not None:
            params["col_mean"] = Tensor(model.col_mean)
            params["col_std"] = Tensor(model.col_std)
        config = {"regularization": model.regularization, "lam": model.lam,
                  "intercept": model.intercept, "residual": model.residual}
        write_checkpoint(path, kind, config, params, extra)


def load(path):
    """Return ``(kind, model, scaler, extra)`` for any checkpoint written by :func:`save`."""
    header, params = read_checkpoint(path)
    kind = header["kind"]
    extra = header.get("extra", {})
    scaler = Standardizer.from_dict(extra["scaler"]) if "scaler" in extra else None
    if kind == "magnets":
        model, _ = load_model(path)
    elif kind == "cnn":
        model, _ = load_cnn(path)
    elif kind == "mean":
        model = MeanModel(header["config"]["value"])
    elif kind in ("ols", "ridge", "lasso"):
        cfg = header["config"]
        cm = params.get("col_mean")
        cs = params.get("col_std")
        model = LinearBaselineModel(params["weights"].data, cfg["intercept"], cfg["regularization"],
                                    cfg["lam"], None if cm is None else cm.data,
                                    None if cs is None else cs.data, [], cfg["residual"])
    else:
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    return kind, model, scaler, extra


def check_compatible(kind: str, model, ds: TimeSeriesDataset) -> None:
    """Raise ValueError when a checkpoint cannot consume ``ds``."""
    if kind in ("magnets", "cnn"):
        cfg = model.config
        if cfg.channels != ds.c or cfg.length != _padded(ds.t):
            raise ValueError(f"checkpoint expects [{cfg.channels}, {cfg.length}] inputs, "
                             f"dataset has [{ds.c}, {ds.t}]")
    elif kind != "mean" and model.weights.shape[0] != ds.c * ds.t:
        raise ValueError(f"checkpoint expects {model.weights.shape[0]} flattened features, "
                         f"dataset has {ds.c * ds.t}")


def config_dict(kind: str, model) -> dict:
    return asdict(model.config) if kind in ("magnets", "cnn") else {}


# ---------------------------------------------------------------- reproduction grid


def run_key(dataset: str, label: str, seed: int, settings: dict) -> str:
    blob = json.dumps(settings, sort_keys=True)
    return f"{dataset}-{label}-s{seed}-{zlib.crc32(blob.encode()):08x}"


def run_one(dataset: str, label: str, seed: int, settings: dict) -> dict:
    """Train and evaluate one (dataset, model, seed) cell of the reproduction grid.

    ``label`` is a model kind, or ``magnets_l1`` / ``magnets_l0`` for the
    regularized and unregularized MAGNETS variants.
    """
    cfg = GeneratorConfig.scaled(settings["scale"], seed=seed)
    tr, te = make_splits(dataset, cfg)
    tcfg = TrainConfig(epochs=settings["epochs"], batch_size=settings["batch"], lr=settings["lr"],
                       seed=seed)
    kind = "magnets" if label.startswith("magnets") else label
    mcfg = None
    if kind == "magnets":
        lam = 1.0 if label == "magnets_l1" else 0.0
        mcfg = {"masks": settings["masks"], "concepts": settings["concepts"], "tau": settings["tau"],
                "noise": settings["noise"], "aggregate": settings["aggregate"],
                "lambda_spars": lam, "lambda_ortho": lam}
    t0 = time.perf_counter()
    model, scaler, runlog = fit(kind, tr, te, tcfg, magnets_cfg=mcfg, widths=settings["widths"],
                                lam=settings.get("lam", 1.0))
    train_s = time.perf_counter() - t0
    rep = evaluate(kind, model, scaler, te, mask_pool=settings.get("mask_pool", "weighted"),
                   ig_steps=settings.get("ig_steps", 50), ig_samples=settings.get("ig_samples"),
                   seed=seed)
    row = {**rep.to_dict(), "dataset": dataset, "model": label, "kind": kind, "seed": seed,
           "train_seconds": round(train_s, 3), "total_seconds": round(time.perf_counter() - t0, 3)}
    if runlog:
        row["final_epoch"] = {k: v for k, v in runlog[-1].items() if k != "wall_ms"}
        row["first_epoch"] = {k: v for k, v in runlog[0].items() if k != "wall_ms"}
    if kind == "magnets":
        beta = model.beta
        row["beta_small_fraction"] = float(np.mean(np.abs(beta) < 1e-3))
        row["ortho_final"] = float(orthogonality_loss(Tensor(beta)).item())
        mags = np.sort(np.abs(beta.reshape(-1, beta.shape[-1])), axis=0)[::-1]
        row["top_beta_ratio"] = [float(mags[0, k] / mags[1, k]) if mags[1, k] > 0 else float("inf")
                                 for k in range(mags.shape[1])]
        row["beta"] = beta.tolist()
        row["w"] = model.params["w"].data.tolist()
    return row


def run_grid(cells, settings: dict, cache_dir=None, progress=None) -> list[dict]:
    """Run ``(dataset, label, seed)`` cells, reusing JSON results cached under ``cache_dir``."""
    rows = []
    cache = Path(cache_dir) if cache_dir is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
    for dataset, label, seed in cells:
        path = cache / f"{run_key(dataset, label, seed, settings)}.json" if cache else None
        if path is not None and path.exists():
            rows.append(json.loads(path.read_text()))
            continue
        if progress:
            progress(dataset, label, seed)
        row = run_one(dataset, label, seed, settings)
        if path is not None:
            tmp = path.with_suffix(".tmp")
            tmp.write_text(json.dumps(row, indent=1) + "\n")
            tmp.replace(path)
        rows.append(row)
    return rows
