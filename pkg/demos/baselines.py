"""Linear baselines on the four synthetic tasks.

The targets are sums gated by value comparisons, which no linear model can express;
only the univariate task is close to linear because x > 0.5 correlates with x.
"""
import numpy as np

from magnets.data import DATASETS, GeneratorConfig, make_splits
from magnets.metrics import r2
from magnets.pipeline import fit
from magnets.training import TrainConfig

cfg = GeneratorConfig(seed=1, n_train=1000, n_test=300)
print(f"{'dataset':<12} {'mean':>8} {'ols':>8} {'ridge':>8} {'lasso':>8}")
for name in DATASETS:
    train_ds, test_ds = make_splits(name, cfg)
    scores = []
    for kind in ("mean", "ols", "ridge", "lasso"):
        model, _, _ = fit(kind, train_ds, test_ds, TrainConfig(), lam=0.05 if kind == "lasso" else 10.0)
        scores.append(r2(test_ds.y, model.predict(test_ds.x)))
    print(f"{name:<12} " + " ".join(f"{s:8.3f}" for s in scores))

# lasso drops most time steps once the penalty grows
train_ds, _ = make_splits("bivariate", cfg)
for lam in (0.05, 0.2, 1.0):
    w = fit("lasso", train_ds, None, TrainConfig(), lam=lam)[0].weights
    print(f"lasso lam={lam:<5} nonzero weights {np.count_nonzero(w)}/{w.size}")
