"""Train a small MAGNETS model on the univariate task and read one explanation.

Runs in a few minutes on one CPU. The target is the sum of the values above 0.5,
so a good model should keep one (channel, mask) pair that fires on exactly those steps.
"""
import numpy as np

from magnets.data import GeneratorConfig, make_splits
from magnets.metrics import explanation_auc, explanation_f1
from magnets.model import explain
from magnets.pipeline import fit
from magnets.training import TrainConfig

# %% data
train_ds, test_ds = make_splits("univariate", GeneratorConfig(seed=0, n_train=2000, n_test=200))
print("train x", train_ds.x.shape, "y range", train_ds.y.min().round(2), train_ds.y.max().round(2))

# %% train
model, scaler, log = fit("magnets", train_ds, test_ds, TrainConfig(epochs=20, batch_size=8, seed=0),
                         magnets_cfg={"masks": 10, "concepts": 3, "lambda_spars": 1.0, "lambda_ortho": 1.0},
                         widths=(8, 16, 32))
print("test R2 per epoch:", [round(r["test_r2"], 3) for r in log])

# %% one explanation
i = 0
ex = explain(model, scaler.transform_x(test_ds.x[i : i + 1])[0])
print("bottleneck weights beta[c, m, k]:")
print(np.round(model.beta, 3))
print("feature weights:", np.round(ex.feature_weights.ravel(), 3))
print("concepts", np.round(ex.concepts, 3), "contributions", np.round(ex.contributions, 3))
print("prediction (raw)", scaler.inverse_y(np.array([ex.y_hat]))[0].round(3), "target", test_ds.y[i].round(3))

# %% how well the most important mask matches the ground truth
c, m = np.unravel_index(np.argmax(np.abs(ex.feature_weights)), ex.feature_weights.shape)
mask, gt = ex.masks[c, m], test_ds.gt_mask[i, 0]
print(f"mask ({c},{m}) F1 {explanation_f1(mask, gt):.3f}  AUC {explanation_auc(ex.relaxed[c, m], gt):.3f}")
print("".join("#" if v else "." for v in mask))
print("".join("#" if v else "." for v in gt))
