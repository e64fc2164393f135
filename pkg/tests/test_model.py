import numpy as np
import pytest

from magnets import autodiff as ad
from magnets.autodiff import Tape, Tensor, grad_check
from magnets.data import GeneratorConfig, make_dataset
from magnets.model import (
    CheckpointError,
    MagnetsConfig,
    MagnetsModel,
    aggregate,
    binarize_masks,
    explain,
    forward,
    load_model,
    magnets_loss,
    mask_logits,
    orthogonality_loss,
    read_checkpoint,
    save_model,
    sparsity_loss,
)


@pytest.fixture
def tiny():
    cfg = MagnetsConfig(channels=1, length=8, masks=2, concepts=2, widths=[2, 2, 2])
    return MagnetsModel.init(cfg, seed=3)


@pytest.fixture
def small():
    cfg = MagnetsConfig(channels=2, length=16, masks=3, concepts=2, widths=[4, 8, 16],
                        lambda_spars=1.0, lambda_ortho=1.0)
    return MagnetsModel.init(cfg, seed=1)


def test_config_validation():
    with pytest.raises(ValueError):
        MagnetsConfig(channels=1, length=12)
    with pytest.raises(ValueError):
        MagnetsConfig(channels=1, length=16, noise="normal")
    with pytest.raises(ValueError):
        MagnetsConfig(channels=1, length=16, tau=0)
    with pytest.raises(ValueError):
        MagnetsConfig(channels=1, length=16, aggregate="log")


def test_logit_shape_and_zero_parameters(small):
    x = Tensor(np.random.default_rng(0).normal(size=(3, 2, 16)))
    assert mask_logits(small, x).shape == (3, 2, 3, 16)
    for p in small.params.values():
        p.data[...] = 0.0
    assert not mask_logits(small, x).data.any()


def test_eval_masks_threshold_logits():
    logits = Tensor(np.array([[-1.0, 0.0, 1e-9, 3.0]]))
    masks, relaxed = binarize_masks(logits, tau=1.0)
    np.testing.assert_array_equal(masks.data, [[0, 0, 1, 1]])
    assert relaxed.data[0, 1] == 0.5


def test_training_noise_is_seeded():
    logits = Tensor(np.zeros((2, 50)))
    a, _ = binarize_masks(logits, 0.5, "gumbel", np.random.default_rng(1), training=True)
    b, _ = binarize_masks(logits, 0.5, "gumbel", np.random.default_rng(1), training=True)
    np.testing.assert_array_equal(a.data, b.data)
    assert 0 < a.data.mean() < 1


def test_aggregation_sums_masked_values():
    x = Tensor(np.array([[[1.0, 2.0, 3.0, 4.0]]]))
    m = Tensor(np.array([[[[1, 0, 1, 0], [1, 1, 1, 1]]]], dtype=float))
    np.testing.assert_array_equal(aggregate(x, m).data, [[[4.0, 10.0]]])
    # padding past the valid length never contributes
    np.testing.assert_array_equal(aggregate(x, m, valid=2).data, [[[1.0, 3.0]]])


def test_regularizers_hand_values():
    beta = Tensor(np.array([[[1.0, 0.0], [0.0, -2.0]]]))
    assert sparsity_loss(beta).item() == 3.0
    # columns orthogonal; only the second column norm deviates (4 - 1)^2
    assert orthogonality_loss(beta).item() == 9.0
    assert orthogonality_loss(Tensor(np.zeros((1, 5, 3)))).item() == 3.0


def test_orthogonality_floor_when_features_scarce():
    # K concepts over fewer than K features cannot all be orthonormal
    rng = np.random.default_rng(0)
    for _ in range(20):
        B = rng.normal(size=(2, 3))
        assert orthogonality_loss(Tensor(B)).item() >= 1.0 - 1e-12


def test_full_loss_gradient_relaxed_path(tiny):
    tiny.config.lambda_spars = 1.0
    tiny.config.lambda_ortho = 1.0
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(2, 1, 8)))
    y = rng.normal(size=2)
    noise = np.random.default_rng(1).gumbel(size=(2, 1, 2, 8))
    params = list(tiny.params.values())
    f = lambda: magnets_loss(tiny, x, y, training=True, noise=noise, hard=False)[0]  # noqa: E731
    assert grad_check(f, params) <= 1e-4


def test_unet_gradient(small):
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(1, 2, 16)))
    wts = Tensor(rng.normal(size=(1, 2, 3, 16)))
    params = [p for k, p in small.params.items() if k not in ("beta", "b", "w", "w0")]
    # zero biases put dead channels exactly on the relu kink, where FD is meaningless
    for p in params:
        if p.data.ndim == 1:
            p.data[:] = rng.uniform(0.05, 0.2, size=p.shape)
    assert grad_check(lambda: ad.sum(ad.mul(mask_logits(small, x), wts)), params) <= 1e-6


def test_ste_path_matches_relaxed_when_downstream_is_linear(small):
    # with a loss linear in the masks, STE and relaxed graphs share the upstream gradient
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(2, 2, 16)))
    r = Tensor(rng.normal(size=(2, 2, 3)))
    noise = rng.logistic(size=(2, 2, 3, 16))
    grads = []
    for hard in (True, False):
        for p in small.params.values():
            p.grad = None
        with Tape() as tape:
            out = forward(small, x, training=True, noise=noise, hard=hard)
            loss = ad.sum(ad.mul(out.z, r))
        tape.backward(loss)
        grads.append({k: p.grad.copy() for k, p in small.params.items() if p.grad is not None})
    assert grads[0].keys() == grads[1].keys()
    for k in grads[0]:
        np.testing.assert_allclose(grads[0][k], grads[1][k], rtol=0, atol=1e-12)


def test_affine_decomposition(small):
    x = np.random.default_rng(5).normal(size=(2, 16))
    e = explain(small, x)
    assert abs(e.reconstruct() - e.y_hat) <= 1e-12
    # concept values follow from the exported z and beta
    c = e.z.reshape(-1) @ small.beta.reshape(-1, 2) + small.params["b"].data
    np.testing.assert_allclose(c, e.concepts, atol=1e-12)


def test_feature_weights(small):
    small.params["w"].data[:] = [2.0, -1.0]
    beta = small.beta
    np.testing.assert_allclose(small.feature_weights(), 2 * beta[..., 0] - beta[..., 1])


def test_hand_built_model_reproduces_univariate_targets():
    ds = make_dataset("univariate", GeneratorConfig(seed=2, n_train=50, n_test=1))
    cfg = MagnetsConfig(channels=1, length=128, masks=1, concepts=1, widths=[2, 2, 2])
    model = MagnetsModel.init(cfg)
    for p in model.params.values():
        p.data[...] = 0.0
    model.params["beta"].data[...] = 1.0
    model.params["w"].data[...] = 1.0
    masks = Tensor(ds.gt_mask[:, :, None, :].astype(float))
    z = aggregate(Tensor(ds.x), masks)
    from magnets.model import bottleneck_forward, predict
    y_hat = predict(model, bottleneck_forward(model, z)).data
    assert np.sqrt(np.mean((y_hat - ds.y) ** 2)) <= 1e-9


def test_raw_aggregation_undoes_standardization():
    cfg = MagnetsConfig(channels=1, length=8, masks=1, concepts=1, widths=[2, 2, 2],
                        aggregate="raw")
    model = MagnetsModel.init(cfg)
    x = np.abs(np.random.default_rng(0).normal(size=(1, 1, 8)))
    mean, std = 0.3, 0.2
    # no scaler attached yet: identity
    np.testing.assert_array_equal(model.aggregation_input(Tensor(x)).data, x)
    cfg.x_mean, cfg.x_std = [mean], [std]
    back = model.aggregation_input(Tensor((x - mean) / std)).data
    np.testing.assert_allclose(back, x, atol=1e-14)


def test_checkpoint_roundtrip(tmp_path, small):
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_model(small, p1, extra={"note": 1})
    loaded, extra = load_model(p1)
    assert extra == {"note": 1}
    for k, v in small.params.items():
        np.testing.assert_array_equal(loaded.params[k].data, v.data)
    save_model(loaded, p2, extra={"note": 1})
    assert p1.read_bytes() == p2.read_bytes()
    header, _ = read_checkpoint(p1)
    assert header["kind"] == "magnets" and header["config"]["masks"] == 3


def test_checkpoint_corruption(tmp_path, small):
    p = tmp_path / "m.ckpt"
    save_model(small, p)
    raw = bytearray(p.read_bytes())
    for pos in (0, 10, len(raw) // 2, len(raw) - 5):
        bad = raw.copy()
        bad[pos] ^= 0x10
        q = tmp_path / f"bad{pos}.ckpt"
        q.write_bytes(bytes(bad))
        with pytest.raises(CheckpointError):
            load_model(q)
    q = tmp_path / "short.ckpt"
    q.write_bytes(bytes(raw[:-20]))
    with pytest.raises(CheckpointError):
        load_model(q)


def test_training_boundary_logit_zero_noise_zero():
    masks, relaxed = binarize_masks(Tensor(np.zeros((1, 3))), 1.0, training=True,
                                    noise=np.zeros((1, 3)))
    assert relaxed.data[0, 0] == 0.5 and not masks.data.any()


def test_low_temperature_saturates():
    rng = np.random.default_rng(0)
    logits = rng.uniform(-3, 3, size=(4, 200))
    noise = rng.logistic(size=logits.shape)
    masks, relaxed = binarize_masks(Tensor(logits), 0.1, training=True, noise=noise)
    far = np.abs(logits + noise) >= 0.5
    assert np.all(np.abs(relaxed.data - masks.data)[far] <= 0.05)


def test_sparsity_subgradient_at_zero():
    beta = Tensor(np.array([[[0.0, 1.5, -2.0]]]), requires_grad=True)
    with Tape() as tape:
        loss = sparsity_loss(beta)
    tape.backward(loss)
    np.testing.assert_array_equal(beta.grad, [[[0.0, 1.0, -1.0]]])
