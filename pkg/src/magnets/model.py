"""MAGNETS: learned binary masks, summed over time, fed to a linear concept layer."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

CHECKPOINT_MAGIC = b"MGCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated or corrupted checkpoint file."""


@dataclass
class MagnetsConfig:
    channels: int
    length: int
    masks: int = 10
    concepts: int = 3
    tau: float = 1.0
    lambda_spars: float = 0.0
    lambda_ortho: float = 0.0
    noise: str = "logistic"
    widths: list[int] = field(default_factory=lambda: [32, 64, 128])
    # "raw" sums the unstandardized signal; needs the per-channel statistics
    aggregate: str = "raw"
    x_mean: list[float] | None = None
    x_std: list[float] | None = None

    def __post_init__(self):
        if self.masks < 1 or self.concepts < 1:
            raise ValueError("masks and concepts must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.noise not in ("gumbel", "logistic"):
            raise ValueError(f"unknown noise kind {self.noise!r}")
        if self.length % 8:
            raise ValueError(f"length {self.length} must be divisible by 8 (pad first)")
        if len(self.widths) != 3:
            raise ValueError("the mask generator has exactly three encoder stages")
        self.widths = [int(w) for w in self.widths]
        if self.aggregate not in ("standardized", "raw"):
            raise ValueError(f"unknown aggregation input {self.aggregate!r}")
        # identity statistics until a fitted scaler is attached
        if self.x_mean is None:
            self.x_mean = [0.0] * self.channels
        if self.x_std is None:
            self.x_std = [1.0] * self.channels
        if len(self.x_mean) != self.channels or len(self.x_std) != self.channels:
            raise ValueError("need one mean and one std per channel")


# ---------------------------------------------------------------- U-Net


def _uniform_fan_in(rng, shape, fan_in):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def encoder_param_shapes(in_channels: int, widths) -> dict[str, tuple]:
    shapes = {}
    cin = in_channels
    for i, w in enumerate(widths):
        shapes[f"enc{i}.conv0.w"] = (w, cin, 3)
        shapes[f"enc{i}.conv0.b"] = (w,)
        shapes[f"enc{i}.conv1.w"] = (w, w, 3)
        shapes[f"enc{i}.conv1.b"] = (w,)
        cin = w
    return shapes


def unet_param_shapes(in_channels: int, out_channels: int, widths) -> dict[str, tuple]:
    shapes = encoder_param_shapes(in_channels, widths)
    top = widths[-1]
    shapes["mid.conv0.w"] = (top, top, 3)
    shapes["mid.conv0.b"] = (top,)
    shapes["mid.conv1.w"] = (top, top, 3)
    shapes["mid.conv1.b"] = (top,)
    cin = top
    for i in reversed(range(len(widths))):
        w = widths[i]
        shapes[f"dec{i}.up.w"] = (cin, w, 2)
        shapes[f"dec{i}.up.b"] = (w,)
        shapes[f"dec{i}.conv0.w"] = (w, 2 * w, 3)
        shapes[f"dec{i}.conv0.b"] = (w,)
        shapes[f"dec{i}.conv1.w"] = (w, w, 3)
        shapes[f"dec{i}.conv1.b"] = (w,)
        cin = w
    shapes["head.w"] = (out_channels, widths[0], 1)
    shapes["head.b"] = (out_channels,)
    return shapes


def init_conv_params(shapes: dict[str, tuple], rng) -> dict[str, Tensor]:
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".b"):
            data = np.zeros(shape)
        elif ".up." in name:
            # transposed kernel [Cin, Cout, k]: each output sees Cin * k / 2 inputs
            data = _uniform_fan_in(rng, shape, shape[0])
        else:
            data = _uniform_fan_in(rng, shape, shape[1] * shape[2])
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def _block(params, prefix, h):
    h = ad.relu(ad.conv1d(h, params[prefix + ".conv0.w"], params[prefix + ".conv0.b"]))
    return ad.relu(ad.conv1d(h, params[prefix + ".conv1.w"], params[prefix + ".conv1.b"]))


def encoder_forward(params, x: Tensor, depth: int = 3):
    """Run the shared encoder; returns the pooled output and the skip activations."""
    skips = []
    h = x
    for i in range(depth):
        h = _block(params, f"enc{i}", h)
        skips.append(h)
        h, _ = ad.maxpool1d(h)
    return h, skips


def unet_forward(params, x: Tensor, depth: int = 3) -> Tensor:
    h, skips = encoder_forward(params, x, depth)
    h = _block(params, "mid", h)
    for i in reversed(range(depth)):
        h = ad.conv1d_transposed(h, params[f"dec{i}.up.w"], params[f"dec{i}.up.b"])
        h = ad.concat([h, skips[i]], axis=1)
        h = _block(params, f"dec{i}", h)
    return ad.conv1d(h, params["head.w"], params["head.b"])


# ---------------------------------------------------------------- model


class MagnetsModel:
    """Parameters plus the forward pass.

    ``params`` holds the mask generator kernels under their layer names and the
    interpretable weights under ``beta`` [C, M, K], ``b`` [K], ``w`` [K] and
    ``w0`` (scalar).
    """

    def __init__(self, config: MagnetsConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: MagnetsConfig, seed: int = 0) -> "MagnetsModel":
        rng = np.random.default_rng(seed)
        C, M, K = config.channels, config.masks, config.concepts
        params = init_conv_params(unet_param_shapes(C, C * M, config.widths), rng)
        params["beta"] = Tensor(rng.normal(0.0, 0.01, size=(C, M, K)), True, "beta")
        params["b"] = Tensor(np.zeros(K), True, "b")
        params["w"] = Tensor(rng.normal(0.0, 0.01, size=K), True, "w")
        params["w0"] = Tensor(np.zeros(()), True, "w0")
        return cls(config, params)

    @property
    def beta(self) -> np.ndarray:
        return self.params["beta"].data

    def n_params(self) -> int:
        return int(np.sum([p.size for p in self.params.values()]))

    def feature_weights(self) -> np.ndarray:
        """End-to-end weight of each (channel, mask) feature: sum_k w_k beta[c, m, k]."""
        return np.einsum("cmk,k->cm", self.beta, self.params["w"].data)

    def attach_scaler(self, scaler) -> None:
        """Record input statistics so raw-scale aggregation can undo standardization."""
        self.config.x_mean = [float(v) for v in scaler.mean]
        self.config.x_std = [float(v) for v in scaler.std]

    def aggregation_input(self, x: Tensor) -> Tensor:
        cfg = self.config
        if cfg.aggregate == "standardized":
            return x
        mean = np.asarray(cfg.x_mean)[None, :, None]
        std = np.asarray(cfg.x_std)[None, :, None]
        return Tensor(x.data * std + mean)

    # trainer interface
    def loss(self, x: np.ndarray, y: np.ndarray, rng, valid: int | None = None):
        total, mse, spars, ortho, _ = magnets_loss(self, Tensor(x), y, training=True,
                                                   rng=rng, valid=valid)
        return total, {"train_mse": mse.item(), "spars": spars.item(), "ortho": ortho.item()}

    def predict(self, x: np.ndarray, valid: int | None = None) -> np.ndarray:
        return predict_batches(self, x, valid=valid)

    def save(self, path, extra: dict | None = None) -> None:
        save_model(self, path, extra)


def mask_logits(model: MagnetsModel, x: Tensor) -> Tensor:
    """Mask logits of shape [B, C, M, T]."""
    cfg = model.config
    if x.data.ndim != 3 or x.shape[1] != cfg.channels:
        raise ShapeError(f"expected input [B, {cfg.channels}, T], got {x.shape}")
    B, C, T = x.shape
    if T % 8:
        raise ShapeError(f"time length {T} must be divisible by 8; pad the input")
    out = unet_forward(model.params, x)
    return ad.reshape(out, (B, C, cfg.masks, T))


def sample_noise(rng, shape, kind: str) -> np.ndarray:
    u = rng.uniform(np.finfo(float).tiny, 1.0, size=shape)
    if kind == "gumbel":
        return -np.log(-np.log(u))
    if kind == "logistic":
        return np.log(u) - np.log1p(-u)
    raise ValueError(f"unknown noise kind {kind!r}")


def binarize_masks(logits: Tensor, tau: float, noise_kind: str = "logistic", rng=None,
                   training: bool = False, noise: np.ndarray | None = None, hard: bool = True):
    """Relax the logits with noise and temperature, then threshold at 0.5.

    Returns ``(masks, relaxed)``. In eval mode no noise is added, so masks are
    ``1[logit > 0]``. ``noise`` pins the perturbation (used for gradient checks);
    ``hard=False`` returns the relaxed values in place of the binary masks.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    s = logits
    if training:
        if noise is None:
            noise = sample_noise(rng, logits.shape, noise_kind)
        s = ad.add(s, Tensor(noise))
    relaxed = ad.sigmoid(ad.scale(s, 1.0 / tau))
    masks = ad.ste_binarize(relaxed) if hard else relaxed
    return masks, relaxed


def apply_valid_length(masks: Tensor, valid: int | None) -> Tensor:
    """Force masks to zero on right padding past ``valid`` time steps."""
    T = masks.shape[-1]
    if valid is None or valid >= T:
        return masks
    keep = np.zeros(masks.shape)
    keep[..., :valid] = 1.0
    return ad.mul(masks, Tensor(keep))


def aggregate(x: Tensor, masks: Tensor, valid: int | None = None) -> Tensor:
    return ad.aggregate(x, apply_valid_length(masks, valid))


def bottleneck_forward(model: MagnetsModel, z: Tensor) -> Tensor:
    B, C, M = z.shape
    K = model.config.concepts
    beta = ad.reshape(model.params["beta"], (C * M, K))
    return ad.linear(ad.reshape(z, (B, C * M)), beta, model.params["b"])


def predict(model: MagnetsModel, concepts: Tensor) -> Tensor:
    return ad.linear(concepts, model.params["w"], model.params["w0"])


def sparsity_loss(beta: Tensor) -> Tensor:
    return ad.sum(ad.abs(beta))


def orthogonality_loss(beta: Tensor) -> Tensor:
    """Squared Frobenius distance of the concept Gram matrix from the identity."""
    K = beta.shape[-1]
    B = ad.reshape(beta, (-1, K))
    gram = ad.matmul(ad.transpose(B), B)
    return ad.sum(ad.square(ad.sub(gram, Tensor(np.eye(K)))))


@dataclass
class Forward:
    logits: Tensor
    masks: Tensor
    relaxed: Tensor
    z: Tensor
    concepts: Tensor
    y_hat: Tensor


def forward(model: MagnetsModel, x: Tensor, *, training: bool = False, rng=None,
            noise: np.ndarray | None = None, hard: bool = True, valid: int | None = None) -> Forward:
    cfg = model.config
    logits = mask_logits(model, x)
    masks, relaxed = binarize_masks(logits, cfg.tau, cfg.noise, rng, training, noise, hard)
    z = aggregate(model.aggregation_input(x), masks, valid)
    concepts = bottleneck_forward(model, z)
    return Forward(logits, masks, relaxed, z, concepts, predict(model, concepts))


def magnets_loss(model: MagnetsModel, x: Tensor, y: np.ndarray, **kw):
    """Return ``(total, mse, spars, ortho)`` tensors plus the forward record."""
    out = forward(model, x, **kw)
    y = np.asarray(y, dtype=np.float64)
    if out.y_hat.shape != y.shape:
        raise ShapeError(f"targets {y.shape} do not match predictions {out.y_hat.shape}")
    mse = ad.mean(ad.square(ad.sub(out.y_hat, Tensor(y))))
    beta = model.params["beta"]
    spars = sparsity_loss(beta)
    ortho = orthogonality_loss(beta)
    total = mse
    cfg = model.config
    if cfg.lambda_spars:
        total = ad.add(total, ad.scale(spars, cfg.lambda_spars))
    if cfg.lambda_ortho:
        total = ad.add(total, ad.scale(ortho, cfg.lambda_ortho))
    return total, mse, spars, ortho, out


def predict_batches(model: MagnetsModel, x: np.ndarray, batch: int = 256, valid=None) -> np.ndarray:
    """Eval-mode predictions for an array [N, C, T], without recording a tape."""
    preds = [forward(model, Tensor(x[i:i + batch]), valid=valid).y_hat.data
             for i in range(0, len(x), batch)]
    return np.concatenate(preds) if preds else np.zeros(0)


# ---------------------------------------------------------------- explanations


@dataclass
class Explanation:
    masks: np.ndarray  # [C, M, T] binary
    relaxed: np.ndarray  # [C, M, T]
    z: np.ndarray  # [C, M]
    concepts: np.ndarray  # [K]
    contributions: np.ndarray  # [K] w_k * c_k
    feature_weights: np.ndarray  # [C, M]
    y_hat: float
    w0: float

    def reconstruct(self) -> float:
        return self.w0 + float(self.contributions.sum())


def explain(model: MagnetsModel, x: np.ndarray, valid: int | None = None) -> Explanation:
    """Deterministic (eval-mode) decomposition of one prediction; ``x`` is [C, T]."""
    out = forward(model, Tensor(np.asarray(x, dtype=np.float64)[None]), valid=valid)
    w = model.params["w"].data
    concepts = out.concepts.data[0]
    masks = apply_valid_length(out.masks, valid).data[0]
    return Explanation(
        masks=masks,
        relaxed=out.relaxed.data[0],
        z=out.z.data[0],
        concepts=concepts,
        contributions=w * concepts,
        feature_weights=model.feature_weights(),
        y_hat=float(out.y_hat.data[0]),
        w0=float(model.params["w0"].data),
    )


# ---------------------------------------------------------------- checkpoints


def _pack(kind: str, config: dict, params: dict[str, Tensor], extra: dict | None = None) -> bytes:
    manifest, offset, chunks = [], 0, []
    for name in sorted(params):
        arr = np.asarray(params[name].data, dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes(order="C"))
        offset += arr.nbytes
    header = {"format_version": CHECKPOINT_VERSION, "kind": kind, "config": config,
              "params": manifest, "extra": extra or {}}
    head = json.dumps(header, sort_keys=True).encode()
    body = CHECKPOINT_MAGIC + struct.pack("<I", len(head)) + head + b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body))


def _unpack(raw: bytes):
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    (hlen,) = struct.unpack("<I", raw[4:8])
    if 8 + hlen > len(body):
        raise CheckpointError("truncated checkpoint header")
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    header = json.loads(body[8:8 + hlen])
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    payload = body[8 + hlen:]
    params = {}
    for entry in header["params"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + 8 * n > len(payload):
            raise CheckpointError(f"truncated payload for {entry['name']}")
        data = np.frombuffer(payload, dtype="<f8", count=n, offset=start).reshape(entry["shape"])
        params[entry["name"]] = Tensor(data.copy(), requires_grad=True, name=entry["name"])
    return header, params


def write_checkpoint(path, kind: str, config: dict, params: dict[str, Tensor],
                     extra: dict | None = None) -> None:
    Path(path).write_bytes(_pack(kind, config, params, extra))


def read_checkpoint(path):
    """Return ``(header, params)`` from a checkpoint written by :func:`write_checkpoint`."""
    return _unpack(Path(path).read_bytes())


def save_model(model: MagnetsModel, path, extra: dict | None = None) -> None:
    write_checkpoint(path, "magnets", asdict(model.config), model.params, extra)


def load_model(path) -> tuple[MagnetsModel, dict]:
    header, params = read_checkpoint(path)
    if header["kind"] != "magnets":
        raise CheckpointError(f"expected a magnets checkpoint, got {header['kind']!r}")
    return MagnetsModel(MagnetsConfig(**header["config"]), params), header.get("extra", {})
