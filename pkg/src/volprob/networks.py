"""Segmentation networks: 3D U-Net trunk, latent prior/posterior encoders,
and the feature-combination head that fuses a latent sample with U-Net
features.

The probabilistic model pairs the U-Net with a low-dimensional latent
Gaussian. An image-conditional prior encoder and an image+label
posterior encoder emit diagonal Gaussians over the same latent size;
the posterior sample may pass through a normalizing-flow chain. At
test time only the prior is used: one U-Net pass, one prior pass, then
n cheap feature-combination passes give n segmentation samples whose
voxelwise spread is the uncertainty map.

All parameters live in an ordered name -> Tensor registry, which fixes
the checkpoint layout.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Volume3D
from .distributions import DiagGaussian, LatentSample, make_gaussian, sample_reparam
from .errors import DataFormatError, ShapeError, UsageError
from .flows import FlowChain, make_chain

VARIANTS = ("unet3d", "punet3d", "punet3d-planar", "punet3d-radial")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "punet3d"
    levels: int = 3
    base_channels: int = 8
    in_channels: int = 1
    feature_channels: int = 8
    latent_dim: int = 6
    flow_steps: int = 2
    init_seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise UsageError(f"unknown model variant {self.variant!r}; "
                             f"valid: {', '.join(VARIANTS)}")
        if self.levels < 1:
            raise UsageError(f"levels must be >= 1, got {self.levels}")
        for name in ("base_channels", "in_channels", "feature_channels", "latent_dim"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.flow_steps < 0:
            raise UsageError(f"flow_steps must be >= 0, got {self.flow_steps}")

    @property
    def flow_kind(self) -> str:
        if self.variant == "punet3d-planar":
            return "planar"
        if self.variant == "punet3d-radial":
            return "radial"
        return "none"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise UsageError(f"unknown model config keys: {sorted(extra)}")
        return cls(**d)


def _check_divisible(grid, levels: int) -> None:
    factor = 2 ** (levels - 1)
    for ax, extent in enumerate(grid):
        if extent % factor != 0:
            raise ShapeError(f"axis {ax} extent {extent} is not divisible by "
                             f"{factor} (levels={levels})")


def _as_input_tensor(x) -> Tensor:
    """Volume3D, (D,H,W) array, (C,D,H,W) array, or Tensor -> rank-4 Tensor."""
    if isinstance(x, Volume3D):
        arr = x.intensities.astype(np.float64)[None]
        return Tensor(arr)
    if isinstance(x, Tensor):
        if x.data.ndim != 4:
            raise ShapeError(f"network input must be rank 4, got {x.shape}")
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"network input must be 3D or 4D, got shape {arr.shape}")
    return Tensor(arr)


# ---------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------

class Conv3d:
    """Cubic-kernel convolution layer with bias, padding k//2 by default."""

    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 scale: float | None = None):
        std = (scale if scale is not None else 1.0) * np.sqrt(2.0 / (cin * k ** 3))
        self.weight = Tensor(rng.normal(0.0, std, size=(cout, cin, k, k, k)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)
        self.padding = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv3d(x, self.weight, self.bias, stride=1, padding=self.padding)

    def params(self, prefix: str) -> list:
        return [(prefix + ".weight", self.weight), (prefix + ".bias", self.bias)]


class Affine:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 scale: float | None = None):
        std = (scale if scale is not None else 1.0) / np.sqrt(n_in)
        self.weight = Tensor(rng.normal(0.0, std, size=(n_out, n_in)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.affine(x, self.weight, self.bias)

    def params(self, prefix: str) -> list:
        return [(prefix + ".weight", self.weight), (prefix + ".bias", self.bias)]


class _ConvBlock:
    """Two 3x3x3 convolutions, each followed by relu."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.conv0 = Conv3d(cin, cout, 3, rng)
        self.conv1 = Conv3d(cout, cout, 3, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.relu(self.conv1(ad.relu(self.conv0(x))))

    def params(self, prefix: str) -> list:
        return self.conv0.params(prefix + ".conv0") + self.conv1.params(prefix + ".conv1")


class _EncoderTrunk:
    """Conv blocks at doubling widths with 2x average-pool between levels."""

    def __init__(self, in_ch: int, base: int, levels: int, rng: np.random.Generator):
        self.levels = levels
        self.channels = [base * 2 ** i for i in range(levels)]
        self.blocks = []
        prev = in_ch
        for c in self.channels:
            self.blocks.append(_ConvBlock(prev, c, rng))
            prev = c

    def forward(self, x: Tensor) -> list:
        outs = []
        h = x
        for i, block in enumerate(self.blocks):
            if i > 0:
                h = ad.rescale_spatial(h, "down", 2)
            h = block(h)
            outs.append(h)
        return outs

    def params(self, prefix: str) -> list:
        out = []
        for i, block in enumerate(self.blocks):
            out.extend(block.params(f"{prefix}.enc{i}"))
        return out


class _UNetTrunk:
    """Encoder-decoder with skip concatenation and a linear 1x1x1 feature map."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.encoder = _EncoderTrunk(cfg.in_channels, cfg.base_channels,
                                     cfg.levels, rng)
        ch = self.encoder.channels
        self.dec_blocks = []
        for i in range(cfg.levels - 2, -1, -1):
            self.dec_blocks.append((i, _ConvBlock(ch[i + 1] + ch[i], ch[i], rng)))
        self.feat = Conv3d(ch[0], cfg.feature_channels, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        skips = self.encoder.forward(x)
        h = skips[-1]
        for i, block in self.dec_blocks:
            h = ad.rescale_spatial(h, "up", 2)
            h = block(ad.concat_channels(h, skips[i]))
        return self.feat(h)

    def params(self, prefix: str) -> list:
        out = self.encoder.params(prefix)
        for i, block in self.dec_blocks:
            out.extend(block.params(f"{prefix}.dec{i}"))
        out.extend(self.feat.params(prefix + ".feat"))
        return out


class _LatentEncoder:
    """Half-width encoder ladder pooled to 1x1x1, then mean/log-var heads."""

    def __init__(self, in_ch: int, cfg: ModelConfig, rng: np.random.Generator):
        base = max(1, cfg.base_channels // 2)
        self.trunk = _EncoderTrunk(in_ch, base, cfg.levels, rng)
        bottom = self.trunk.channels[-1]
        # small head weights keep early latents near the standard normal
        self.mean_head = Affine(bottom, cfg.latent_dim, rng, scale=0.01)
        self.logvar_head = Affine(bottom, cfg.latent_dim, rng, scale=0.01)

    def forward(self, x: Tensor) -> DiagGaussian:
        pooled = ad.global_avg_pool(self.trunk.forward(x)[-1])
        return make_gaussian(self.mean_head(pooled), self.logvar_head(pooled))

    def params(self, prefix: str) -> list:
        return (self.trunk.params(prefix)
                + self.mean_head.params(prefix + ".mean")
                + self.logvar_head.params(prefix + ".logvar"))


class _FComb:
    """Three 1x1x1 convolutions (relu, relu, linear) on features + latent."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        cin = cfg.feature_channels + cfg.latent_dim
        hidden = cfg.feature_channels
        self.conv0 = Conv3d(cin, hidden, 1, rng)
        self.conv1 = Conv3d(hidden, hidden, 1, rng)
        self.conv2 = Conv3d(hidden, 1, 1, rng)

    def forward(self, features: Tensor, z: Tensor) -> Tensor:
        zmap = ad.broadcast_latent(z, features.shape[1:])
        h = ad.concat_channels(features, zmap)
        return self.conv2(ad.relu(self.conv1(ad.relu(self.conv0(h)))))

    def params(self, prefix: str) -> list:
        return (self.conv0.params(prefix + ".conv0")
                + self.conv1.params(prefix + ".conv1")
                + self.conv2.params(prefix + ".conv2"))


# ---------------------------------------------------------------------
# prediction containers
# ---------------------------------------------------------------------

_ACT_EPS = 1e-12


@dataclass
class PredictionSet:
    """n post-sigmoid activation maps and their thresholded masks."""

    activations: np.ndarray
    masks: np.ndarray
    n_samples: int

    def __post_init__(self):
        if self.n_samples != self.activations.shape[0]:
            raise UsageError("n_samples does not match the activation stack")
        if np.any(self.activations <= 0.0) or np.any(self.activations >= 1.0):
            raise UsageError("activations must lie strictly inside (0,1)")


def _prediction_set(act_list: list) -> PredictionSet:
    acts = np.clip(np.stack(act_list), _ACT_EPS, 1.0 - _ACT_EPS)
    masks = (acts > 0.5).astype(np.uint8)
    return PredictionSet(activations=acts, masks=masks, n_samples=len(act_list))


def uncertainty_map(p: PredictionSet) -> np.ndarray:
    """Voxelwise population standard deviation of the activations."""
    if p.n_samples < 2:
        raise UsageError(f"uncertainty needs >= 2 samples, got {p.n_samples}")
    return p.activations.std(axis=0)


def mean_prediction(p: PredictionSet) -> np.ndarray:
    """Mean activation thresholded at 0.5."""
    return (p.activations.mean(axis=0) > 0.5).astype(np.uint8)


@dataclass
class PosteriorSample:
    """Base posterior Gaussian, its reparameterized draw z0, the flowed
    draw zK, and the accumulated log|det| of the chain."""

    dist: DiagGaussian
    z0: LatentSample
    zk: Tensor
    sum_logdet: Tensor


def _fresh_counters() -> dict:
    return {"unet_forward": 0, "prior_forward": 0,
            "posterior_forward": 0, "fcomb_forward": 0}


# ---------------------------------------------------------------------
# models
# ---------------------------------------------------------------------

class ProbUNet3D:
    """U-Net + latent prior/posterior + feature-combination head."""

    def __init__(self, config: ModelConfig):
        if config.variant == "unet3d":
            raise UsageError("variant unet3d is the deterministic baseline; "
                             "use build_model")
        rng = np.random.default_rng(config.init_seed)
        self.config = config
        self.unet = _UNetTrunk(config, rng)
        self.prior = _LatentEncoder(config.in_channels, config, rng)
        self.posterior = _LatentEncoder(config.in_channels + 1, config, rng)
        steps = config.flow_steps if config.flow_kind != "none" else 0
        self.flow = make_chain(config.flow_kind, steps, config.latent_dim, rng)
        self.fcomb = _FComb(config, rng)
        self.params = OrderedDict(
            self.unet.params("unet")
            + self.prior.params("prior")
            + self.posterior.params("posterior")
            + self.flow.params("flow")
            + self.fcomb.params("fcomb"))
        self.counters = _fresh_counters()

    def reset_counters(self) -> None:
        self.counters = _fresh_counters()

    def unet_forward(self, x) -> Tensor:
        t = _as_input_tensor(x)
        _check_divisible(t.shape[1:], self.config.levels)
        self.counters["unet_forward"] += 1
        return self.unet.forward(t)

    def prior_forward(self, x) -> DiagGaussian:
        t = _as_input_tensor(x)
        _check_divisible(t.shape[1:], self.config.levels)
        self.counters["prior_forward"] += 1
        return self.prior.forward(t)

    def posterior_forward(self, x, y, eps: np.ndarray) -> PosteriorSample:
        t = _as_input_tensor(x)
        ymask = np.asarray(y, dtype=np.float64)
        if ymask.ndim != 3 or ymask.shape != t.shape[1:]:
            raise ShapeError(f"annotation grid {ymask.shape} does not match "
                             f"input grid {t.shape[1:]}")
        _check_divisible(t.shape[1:], self.config.levels)
        self.counters["posterior_forward"] += 1
        xy = ad.concat_channels(t, Tensor(ymask[None]))
        dist = self.posterior.forward(xy)
        z0 = sample_reparam(dist, np.asarray(eps, dtype=np.float64))
        zk, sum_logdet = self.flow.apply(z0.value)
        return PosteriorSample(dist=dist, z0=z0, zk=zk, sum_logdet=sum_logdet)

    def fcomb_forward(self, features: Tensor, z: Tensor) -> Tensor:
        if features.shape[0] != self.config.feature_channels:
            raise ShapeError(f"feature channels {features.shape[0]} != "
                             f"{self.config.feature_channels}")
        if z.shape != (self.config.latent_dim,):
            raise ShapeError(f"latent shape {z.shape} != ({self.config.latent_dim},)")
        self.counters["fcomb_forward"] += 1
        return self.fcomb.forward(features, z)

    def predict_n(self, x, n: int = 16, seed: int = 0) -> PredictionSet:
        """One U-Net pass, one prior pass, then n latent draws through the
        feature-combination head."""
        if n < 1:
            raise UsageError(f"need n >= 1 samples, got {n}")
        with ad.no_grad():
            features = self.unet_forward(x)
            dist = self.prior_forward(x)
            mean = dist.mean.data
            std = np.exp(0.5 * dist.log_var.data)
            rng = np.random.default_rng(seed)
            acts = []
            for _ in range(n):
                eps = rng.standard_normal(mean.shape[0])
                logits = self.fcomb_forward(features, Tensor(mean + std * eps))
                acts.append(ad._sigmoid_np(logits.data[0]))
        return _prediction_set(acts)


class DeterministicUNet3D:
    """Baseline without a latent space: U-Net features plus a 1x1x1 head."""

    def __init__(self, config: ModelConfig):
        if config.variant != "unet3d":
            raise UsageError("DeterministicUNet3D only backs the unet3d variant")
        rng = np.random.default_rng(config.init_seed)
        self.config = config
        self.unet = _UNetTrunk(config, rng)
        self.head = Conv3d(config.feature_channels, 1, 1, rng)
        self.params = OrderedDict(self.unet.params("unet") + self.head.params("head"))
        self.counters = _fresh_counters()

    def reset_counters(self) -> None:
        self.counters = _fresh_counters()

    def unet_forward(self, x) -> Tensor:
        t = _as_input_tensor(x)
        _check_divisible(t.shape[1:], self.config.levels)
        self.counters["unet_forward"] += 1
        return self.unet.forward(t)

    def head_forward(self, features: Tensor) -> Tensor:
        if features.shape[0] != self.config.feature_channels:
            raise ShapeError(f"feature channels {features.shape[0]} != "
                             f"{self.config.feature_channels}")
        self.counters["fcomb_forward"] += 1
        return self.head(features)

    def predict_n(self, x, n: int = 16, seed: int = 0) -> PredictionSet:
        """Single forward pass replicated n times (no sampling)."""
        if n < 1:
            raise UsageError(f"need n >= 1 samples, got {n}")
        with ad.no_grad():
            logits = self.head_forward(self.unet_forward(x))
            act = ad._sigmoid_np(logits.data[0])
        return _prediction_set([act] * n)


def build_model(config: ModelConfig):
    if config.variant == "unet3d":
        return DeterministicUNet3D(config)
    return ProbUNet3D(config)


# ---------------------------------------------------------------------
# checkpoint format (little-endian, magic "PUN3")
# ---------------------------------------------------------------------

CKPT_MAGIC = b"PUN3"
CKPT_VERSION = 1


def save_checkpoint(path, model) -> None:
    cfg_json = json.dumps(model.config.to_dict(), sort_keys=True,
                          separators=(",", ":")).encode("utf-8")
    parts = [CKPT_MAGIC,
             struct.pack("<I", CKPT_VERSION),
             struct.pack("<I", len(cfg_json)), cfg_json,
             struct.pack("<I", len(model.params))]
    for name, tensor in model.params.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", tensor.data.ndim))
        parts.append(struct.pack(f"<{tensor.data.ndim}I", *tensor.data.shape))
        parts.append(tensor.data.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path):
    from .data import _Reader

    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    magic = r.take(4, "magic")
    if magic != CKPT_MAGIC:
        raise DataFormatError(f"bad magic {magic!r}, expected {CKPT_MAGIC!r}", offset=0)
    (version,) = r.unpack("I", "checkpoint version")
    if version != CKPT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}", offset=4)
    (cfg_len,) = r.unpack("I", "config length")
    cfg_off = r.off
    try:
        cfg = ModelConfig.from_dict(json.loads(r.take(cfg_len, "config block")))
    except (json.JSONDecodeError, TypeError, UsageError) as exc:
        raise DataFormatError(f"bad config block: {exc}", offset=cfg_off) from None
    model = build_model(cfg)
    count_off = r.off
    (n_params,) = r.unpack("I", "parameter count")
    if n_params != len(model.params):
        raise DataFormatError(f"checkpoint has {n_params} parameters, model "
                              f"declares {len(model.params)}", offset=count_off)
    for expect_name, tensor in model.params.items():
        (name_len,) = r.unpack("H", "parameter name length")
        name_off = r.off
        name = r.take(name_len, "parameter name").decode("utf-8")
        if name != expect_name:
            raise DataFormatError(f"parameter {name!r} out of order, expected "
                                  f"{expect_name!r}", offset=name_off)
        (ndim,) = r.unpack("B", "parameter rank")
        shape_off = r.off
        shape = r.unpack(f"{ndim}I", "parameter shape")
        if shape != tensor.data.shape:
            raise DataFormatError(f"parameter {name!r} shape {shape} != declared "
                                  f"{tensor.data.shape}", offset=shape_off)
        nbytes = 8 * int(np.prod(shape, dtype=np.int64)) if ndim else 8
        payload = r.take(nbytes, f"parameter {name} payload")
        tensor.data = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    if r.off != len(r.buf):
        raise DataFormatError(f"{len(r.buf) - r.off} trailing bytes after parameters",
                              offset=r.off)
    return model
