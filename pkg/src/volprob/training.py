"""Training: variational objective, cyclic beta annealing, Adam with
plateau learning-rate decay, and the seeded fit loop.

The objective is the Monte-Carlo form of the variational bound: a
voxel-summed binary cross-entropy on the posterior-sample logits plus
beta times (log q0(z0) - sum log|det| - log p(zK | x)). With no flow
steps the bracket is a single-sample estimate of the Gaussian KL.
Cross-entropy is summed, not averaged, so the recon/KL balance does
not silently change with crop size; beta absorbs the scale.

Each training step draws one of the four annotations per case
uniformly at random. Validation is deterministic: annotator 0,
eps = 0, beta = 1.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .distributions import log_prob
from .errors import NumericError, ShapeError, UsageError
from .networks import DeterministicUNet3D, save_checkpoint


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 4
    plateau_factor: float = 0.2
    plateau_patience_epochs: int = 20
    beta_cycles: int = 4
    beta_ramp_fraction: float = 0.5
    max_epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.weight_decay < 0:
            raise UsageError(f"lr must be > 0 and weight_decay >= 0, got "
                             f"{self.lr}, {self.weight_decay}")
        if self.batch_size < 1:
            raise UsageError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.plateau_factor < 1.0:
            raise UsageError(f"plateau_factor must be in (0,1), got {self.plateau_factor}")
        if self.plateau_patience_epochs < 1:
            raise UsageError(f"plateau_patience_epochs must be >= 1, got "
                             f"{self.plateau_patience_epochs}")
        if self.beta_cycles < 1:
            raise UsageError(f"beta_cycles must be >= 1, got {self.beta_cycles}")
        if not 0.0 < self.beta_ramp_fraction <= 1.0:
            raise UsageError(f"beta_ramp_fraction must be in (0,1], got "
                             f"{self.beta_ramp_fraction}")
        if self.max_epochs < 0:
            raise UsageError(f"max_epochs must be >= 0, got {self.max_epochs}")

    def to_dict(self) -> dict:
        return asdict(self)


def parse_kv_text(text: str) -> dict:
    """key=value lines; blank lines and # comments are skipped."""
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno} is not key=value: {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in out:
            raise UsageError(f"duplicate config key {key!r} at line {lineno}")
        out[key] = value.strip()
    return out


def train_config_from_strings(kv: dict) -> TrainConfig:
    """Build a TrainConfig from string values, coercing per field type."""
    casts = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for key, raw in kv.items():
        if key not in casts:
            raise UsageError(f"unknown training config key {key!r}; valid: "
                             f"{', '.join(sorted(casts))}")
        kind = casts[key]
        try:
            values[key] = int(raw) if kind == "int" else float(raw)
        except ValueError:
            raise UsageError(f"config key {key!r} expects {kind}, got {raw!r}") from None
    return TrainConfig(**values)


# ---------------------------------------------------------------------
# beta schedule
# ---------------------------------------------------------------------

@dataclass
class BetaSchedule:
    total_steps: int
    cycles: int
    ramp_fraction: float

    def __post_init__(self):
        if self.total_steps < 1 or self.cycles < 1:
            raise UsageError("total_steps and cycles must be >= 1")
        if not 0.0 < self.ramp_fraction <= 1.0:
            raise UsageError(f"ramp_fraction must be in (0,1], got {self.ramp_fraction}")


def beta_at(s: BetaSchedule, step: int) -> float:
    """Cosine ramp from 0 to 1 over the first ramp_fraction of each of
    `cycles` equal windows, then held at 1 until the window restarts."""
    if not 0 <= step < s.total_steps:
        raise UsageError(f"step {step} outside [0, {s.total_steps})")
    window = s.total_steps / s.cycles
    tau = math.fmod(step, window) / window
    return 0.5 * (1.0 - math.cos(math.pi * min(1.0, tau / s.ramp_fraction)))


# ---------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class AdamState:
    def __init__(self, params: dict):
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.t = 0


def adam_step(state: AdamState, params: dict, grads: dict,
              lr: float, weight_decay: float) -> None:
    """In-place bias-corrected Adam update with coupled L2 decay."""
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1 ** state.t
    bc2 = 1.0 - ADAM_BETA2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter "
                             f"{name} shape {p.data.shape}")
        if weight_decay:
            g = g + weight_decay * p.data
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


def plateau_lr(history, patience: int, factor: float, lr0: float) -> float:
    """Learning rate implied by a validation-loss history.

    Reduce by `factor` whenever `patience` consecutive epochs fail to
    strictly improve on the best value seen since the last reduction.
    """
    if patience < 1:
        raise UsageError(f"patience must be >= 1, got {patience}")
    lr = lr0
    best = math.inf
    stale = 0
    for val in history:
        if val < best:
            best = val
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                lr *= factor
                best = val
                stale = 0
    return lr


# ---------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------

def _target_array(y) -> np.ndarray:
    arr = np.asarray(y, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[0] != 1:
        raise ShapeError(f"target mask must be (D,H,W) or (1,D,H,W), got {arr.shape}")
    return arr


def recon_loss(model, x, y) -> Tensor:
    """Voxel-summed binary cross-entropy for the deterministic baseline."""
    logits = model.head_forward(model.unet_forward(x))
    return ad.bce_with_logits_sum(logits, _target_array(y))


def elbo_loss(model, x, y, beta: float, eps: np.ndarray):
    """Negative variational bound for one (volume, annotation) pair.

    Returns (loss, parts) with parts = {recon, kl_mc, logdet} as floats.
    beta = 0 drops the latent bracket from the graph entirely, so the
    prior receives no gradient from it.
    """
    if beta < 0:
        raise UsageError(f"beta must be >= 0, got {beta}")
    target = _target_array(y)
    features = model.unet_forward(x)
    post = model.posterior_forward(x, target[0], eps)
    logits = model.fcomb_forward(features, post.zk)
    recon = ad.bce_with_logits_sum(logits, target)
    prior_dist = model.prior_forward(x)
    log_q0 = log_prob(post.dist, post.z0.value)
    log_p = log_prob(prior_dist, post.zk)
    kl_mc = log_q0 - post.sum_logdet - log_p
    loss = recon if beta == 0.0 else recon + beta * kl_mc
    parts = {"recon": recon.item(), "kl_mc": kl_mc.item(),
             "logdet": post.sum_logdet.item()}
    return loss, parts


def validation_loss(model, case, beta: float = 1.0) -> float:
    """Deterministic held-out loss: annotator 0, eps = 0."""
    with ad.no_grad():
        if isinstance(model, DeterministicUNet3D):
            return recon_loss(model, case.volume, case.annotations[0]).item()
        eps = np.zeros(model.config.latent_dim)
        loss, _ = elbo_loss(model, case.volume, case.annotations[0], beta, eps)
        return loss.item()


# ---------------------------------------------------------------------
# fit loop
# ---------------------------------------------------------------------

def _case_loss(model, case, ann_idx: int, beta: float, eps: np.ndarray) -> Tensor:
    if isinstance(model, DeterministicUNet3D):
        return recon_loss(model, case.volume, case.annotations[ann_idx])
    loss, _ = elbo_loss(model, case.volume, case.annotations[ann_idx], beta, eps)
    return loss


def fit(model, train_cases, val_cases, cfg: TrainConfig,
        checkpoint_path=None) -> list:
    """Seeded training loop with per-epoch validation, plateau LR decay,
    and checkpoint-on-best. Returns one report record per epoch.

    Batch gradients are the mean over per-case backward passes run
    sequentially, which keeps peak graph memory at one case.
    """
    if not train_cases:
        raise UsageError("training requires at least one case")
    if not val_cases:
        raise UsageError("validation requires at least one case")
    rng = np.random.default_rng(cfg.seed)
    n = len(train_cases)
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = max(1, cfg.max_epochs * steps_per_epoch)
    schedule = BetaSchedule(total_steps=total_steps, cycles=cfg.beta_cycles,
                            ramp_fraction=cfg.beta_ramp_fraction)
    latent_dim = getattr(model.config, "latent_dim", 0)
    state = AdamState(model.params)
    report = []
    history = []
    best_val = math.inf
    lr = cfg.lr
    step = 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        epoch_losses = []
        betas = []
        for start in range(0, n, cfg.batch_size):
            chunk = order[start:start + cfg.batch_size]
            beta = beta_at(schedule, step)
            betas.append(beta)
            grads = {name: np.zeros_like(t.data) for name, t in model.params.items()}
            batch_loss = 0.0
            for idx in chunk:
                case = train_cases[idx]
                ann_idx = int(rng.integers(4))
                eps = rng.standard_normal(latent_dim)
                for t in model.params.values():
                    t.grad = None
                loss = _case_loss(model, case, ann_idx, beta, eps)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError(f"non-finite loss {value} at epoch {epoch} "
                                       f"step {step}")
                ad.backward(loss)
                for name, t in model.params.items():
                    if t.grad is not None:
                        grads[name] += t.grad
                batch_loss += value
            scale = 1.0 / len(chunk)
            for name in grads:
                grads[name] *= scale
            adam_step(state, model.params, grads, lr, cfg.weight_decay)
            epoch_losses.append(batch_loss * scale)
            step += 1
        val = float(np.mean([validation_loss(model, c) for c in val_cases]))
        if not math.isfinite(val):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        history.append(val)
        if val < best_val:
            best_val = val
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, model)
        lr = plateau_lr(history, cfg.plateau_patience_epochs, cfg.plateau_factor,
                        cfg.lr)
        report.append({"epoch": epoch,
                       "train_loss": float(np.mean(epoch_losses)),
                       "val_loss": val,
                       "lr": lr,
                       "beta_mean": float(np.mean(betas))})
    if checkpoint_path is not None and cfg.max_epochs == 0:
        save_checkpoint(checkpoint_path, model)
    return report


def write_report(path, report: list) -> None:
    """One JSON record per epoch."""
    with open(path, "w", encoding="utf-8") as fh:
        for row in report:
            fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")
