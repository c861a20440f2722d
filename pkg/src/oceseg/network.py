"""The small valid-convolution U-Net, its optimizer and the training loop.

Architecture: one encoder block, a 2x2 max-pool, one bottleneck block, 2x
nearest upsampling, a center-crop skip concatenation, one decoder block and
a 1x1 linear head to 2 output channels.  Each block is a [3,1,1,3] sequence
of valid convolutions with ReLU.  The chain consumes a 16-pixel context
margin (8 per side), so a (C, H, W) input yields a (2, H-16, W-16) field.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import data as dataio
from .autodiff import Tape, Tensor, conv2d_valid, crop_concat, maxpool2, relu, upsample_nearest2
from .errors import FormatError, ShapeError
from .loss import LossConfig, oce_loss, sample_pairs

CONTEXT = 16  # input-minus-output margin of the valid-convolution chain
MIN_INPUT = 20  # smallest spatial extent the chain supports


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    base_fmaps: int = 64
    fmap_factor: int = 3
    depth: int = 1
    block_kernels: tuple = (3, 1, 1, 3)
    out_channels: int = 2

    def __post_init__(self):
        if self.in_channels not in (1, 2):
            raise ValueError("in_channels must be 1 or 2")
        if self.depth != 1:
            raise ValueError("only depth 1 is supported")
        if tuple(self.block_kernels) != (3, 1, 1, 3):
            raise ValueError("block kernel sequence is fixed to (3, 1, 1, 3)")
        if self.base_fmaps < 1 or self.fmap_factor < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")


def _layer_plan(config: ModelConfig):
    base = config.base_fmaps
    mid = base * config.fmap_factor
    plan = []
    chans = [config.in_channels] + [base] * 4
    for i, k in enumerate(config.block_kernels):
        plan.append((f"enc{i}", chans[i], chans[i + 1], k))
    chans = [base] + [mid] * 4
    for i, k in enumerate(config.block_kernels):
        plan.append((f"bot{i}", chans[i], chans[i + 1], k))
    chans = [base + mid] + [base] * 4
    for i, k in enumerate(config.block_kernels):
        plan.append((f"dec{i}", chans[i], chans[i + 1], k))
    plan.append(("head", base, config.out_channels, 1))
    return plan


def parameter_count(config: ModelConfig) -> int:
    return sum(co * ci * k * k + co for _, ci, co, k in _layer_plan(config))


class ModelParams:
    """Ordered named weight/bias tensors for one model instance."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config, {k: Tensor(v.data.copy()) for k, v in self.tensors.items()}
        )


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """He-style fan-in scaled normal weights with zero biases, deterministic in seed."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, cin, cout, k in _layer_plan(config):
        fan_in = cin * k * k
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k))
        tensors[name + ".w"] = Tensor(w.astype(np.float32))
        tensors[name + ".b"] = Tensor(np.zeros(cout, np.float32))
    return ModelParams(config, tensors)


def _block(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    for i in range(4):
        x = relu(conv2d_valid(x, params[f"{prefix}{i}.w"], params[f"{prefix}{i}.b"]))
    return x


def forward(params: ModelParams, image) -> Tensor:
    """Dense offset field for a (C, H, W) image; output is (2, H-16, W-16)."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.data.ndim != 3:
        raise ShapeError("forward expects (C,H,W)")
    C, H, W = x.shape
    if C != params.config.in_channels:
        raise ShapeError(
            f"image has {C} channels, model expects {params.config.in_channels}"
        )
    if H < MIN_INPUT or W < MIN_INPUT:
        raise ShapeError(f"input {H}x{W} too small for the valid-convolution chain")
    if H % 2 or W % 2:
        raise ShapeError(f"input {H}x{W} leads to odd intermediate dims")
    h = _block(x, params, "enc")
    skip = h
    h = maxpool2(h)
    h = _block(h, params, "bot")
    h = upsample_nearest2(h)
    h = crop_concat(skip, h)
    h = _block(h, params, "dec")
    return conv2d_valid(h, params["head.w"], params["head.b"])


# ---------------------------------------------------------------------------
# Optimizer

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: ModelParams) -> "AdamState":
        return cls(
            m={k: np.zeros_like(t.data) for k, t in params.items()},
            v={k: np.zeros_like(t.data) for k, t in params.items()},
        )


def adam_step(state: AdamState, params: ModelParams, lr: float) -> None:
    """One in-place Adam update with bias correction."""
    for name, t in params.items():
        if t.grad is None:
            raise ValueError(f"missing gradient for {name}")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, t in params.items():
        g = t.grad
        m, v = state.m[name], state.v[name]
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        t.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def lr_schedule(epoch: int, base: float = 4e-5) -> float:
    """Base rate for the first 20 epochs, then /10, then /100 from epoch 30."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if epoch < 20:
        return base
    if epoch < 30:
        return base / 10.0
    return base / 100.0


# ---------------------------------------------------------------------------
# Training

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    crop_size: int = 252
    base_lr: float = 4e-5
    steps_per_epoch: Optional[int] = None  # default: len(dataset) // batch_size


@dataclass
class TrainResult:
    params: ModelParams
    adam: AdamState
    epoch_losses: list = field(default_factory=list)
    next_epoch: int = 0


def train(
    images,
    model_config: ModelConfig,
    loss_config: LossConfig,
    train_config: TrainConfig,
    seed: int,
    resume: Optional[TrainResult] = None,
    checkpoint_path=None,
    checkpoint_every: int = 0,
    log=None,
) -> TrainResult:
    """Run the self-supervised loop; fully deterministic in (inputs, seed).

    Each step draws ``batch_size`` random crops, accumulates loss gradients
    over them and applies one Adam update at the scheduled rate.  Randomness
    is drawn from a per-epoch generator seeded by (seed, epoch), so training
    resumed from a checkpoint at an epoch boundary replays the exact stream
    of the uninterrupted run.
    """
    if not images:
        raise ValueError("empty dataset")
    crop = train_config.crop_size
    for img in images:
        if img.ndim != 3:
            raise ShapeError("dataset images must be (C,H,W)")
        if img.shape[1] < crop or img.shape[2] < crop:
            raise ShapeError(
                f"crop {crop} larger than image {img.shape[1]}x{img.shape[2]}"
            )
    if resume is not None:
        state = TrainResult(
            resume.params, resume.adam, list(resume.epoch_losses), resume.next_epoch
        )
    else:
        params = init_params(model_config, seed)
        state = TrainResult(params, AdamState.fresh(params))

    n = len(images)
    steps = train_config.steps_per_epoch or max(1, n // train_config.batch_size)
    for epoch in range(state.next_epoch, train_config.epochs):
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(n)
        lr = lr_schedule(epoch, train_config.base_lr)
        step_losses = []
        for s in range(steps):
            state.params.zero_grads()
            total = 0.0
            for j in range(train_config.batch_size):
                img = images[order[(s * train_config.batch_size + j) % n]]
                r0 = int(rng.integers(0, img.shape[1] - crop + 1))
                c0 = int(rng.integers(0, img.shape[2] - crop + 1))
                patch = np.ascontiguousarray(img[:, r0:r0 + crop, c0:c0 + crop])
                with Tape() as tape:
                    out = forward(state.params, Tensor(patch))
                    pairs = sample_pairs(out.shape[1:], loss_config, rng)
                    loss = oce_loss(out, pairs, loss_config)
                    tape.backward(loss)
                total += loss.item()
            adam_step(state.adam, state.params, lr)
            step_losses.append(total)
        state.epoch_losses.append(float(np.mean(step_losses)))
        state.next_epoch = epoch + 1
        if log is not None:
            log(epoch, state.epoch_losses[-1])
        if checkpoint_path and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
            save_checkpoint(checkpoint_path, state.params, state.adam, state.next_epoch)
    return state


# ---------------------------------------------------------------------------
# Checkpoints

def save_checkpoint(path, params: ModelParams, adam: AdamState, next_epoch: int = 0) -> None:
    cfg = params.config
    tensors = {
        "meta.config": np.array(
            [cfg.in_channels, cfg.base_fmaps, cfg.fmap_factor, cfg.depth, cfg.out_channels],
            np.int32,
        ),
        "meta.step": np.array([adam.step], np.int32),
        "meta.epoch": np.array([next_epoch], np.int32),
    }
    for name, t in params.items():
        tensors["param." + name] = t.data
    for name in params.tensors:
        tensors["adam.m." + name] = adam.m[name]
        tensors["adam.v." + name] = adam.v[name]
    dataio.archive_write(path, tensors)


def load_checkpoint(path):
    """Returns (params, adam_state, next_epoch); validates every tensor shape."""
    tensors = dataio.archive_read(path)
    try:
        meta = tensors["meta.config"]
        config = ModelConfig(
            in_channels=int(meta[0]),
            base_fmaps=int(meta[1]),
            fmap_factor=int(meta[2]),
            depth=int(meta[3]),
            out_channels=int(meta[4]),
        )
        step = int(tensors["meta.step"][0])
        next_epoch = int(tensors["meta.epoch"][0])
    except (KeyError, IndexError, ValueError) as exc:
        raise FormatError(f"invalid checkpoint metadata: {exc}") from exc
    params_t: dict[str, Tensor] = {}
    adam = AdamState(m={}, v={}, step=step)
    for name, cin, cout, k in _layer_plan(config):
        for suffix, shape in ((".w", (cout, cin, k, k)), (".b", (cout,))):
            key = name + suffix
            for group, store in (("param.", None), ("adam.m.", adam.m), ("adam.v.", adam.v)):
                full = group + key
                if full not in tensors:
                    raise FormatError(f"checkpoint missing tensor {full}")
                arr = tensors[full]
                if arr.shape != shape or arr.dtype != np.float32:
                    raise FormatError(
                        f"checkpoint tensor {full} has shape {arr.shape}, expected {shape}"
                    )
                if store is None:
                    params_t[key] = Tensor(arr)
                else:
                    store[key] = arr.copy()
    return ModelParams(config, params_t), adam, next_epoch
