"""Configurable 3D U-Net, weighted cross entropy and the patch training loop."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
import torch.utils.deterministic
from torch import nn

from .patch_sampler import ChannelStats, Subject, sample_patch, standardize
from .volume_io import NUM_CLASSES

log = logging.getLogger(__name__)

IN_CHANNELS = 4
NORM_EPS = 1e-5
PRELU_INIT = 0.25
BACKGROUND_WEIGHT = 1.0
FOREGROUND_WEIGHT = 2.0


class TrainingError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    num_blocks: int = 3  # M
    patch_size: int = 64  # N
    base_features: int = 96  # f
    loss_type: str = "uniform"

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.base_features < 1:
            raise ValueError("base_features must be >= 1")
        if self.loss_type not in ("uniform", "weighted"):
            raise ValueError(f"loss_type must be 'uniform' or 'weighted', got {self.loss_type!r}")
        if self.patch_size % (2 ** self.num_blocks):
            raise ValueError(f"patch size {self.patch_size} is not divisible by "
                             f"2^{self.num_blocks} = {2 ** self.num_blocks}")

    @property
    def class_weights(self) -> tuple[float, ...]:
        if self.loss_type == "weighted":
            return (BACKGROUND_WEIGHT,) + (FOREGROUND_WEIGHT,) * (NUM_CLASSES - 1)
        return (1.0,) * NUM_CLASSES


# the six ensemble members
REFERENCE_CONFIGS = (
    ModelConfig(3, 64, 96, "uniform"),
    ModelConfig(3, 64, 96, "weighted"),
    ModelConfig(4, 64, 96, "uniform"),
    ModelConfig(4, 96, 96, "weighted"),
    ModelConfig(3, 80, 64, "uniform"),
    ModelConfig(3, 80, 64, "weighted"),
)


@dataclass
class TrainSchedule:
    epochs: int = 640
    patches_per_subject: int = 1
    learning_rate: float = 5e-4
    batch_size: int = 1
    dropout: float = 0.5
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 0 or self.patches_per_subject < 1 or self.learning_rate <= 0:
            raise ValueError("invalid training schedule")
        if self.batch_size != 1:
            raise ValueError("only batch size 1 is supported")
        self.adam_betas = tuple(self.adam_betas)


def prelu(x, alpha):
    """max(0, x) - alpha * max(0, -x), elementwise."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(0.0, x) - alpha * np.maximum(0.0, -x)


def inference_normalize(x: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """Normalize each channel of (B, C, ...) by its own statistics over batch and space.

    With batch size 1 this is a per-feature-map normalization; no running
    statistics are kept, so train and inference behave identically.
    """
    dims = [0] + list(range(2, x.ndim))
    mean = x.mean(dim=dims, keepdim=True)
    var = x.var(dim=dims, keepdim=True, unbiased=False)
    return (x - mean) / torch.sqrt(var + eps)


class ChannelNorm(nn.Module):
    def __init__(self, channels: int, eps: float = NORM_EPS):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        shape = (1, -1) + (1,) * (x.ndim - 2)
        return inference_normalize(x, self.eps) * self.weight.view(shape) + self.bias.view(shape)


class ConvBlock(nn.Module):
    """Two 3x3x3 convolutions, each followed by PReLU then normalization."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Conv3d(cin, cout, 3, padding=1),
            nn.PReLU(cout, init=PRELU_INIT),
            ChannelNorm(cout),
            nn.Conv3d(cout, cout, 3, padding=1),
            nn.PReLU(cout, init=PRELU_INIT),
            ChannelNorm(cout),
        )

    def forward(self, x):
        return self.layers(x)


class UNet3D(nn.Module):
    """Encoder-decoder with ``M`` pooling levels.

    Encoder block ``b`` (0..M) outputs ``f * 2**b`` channels; block M is the
    bottleneck at spatial size N / 2**M and is followed by dropout. Each
    decoder level upsamples with a stride-2 transposed convolution that halves
    the channels, concatenates the matching encoder output, and applies a
    ConvBlock. A 1x1x1 convolution produces the class logits.
    """

    def __init__(self, config: ModelConfig, dropout: float = 0.5):
        super().__init__()
        self.config = config
        m, f = config.num_blocks, config.base_features
        widths = [f * 2 ** b for b in range(m + 1)]
        self.encoders = nn.ModuleList()
        cin = IN_CHANNELS
        for w in widths:
            self.encoders.append(ConvBlock(cin, w))
            cin = w
        self.pool = nn.MaxPool3d(2)
        self.dropout = nn.Dropout(dropout) if dropout > 0 else nn.Identity()
        self.upconvs = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for b in reversed(range(m)):
            self.upconvs.append(nn.ConvTranspose3d(widths[b + 1], widths[b], 2, stride=2))
            self.decoders.append(ConvBlock(2 * widths[b], widths[b]))
        self.classifier = nn.Conv3d(widths[0], NUM_CLASSES, 1)

    def encode(self, x) -> list[torch.Tensor]:
        """Outputs of every encoder block, shallowest first."""
        feats = []
        for b, enc in enumerate(self.encoders):
            if b:
                x = self.pool(x)
            x = enc(x)
            feats.append(x)
        feats[-1] = self.dropout(feats[-1])
        return feats

    def forward(self, x):
        """(B, 4, D, H, W) -> (B, K, D, H, W) logits."""
        feats = self.encode(x)
        x = feats[-1]
        for up, dec, skip in zip(self.upconvs, self.decoders, reversed(feats[:-1])):
            x = dec(torch.cat([up(x), skip], dim=1))
        return self.classifier(x)


def build_model(config: ModelConfig, seed: int = 0, dropout: float = 0.5,
                device: str | torch.device = "cpu", dtype=torch.float32) -> UNet3D:
    """Seeded construction. ``device="meta"`` builds a shape-only model without allocating."""
    if str(device) == "meta":
        with torch.device("meta"):
            return UNet3D(config, dropout=dropout).to(dtype=dtype)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = UNet3D(config, dropout=dropout)
    return model.to(device=device, dtype=dtype)


def to_channels_first(x: np.ndarray) -> torch.Tensor:
    """(D, H, W, C) array -> (1, C, D, H, W) tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(x, -1, 0)))[None]


def to_channels_last(t: torch.Tensor) -> np.ndarray:
    return np.moveaxis(t[0].detach().cpu().numpy(), 0, -1)


def forward_logits(model: UNet3D, patch: np.ndarray) -> np.ndarray:
    """Run one (N, N, N, 4) patch through the network; returns (N, N, N, K) logits."""
    p = next(model.parameters())
    x = to_channels_first(patch).to(dtype=p.dtype, device=p.device)
    with torch.no_grad():
        return to_channels_last(model(x))


def cross_entropy_loss(logits: torch.Tensor, labels: torch.Tensor, class_weights) -> torch.Tensor:
    """Mean over voxels of w[true class] * -log softmax(true class).

    ``logits`` is (B, K, ...) and ``labels`` (B, ...) of class indices.
    """
    if logits.shape[0] != labels.shape[0] or logits.shape[2:] != labels.shape[1:]:
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} do not align")
    logp = F.log_softmax(logits, dim=1)
    nll = -logp.gather(1, labels.long().unsqueeze(1)).squeeze(1)
    w = torch.as_tensor(class_weights, dtype=logits.dtype, device=logits.device)[labels.long()]
    return (w * nll).mean()


@dataclass
class TrainResult:
    model: UNet3D
    loss_history: list[float] = field(default_factory=list)


def set_deterministic(flag: bool = True) -> None:
    """Deterministic kernels on a single thread, for bit-reproducible runs."""
    torch.use_deterministic_algorithms(flag)
    # filling fresh allocations costs ~25% of a step and no kernel reads them
    torch.utils.deterministic.fill_uninitialized_memory = False
    if flag:
        torch.set_num_threads(1)


def train(model: UNet3D, subjects: Sequence[Subject], stats: ChannelStats,
          sched: TrainSchedule, rng: np.random.Generator, seed: int = 0,
          log_every: int = 0) -> TrainResult:
    """Adam at a fixed learning rate, one random patch per subject per epoch.

    Subject order is permuted every epoch; each step uses a single patch.
    """
    if not subjects:
        raise TrainingError("no training subjects")
    n = model.config.patch_size
    weights = model.config.class_weights
    p0 = next(model.parameters())
    opt = torch.optim.Adam(model.parameters(), lr=sched.learning_rate,
                           betas=sched.adam_betas, eps=sched.adam_eps)
    torch.manual_seed(seed)  # dropout masks
    model.train()
    history: list[float] = []
    for epoch in range(sched.epochs):
        order = rng.permutation(len(subjects))
        epoch_loss = 0.0
        for si in order:
            s = subjects[si]
            for _ in range(sched.patches_per_subject):
                patch = standardize(sample_patch(rng, s.weights(n), s.image, s.labels, n), stats)
                x = to_channels_first(patch.image).to(dtype=p0.dtype, device=p0.device)
                y = torch.from_numpy(patch.labels.astype(np.int64))[None].to(p0.device)
                loss = cross_entropy_loss(model(x), y, weights)
                value = float(loss.detach())
                if not np.isfinite(value):
                    raise TrainingError(f"non-finite loss {value} at epoch {epoch}, subject "
                                        f"{s.subject_id}, center {patch.center}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                history.append(value)
                epoch_loss += value
        if log_every and (epoch + 1) % log_every == 0:
            log.info("epoch %d/%d mean loss %.4f", epoch + 1, sched.epochs,
                     epoch_loss / (len(subjects) * sched.patches_per_subject))
    model.eval()
    return TrainResult(model, history)


def save_checkpoint(path, model: UNet3D, stats: ChannelStats, loss_history=None, **extra) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "state_dict": model.state_dict(),
        "config": asdict(model.config),
        "stats": stats.to_dict(),
        "loss_history": list(loss_history or []),
        **extra,
    }, path)


def load_checkpoint(path, device="cpu") -> tuple[UNet3D, ChannelStats, dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing checkpoint {path}")
    ckpt = torch.load(path, map_location=device, weights_only=False)
    model = UNet3D(ModelConfig(**ckpt["config"]))
    model.load_state_dict(ckpt["state_dict"])
    model.to(device).eval()
    return model, ChannelStats.from_dict(ckpt["stats"]), ckpt
