"""Two-branch frequency-dynamic CRNN.

One shared convolutional block feeds two structurally identical branches: a
10-class sound-event branch and a 4-class acoustic-characteristic branch that
differ only in head width. Each branch stacks frequency-dynamic conv blocks
(per-frequency attention over K basis kernels), a bidirectional GRU, and a
per-frame sigmoid head; clip probabilities come from linear-softmax pooling
of frame probabilities. The auxiliary branch can be stripped for inference,
leaving the single-branch network bit for bit.

Everything here stays on CPU float32 by default; grad_check switches a copy
of the graph to float64 and compares autograd against central finite
differences on a random subsample of parameters.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as nnf
from torch import nn

PROB_CLAMP = 1e-7


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs. Defaults are desk scale, not the full-size network.

    shared_block is (channels, kernel, (pool_t, pool_f)); each branch block is
    (channels, kernel, (pool_t, pool_f), basis_count). acc_classes=0 builds
    the single-branch network.
    """

    mel_bins: int = 128
    shared_block: tuple = (16, 3, (1, 2))
    branch_blocks: tuple = (
        (16, 3, (2, 2), 4),
        (32, 3, (2, 2), 4),
        (32, 3, (1, 2), 4),
    )
    recurrent_hidden: int = 32
    recurrent_layers: int = 2
    sed_classes: int = 10
    acc_classes: int = 4
    attention_temperature: float = 1.0

    def __post_init__(self):
        if self.mel_bins < 8:
            raise ModelError("mel_bins must be >= 8")
        blocks = [(*self.shared_block, 1), *self.branch_blocks]
        for ch, kernel, pool, basis in blocks:
            if ch < 1 or basis < 1:
                raise ModelError("channel and basis counts must be >= 1")
            if kernel < 1 or kernel % 2 == 0:
                raise ModelError("kernels must be odd for same-padding")
            if min(pool) < 1:
                raise ModelError("pool factors must be >= 1")
        if self.recurrent_hidden < 1 or self.recurrent_layers < 1:
            raise ModelError("recurrent sizes must be >= 1")
        if self.sed_classes < 1 or self.acc_classes < 0:
            raise ModelError("sed_classes >= 1 and acc_classes >= 0 required")
        if self.attention_temperature <= 0:
            raise ModelError("attention temperature must be positive")

    @property
    def time_pool(self) -> int:
        total = self.shared_block[2][0]
        for _ch, _k, pool, _b in self.branch_blocks:
            total *= pool[0]
        return total

    def freq_out(self) -> int:
        f = self.mel_bins
        for pool in [self.shared_block[2]] + [b[2] for b in self.branch_blocks]:
            f = math.ceil(f / pool[1])
        return f

    def digest(self) -> str:
        return hashlib.sha1(
            json.dumps(asdict(self), sort_keys=True).encode()
        ).hexdigest()


@dataclass
class Posteriors:
    """Frame and clip probabilities; acc fields are None once stripped."""

    sed_frame: torch.Tensor
    sed_clip: torch.Tensor
    acc_frame: torch.Tensor | None = None
    acc_clip: torch.Tensor | None = None


def fdy_attention(
    x: torch.Tensor,
    attn_weight: torch.Tensor,
    attn_bias: torch.Tensor,
    temperature: float = 1.0,
) -> torch.Tensor:
    """Per-frequency kernel-attention simplex, shape (batch, K, freq)."""
    if attn_weight.shape[1] != x.shape[1]:
        raise ModelError(
            f"attention weight expects {attn_weight.shape[1]} channels, input has {x.shape[1]}"
        )
    pooled = x.mean(dim=2)  # (batch, channels, freq)
    logits = torch.einsum("kc,bcf->bkf", attn_weight, pooled) + attn_bias[None, :, None]
    return torch.softmax(logits / temperature, dim=1)


def fdy_conv(
    x: torch.Tensor,
    basis_kernels,
    attn_params,
    bias: torch.Tensor | None = None,
    temperature: float = 1.0,
    force_uniform: bool = False,
) -> torch.Tensor:
    """Frequency-dynamic convolution.

    Per-frequency attention over the K basis kernels is computed from the
    time-averaged input (linear map over channels, temperature softmax over
    K), so the effective kernel at frequency f is sum_k a_k(f) * W_k. By
    linearity of convolution that equals attention-weighting the K separate
    convolution outputs, which is how it is evaluated here. force_uniform is
    a test hook standing in for the infinite-temperature limit a_k = 1/K.
    """
    n_basis = len(basis_kernels)
    if x.ndim != 4:
        raise ModelError(f"expected (batch, channels, time, freq) input, got {x.shape}")
    if n_basis < 1:
        raise ModelError("need at least one basis kernel")
    if force_uniform:
        attn = x.new_full((x.shape[0], n_basis, x.shape[3]), 1.0 / n_basis)
    else:
        attn = fdy_attention(x, *attn_params, temperature)
        if attn.shape[1] != n_basis:
            raise ModelError(
                f"attention over {attn.shape[1]} kernels does not match {n_basis} bases"
            )
    pad = basis_kernels[0].shape[-1] // 2
    stacked = torch.stack(
        [nnf.conv2d(x, w, None, padding=pad) for w in basis_kernels], dim=1
    )  # (batch, K, out_channels, time, freq)
    out = (attn[:, :, None, None, :] * stacked).sum(dim=1)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return out


def _fan_in(shape) -> int:
    if len(shape) >= 2:
        fan = 1
        for s in shape[1:]:
            fan *= s
        return fan
    return shape[0]


class FDYConv2d(nn.Module):
    def __init__(self, in_channels, out_channels, kernel, basis_count, temperature=1.0):
        super().__init__()
        self.basis = nn.ParameterList(
            nn.Parameter(torch.empty(out_channels, in_channels, kernel, kernel))
            for _ in range(basis_count)
        )
        self.bias = nn.Parameter(torch.empty(out_channels))
        self.attn_weight = nn.Parameter(torch.empty(basis_count, in_channels))
        self.attn_bias = nn.Parameter(torch.empty(basis_count))
        self.temperature = temperature
        self.force_uniform = False  # test hook
        self.reset_parameters()

    def reset_parameters(self) -> None:
        """Fan-in uniform init; build() redraws every parameter with its own seed."""
        with torch.no_grad():
            for param in self.parameters():
                bound = 1.0 / math.sqrt(_fan_in(param.shape))
                param.uniform_(-bound, bound)

    def forward(self, x):
        return fdy_conv(
            x,
            list(self.basis),
            (self.attn_weight, self.attn_bias),
            self.bias,
            self.temperature,
            self.force_uniform,
        )


class ConvBlock(nn.Module):
    """Plain conv + ReLU + ceil-mode average pooling (the shared block)."""

    def __init__(self, in_channels, out_channels, kernel, pool):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel, padding=kernel // 2)
        self.pool = nn.AvgPool2d(pool, ceil_mode=True)

    def forward(self, x):
        return self.pool(torch.relu(self.conv(x)))


class FDYBlock(nn.Module):
    def __init__(self, in_channels, out_channels, kernel, pool, basis_count, temperature):
        super().__init__()
        self.conv = FDYConv2d(in_channels, out_channels, kernel, basis_count, temperature)
        self.pool = nn.AvgPool2d(pool, ceil_mode=True)

    def forward(self, x):
        return self.pool(torch.relu(self.conv(x)))


class Branch(nn.Module):
    """FDY blocks + bidirectional GRU + per-frame sigmoid head."""

    def __init__(self, config: ModelConfig, n_classes: int):
        super().__init__()
        in_ch = config.shared_block[0]
        blocks = []
        for ch, kernel, pool, basis in config.branch_blocks:
            blocks.append(
                FDYBlock(in_ch, ch, kernel, pool, basis, config.attention_temperature)
            )
            in_ch = ch
        self.blocks = nn.Sequential(*blocks)
        self.gru = nn.GRU(
            in_ch * config.freq_out(),
            config.recurrent_hidden,
            num_layers=config.recurrent_layers,
            bidirectional=True,
            batch_first=True,
        )
        self.head = nn.Linear(2 * config.recurrent_hidden, n_classes)

    def forward(self, x):
        x = self.blocks(x)  # (batch, ch, time, freq)
        b, ch, t, f = x.shape
        x = x.permute(0, 2, 1, 3).reshape(b, t, ch * f)
        x, _ = self.gru(x)
        probs = torch.sigmoid(self.head(x))
        return torch.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)


def linear_softmax_pool(frame_probs: torch.Tensor) -> torch.Tensor:
    """Clip probability sum(p^2)/sum(p) over time; equals p for constant p."""
    return frame_probs.square().sum(dim=-2) / frame_probs.sum(dim=-2)


class TwoBranchCRNN(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.shared = ConvBlock(1, config.shared_block[0], config.shared_block[1], config.shared_block[2])
        self.sed_branch = Branch(config, config.sed_classes)
        self.acc_branch = Branch(config, config.acc_classes) if config.acc_classes else None

    @property
    def has_acc(self) -> bool:
        return self.acc_branch is not None

    def forward(self, features: torch.Tensor) -> Posteriors:
        """features: (frames, mel) or (batch, frames, mel) normalized log-mel."""
        squeeze = features.ndim == 2
        if squeeze:
            features = features[None]
        if features.shape[-1] != self.config.mel_bins:
            raise ModelError(
                f"feature mel_bins {features.shape[-1]} != config {self.config.mel_bins}"
            )
        x = self.shared(features[:, None])
        sed_frame = self.sed_branch(x)
        sed_clip = linear_softmax_pool(sed_frame)
        acc_frame = acc_clip = None
        if self.acc_branch is not None:
            acc_frame = self.acc_branch(x)
            acc_clip = linear_softmax_pool(acc_frame)
        if squeeze:
            sed_frame, sed_clip = sed_frame[0], sed_clip[0]
            if acc_frame is not None:
                acc_frame, acc_clip = acc_frame[0], acc_clip[0]
        return Posteriors(sed_frame, sed_clip, acc_frame, acc_clip)


def build(config: ModelConfig, seed: int = 0) -> TwoBranchCRNN:
    """Construct and deterministically initialize the network.

    Every parameter tensor is drawn uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)]
    from one seeded generator, in named_parameters order, so the same
    (config, seed) always yields identical parameters.
    """
    model = TwoBranchCRNN(config)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for _name, param in model.named_parameters():
            bound = 1.0 / math.sqrt(_fan_in(param.shape))
            param.uniform_(-bound, bound, generator=gen)
    return model


def single_branch(config: ModelConfig) -> ModelConfig:
    return replace(config, acc_classes=0)


def strip_acc(model: TwoBranchCRNN) -> TwoBranchCRNN:
    """Drop the auxiliary branch for inference; SED outputs are unchanged."""
    if not model.has_acc:
        raise ModelError("auxiliary branch already stripped")
    stripped = copy.deepcopy(model)
    stripped.acc_branch = None
    stripped.config = single_branch(model.config)
    return stripped


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def grad_check(loss_fn, model: nn.Module, inputs, eps: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between autograd and central finite differences.

    loss_fn(model, inputs) must return a scalar. Runs on a float64 copy of
    the model; checks a random 1% subsample of scalar parameters (at least
    one). Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ModelError(f"eps {eps} outside [1e-6, 1e-3]")
    model = copy.deepcopy(model).double()

    def to_double(obj):
        if torch.is_tensor(obj):
            return obj.double() if obj.is_floating_point() else obj
        if isinstance(obj, (list, tuple)):
            return type(obj)(to_double(o) for o in obj)
        return obj

    inputs = to_double(inputs)
    loss = loss_fn(model, inputs)
    if not torch.isfinite(loss):
        raise ModelError(f"non-finite loss {loss.item()}")
    params = [p for p in model.parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [
        torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)
    ]

    sizes = [p.numel() for p in params]
    offsets = np.cumsum([0] + sizes)
    total = int(offsets[-1])
    n_checks = max(1, int(round(0.01 * total)))
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_checks, total), replace=False)

    max_err = 0.0
    with torch.no_grad():
        for flat_idx in picks:
            t = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
            local = int(flat_idx - offsets[t])
            view = params[t].view(-1)
            original = view[local].item()
            view[local] = original + eps
            hi = loss_fn(model, inputs).item()
            view[local] = original - eps
            lo = loss_fn(model, inputs).item()
            view[local] = original
            numeric = (hi - lo) / (2.0 * eps)
            analytic = grads[t].view(-1)[local].item()
            denom = max(abs(analytic), abs(numeric), 1e-8)
            max_err = max(max_err, abs(analytic - numeric) / denom)
    return max_err


# ---- checkpoints -------------------------------------------------------------

_CKPT_MAGIC = b"SEDCKPT1"


def save_checkpoint(path: str | Path, model: TwoBranchCRNN, seed: int, step: int) -> None:
    """Self-describing container: JSON header + named float32 tensors."""
    state = model.state_dict()
    names = sorted(state)
    header = {
        "format": "sed-checkpoint-v1",
        "config": asdict(model.config),
        "config_digest": model.config.digest(),
        "seed": int(seed),
        "step": int(step),
        "tensors": [{"name": n, "shape": list(state[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    out = [_CKPT_MAGIC, struct.pack("<I", len(blob)), blob]
    for name in names:
        out.append(state[name].detach().to(torch.float32).numpy().astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path: str | Path, expected_config: ModelConfig | None = None):
    """Rebuild the model from a checkpoint. Returns (model, seed, step).

    If expected_config is given its digest must match the stored one.
    """
    blob = Path(path).read_bytes()
    if blob[:8] != _CKPT_MAGIC:
        raise ModelError(f"{path}: not a checkpoint file")
    (header_len,) = struct.unpack_from("<I", blob, 8)
    header = json.loads(blob[12 : 12 + header_len])
    cfg_dict = dict(header["config"])
    for key in ("shared_block", "branch_blocks"):
        cfg_dict[key] = _tuplify(cfg_dict[key])
    config = ModelConfig(**cfg_dict)
    if config.digest() != header["config_digest"]:
        raise ModelError("checkpoint header digest does not match its config")
    if expected_config is not None and expected_config.digest() != header["config_digest"]:
        raise ModelError(
            "checkpoint was written for a different model config "
            f"({header['config_digest'][:8]} != {expected_config.digest()[:8]})"
        )
    model = TwoBranchCRNN(config)
    offset = 12 + header_len
    state = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        offset += count * 4
        state[entry["name"]] = torch.from_numpy(arr.copy()).reshape(shape)
    model.load_state_dict(state)
    return model, header["seed"], header["step"]


def _tuplify(obj):
    if isinstance(obj, list):
        return tuple(_tuplify(o) for o in obj)
    return obj
