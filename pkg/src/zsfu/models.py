"""Classifiers with a declared final-convolution tap, plus flat-parameter helpers."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors import safe_open
from safetensors.torch import save_file

ARCHS = ("lenet5", "resnet32", "resnet56")


@dataclass
class ForwardOutput:
    logits: torch.Tensor
    final_conv_features: torch.Tensor


class TappedClassifier(nn.Module):
    """Base class: ``features`` ends at the final conv layer, ``head`` maps it to logits."""

    arch: str
    final_conv_channels: int

    def features(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def head(self, feats: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward_with_features(self, x: torch.Tensor) -> ForwardOutput:
        feats = self.features(x)
        return ForwardOutput(self.head(feats), feats)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


class LeNet5(TappedClassifier):
    """Two conv, two max-pool, two fully connected layers."""

    arch = "lenet5"
    final_conv_channels = 16

    def __init__(self, num_classes: int = 10, in_channels: int = 1, image_size: int = 28):
        super().__init__()
        self.in_channels = in_channels
        self.image_size = image_size
        self.conv1 = nn.Conv2d(in_channels, 6, 5)
        self.conv2 = nn.Conv2d(6, 16, 5)
        side = ((image_size - 4) // 2 - 4) // 2
        self.fc1 = nn.Linear(16 * side * side, 120)
        self.fc2 = nn.Linear(120, num_classes)

    def features(self, x):
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        return F.relu(self.conv2(x))

    def head(self, feats):
        x = F.max_pool2d(feats, 2).flatten(1)
        return self.fc2(F.relu(self.fc1(x)))


class _Block(nn.Module):
    # option-A shortcut (stride + zero channel padding) keeps the weighted-layer count at 6n+2
    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.stride = stride
        self.pad = c_out - c_in

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        short = x
        if self.stride != 1 or self.pad:
            short = x[:, :, ::self.stride, ::self.stride]
            short = F.pad(short, (0, 0, 0, 0, self.pad // 2, self.pad - self.pad // 2))
        return F.relu(out + short)


class CifarResNet(TappedClassifier):
    final_conv_channels = 64

    def __init__(self, depth: int, num_classes: int = 10, in_channels: int = 3):
        super().__init__()
        if (depth - 2) % 6:
            raise ValueError(f"depth must be 6n+2, got {depth}")
        n = (depth - 2) // 6
        self.arch = f"resnet{depth}"
        self.in_channels = in_channels
        self.image_size = 32
        self.conv1 = nn.Conv2d(in_channels, 16, 3, 1, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(16)
        layers, c_in = [], 16
        for c_out, stride in ((16, 1), (32, 2), (64, 2)):
            for i in range(n):
                layers.append(_Block(c_in, c_out, stride if i == 0 else 1))
                c_in = c_out
        self.blocks = nn.Sequential(*layers)
        self.fc = nn.Linear(64, num_classes)

    def features(self, x):
        return self.blocks(F.relu(self.bn1(self.conv1(x))))

    def head(self, feats):
        return self.fc(F.adaptive_avg_pool2d(feats, 1).flatten(1))


def build_model(arch: str, num_classes: int, in_channels: int | None = None,
                image_size: int | None = None, seed: int | None = None) -> TappedClassifier:
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if arch not in ARCHS:
        raise ValueError(f"unknown arch {arch!r}; expected one of {ARCHS}")
    if arch != "lenet5" and image_size not in (None, 32):
        raise ValueError(f"{arch} expects 32x32 inputs")
    # a seeded build must not disturb the caller's global RNG stream
    with torch.random.fork_rng(devices=[], enabled=seed is not None):
        if seed is not None:
            torch.manual_seed(seed)
        if arch == "lenet5":
            return LeNet5(num_classes, in_channels or 1, image_size or 28)
        return CifarResNet(int(arch[6:]), num_classes, in_channels or 3)


def count_weighted_layers(model: nn.Module) -> int:
    return sum(isinstance(m, (nn.Conv2d, nn.Linear)) for m in model.modules())


def input_shape(model: TappedClassifier) -> tuple[int, int, int]:
    return (model.in_channels, model.image_size, model.image_size)


def forward(model: TappedClassifier, batch: torch.Tensor) -> ForwardOutput:
    expected = input_shape(model)
    if batch.dim() != 4 or tuple(batch.shape[1:]) != expected:
        raise ValueError(f"batch shape {tuple(batch.shape)} does not match (B, {expected})")
    return model.forward_with_features(batch)


def softmax_with_temperature(logits: torch.Tensor, temp: float = 1.0, dim: int = -1) -> torch.Tensor:
    if not temp > 0:
        raise ValueError(f"temperature must be positive, got {temp}")
    return torch.softmax(logits / temp, dim=dim)


def log_softmax_with_temperature(logits: torch.Tensor, temp: float = 1.0, dim: int = -1) -> torch.Tensor:
    if not temp > 0:
        raise ValueError(f"temperature must be positive, got {temp}")
    return torch.log_softmax(logits / temp, dim=dim)


# ---------------------------------------------------------------------------
# flat views

def flatten_params(model: nn.Module) -> torch.Tensor:
    return torch.nn.utils.parameters_to_vector(model.parameters()).detach().clone()


def load_flat(model: nn.Module, flat: torch.Tensor) -> None:
    n = sum(p.numel() for p in model.parameters())
    if flat.numel() != n:
        raise ValueError(f"flat vector has {flat.numel()} entries, model has {n}")
    with torch.no_grad():
        torch.nn.utils.vector_to_parameters(flat.to(next(model.parameters()).dtype), model.parameters())


def flatten_grads(model: nn.Module) -> torch.Tensor:
    return torch.cat([(p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1)
                      for p in model.parameters()])


def set_flat_grads(model: nn.Module, flat: torch.Tensor) -> None:
    offset = 0
    for p in model.parameters():
        n = p.numel()
        p.grad = flat[offset:offset + n].view_as(p).clone()
        offset += n


def params_hash(model_or_state) -> str:
    state = model_or_state.state_dict() if isinstance(model_or_state, nn.Module) else model_or_state
    h = hashlib.sha256()
    for k in sorted(state):
        h.update(k.encode())
        h.update(state[k].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def clone_state(model: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def copy_model(model: nn.Module) -> nn.Module:
    import copy
    return copy.deepcopy(model)


# ---------------------------------------------------------------------------
# checkpoints: safetensors archive with a JSON header in the metadata block

def save_checkpoint(state: dict[str, torch.Tensor] | nn.Module, path: str | os.PathLike, header: dict) -> None:
    if isinstance(state, nn.Module):
        state = state.state_dict()
    tensors = {k: v.detach().cpu().contiguous().clone() for k, v in state.items()}
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    save_file(tensors, str(tmp), metadata={"header": json.dumps(header, sort_keys=True)})
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, torch.Tensor], dict]:
    tensors = {}
    with safe_open(str(path), framework="pt") as fh:
        header = json.loads((fh.metadata() or {}).get("header", "{}"))
        for k in fh.keys():
            tensors[k] = fh.get_tensor(k)
    return tensors, header


def model_from_checkpoint(path: str | os.PathLike) -> tuple[TappedClassifier, dict]:
    state, header = load_checkpoint(path)
    model = build_model(header["arch"], header["num_classes"],
                        header.get("in_channels"), header.get("image_size"))
    model.load_state_dict(state)
    return model, header


def model_header(model: TappedClassifier, **extra) -> dict:
    head = {"arch": model.arch, "num_classes": _num_classes(model),
            "in_channels": model.in_channels, "image_size": model.image_size}
    head.update(extra)
    return head


def _num_classes(model: TappedClassifier) -> int:
    last = [m for m in model.modules() if isinstance(m, nn.Linear)][-1]
    return last.out_features
