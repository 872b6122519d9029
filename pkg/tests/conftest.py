import gzip
import os
import struct
import sys
from pathlib import Path

import pytest
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from hypothesis import settings

from zsfu.data import ImageSet
from zsfu.models import TappedClassifier

settings.register_profile("fast", max_examples=60, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "fast"))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])


class ToyNet(TappedClassifier):
    """1x6x6 input, one 2-channel conv, linear head: 119 parameters."""

    arch = "toy"
    final_conv_channels = 2

    def __init__(self, num_classes: int = 3):
        super().__init__()
        self.in_channels, self.image_size = 1, 6
        self.conv = nn.Conv2d(1, 2, 3)
        self.fc = nn.Linear(2 * 4 * 4, num_classes)

    def features(self, x):
        return torch.tanh(self.conv(x))

    def head(self, feats):
        return self.fc(feats.flatten(1))


def make_toy(seed=0, dtype=torch.float64, num_classes=3):
    torch.manual_seed(seed)
    return ToyNet(num_classes).to(dtype)


@pytest.fixture
def toy():
    return make_toy()


@pytest.fixture
def toy_batch():
    g = torch.Generator().manual_seed(1)
    x = torch.randn(5, 1, 6, 6, generator=g, dtype=torch.float64)
    y = torch.tensor([0, 1, 2, 0, 1])
    return x, y


def blobs(n_per_class=20, num_classes=3, seed=0, side=6, dtype=torch.float32):
    """Linearly separable toy images: class c has a bright patch at row c."""
    g = torch.Generator().manual_seed(seed)
    xs, ys = [], []
    for c in range(num_classes):
        x = 0.3 * torch.randn(n_per_class, 1, side, side, generator=g, dtype=dtype)
        x[:, :, (2 * c) % side, :] += 2.0
        xs.append(x)
        ys.append(torch.full((n_per_class,), c))
    return ImageSet(torch.cat(xs), torch.cat(ys))


def fd_rel_error(model, loss_fn, eps=1e-6):
    """Relative L2 error between autograd and central differences over all parameters."""
    from zsfu.models import flatten_params, load_flat

    params = list(model.parameters())
    grads = torch.autograd.grad(loss_fn(), params, allow_unused=True)
    analytic = torch.cat([(g if g is not None else torch.zeros_like(p)).reshape(-1) for p, g in zip(params, grads)])
    w0 = flatten_params(model).clone()
    numeric = torch.zeros_like(w0)
    for i in range(len(w0)):
        for sign in (1, -1):
            w = w0.clone()
            w[i] += sign * eps
            load_flat(model, w)
            with torch.no_grad():
                numeric[i] += sign * loss_fn().item()
    numeric /= 2 * eps
    load_flat(model, w0)
    return (torch.linalg.vector_norm(analytic - numeric) / torch.linalg.vector_norm(numeric)).item()


def write_idx(path: Path, arr, compress=False):
    arr = np.asarray(arr, dtype=np.uint8)
    head = bytes([0, 0, 0x08, arr.ndim]) + b"".join(struct.pack(">I", d) for d in arr.shape)
    data = head + arr.tobytes()
    if compress:
        with gzip.open(str(path) + ".gz", "wb") as fh:
            fh.write(data)
    else:
        path.write_bytes(data)


def fake_mnist_root(root: Path, n_train=60, n_test=20, seed=0, compress_test=False) -> Path:
    """MNIST-layout idx files; class c images get a bright band at row 2c+4 so they are learnable."""
    rng = np.random.default_rng(seed)
    raw = root / "MNIST" / "raw"
    raw.mkdir(parents=True, exist_ok=True)
    for prefix, n, gz in (("train", n_train, False), ("t10k", n_test, compress_test)):
        y = np.arange(n) % 10
        x = rng.integers(0, 60, (n, 28, 28))
        for i, c in enumerate(y):
            x[i, 2 * c + 4] = 255
        write_idx(raw / f"{prefix}-images-idx3-ubyte", x, gz)
        write_idx(raw / f"{prefix}-labels-idx1-ubyte", y, gz)
    return root
