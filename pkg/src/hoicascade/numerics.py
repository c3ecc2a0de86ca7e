"""Minimal dense-tensor math: layers with hand-written backward passes,
losses, a plain SGD step, and a central finite-difference gradient checker.

All arithmetic is float64. Layers cache their most recent forward inputs,
so each forward must be followed by its backward before the layer is
reused (the training loops respect this ordering).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, TrainingError, FormatError

CHECKPOINT_MAGIC = "hoicascade-params"
CHECKPOINT_VERSION = 1


class Param:
    """One trainable block: a value array and a same-shaped gradient buffer."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)


class ParamStore:
    """Named parameter blocks with paired gradient buffers."""

    def __init__(self):
        self._blocks: dict[str, Param] = {}

    def add(self, name: str, param: Param) -> Param:
        if name in self._blocks:
            raise ValueError(f"duplicate parameter block {name!r}")
        self._blocks[name] = param
        return param

    def __getitem__(self, name: str) -> Param:
        return self._blocks[name]

    def __contains__(self, name: str) -> bool:
        return name in self._blocks

    def __len__(self) -> int:
        return len(self._blocks)

    def names(self):
        return list(self._blocks)

    def items(self):
        return self._blocks.items()

    def zero_grads(self):
        for p in self._blocks.values():
            p.grad[...] = 0.0

    def save(self, manifest_path, blob_path):
        """JSON manifest {name -> shape, offset} plus one little-endian
        float32 flat blob. Offsets are in bytes into the blob."""
        manifest = {"magic": CHECKPOINT_MAGIC, "version": CHECKPOINT_VERSION,
                    "blocks": {}}
        offset = 0
        chunks = []
        for name, p in self._blocks.items():
            flat = p.value.astype("<f4").ravel()
            manifest["blocks"][name] = {"shape": list(p.value.shape),
                                        "offset": offset}
            chunks.append(flat.tobytes())
            offset += flat.nbytes
        with open(manifest_path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")
        with open(blob_path, "wb") as fh:
            fh.write(b"".join(chunks))

    def load(self, manifest_path, blob_path):
        """Load values into existing blocks; shapes must match exactly."""
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
        if manifest.get("magic") != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic in {manifest_path}")
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {manifest.get('version')}")
        with open(blob_path, "rb") as fh:
            blob = fh.read()
        blocks = manifest["blocks"]
        if set(blocks) != set(self._blocks):
            missing = set(self._blocks) - set(blocks)
            extra = set(blocks) - set(self._blocks)
            raise FormatError(f"checkpoint block mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, info in blocks.items():
            p = self._blocks[name]
            shape = tuple(info["shape"])
            if shape != p.value.shape:
                raise FormatError(f"block {name!r}: shape {shape} != {p.value.shape}")
            n = int(np.prod(shape)) if shape else 1
            raw = blob[info["offset"]:info["offset"] + 4 * n]
            if len(raw) != 4 * n:
                raise FormatError(f"block {name!r}: blob truncated")
            vals = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
            p.value[...] = vals
            p.grad[...] = 0.0


def sgd_step(store: ParamStore, lr: float):
    """p <- p - lr * grad for every block, then zero the gradients."""
    for name, p in store.items():
        if not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in block {name!r}")
        p.value -= lr * p.grad
        p.grad[...] = 0.0


def init_uniform(rng, shape, fan_in, fan_out):
    # Glorot-style bound; the reference method never states an init scheme.
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def sigmoid(z):
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class FCLayer:
    """Fully connected layer y = act(Wx + b), activation in {none, sigmoid}.

    Accepts a single vector (in_dim,) or a batch (B, in_dim).
    """

    def __init__(self, in_dim, out_dim, activation="none", rng=None):
        if activation not in ("none", "sigmoid"):
            raise ValueError(f"unknown activation {activation!r}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        if rng is None:
            rng = np.random.default_rng(0)
        self.w = Param(init_uniform(rng, (out_dim, in_dim), in_dim, out_dim))
        self.b = Param(np.zeros(out_dim))
        self._x = None
        self._y = None

    def params(self, prefix):
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"FCLayer expects (*, {self.in_dim}), got {x.shape}")
        z = x @ self.w.value.T + self.b.value
        y = sigmoid(z) if self.activation == "sigmoid" else z
        self._x = x
        self._y = y
        return y[0] if squeeze else y

    def backward(self, dy):
        dy = np.asarray(dy, dtype=np.float64)
        squeeze = dy.ndim == 1
        if squeeze:
            dy = dy[None, :]
        if self._x is None:
            raise RuntimeError("backward called before forward")
        if self.activation == "sigmoid":
            dy = dy * self._y * (1.0 - self._y)
        self.w.grad += dy.T @ self._x
        self.b.grad += dy.sum(axis=0)
        dx = dy @ self.w.value
        return dx[0] if squeeze else dx


class FCStack:
    """Two stacked FC layers (the repeated FC_x2 pattern)."""

    def __init__(self, in_dim, hidden_dim, out_dim, rng,
                 hidden_activation="none", out_activation="none"):
        self.fc1 = FCLayer(in_dim, hidden_dim, hidden_activation, rng)
        self.fc2 = FCLayer(hidden_dim, out_dim, out_activation, rng)

    def params(self, prefix):
        return self.fc1.params(f"{prefix}.fc1") + self.fc2.params(f"{prefix}.fc2")

    def forward(self, x):
        return self.fc2.forward(self.fc1.forward(x))

    def backward(self, dy):
        return self.fc1.backward(self.fc2.backward(dy))


class Conv2D:
    """Same-padded 2-D convolution (odd kernel) over (B, C, H, W).

    Computed as a sum over the k*k shifted input slices, which keeps the
    working set small for the few-channel grids used here.
    """

    def __init__(self, in_channels, out_channels, kernel_size, rng):
        if kernel_size % 2 != 1:
            raise ShapeError("kernel size must be odd")
        self.cin = in_channels
        self.cout = out_channels
        self.k = kernel_size
        fan_in = in_channels * kernel_size * kernel_size
        self.w = Param(init_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size),
                                    fan_in, out_channels))
        self.b = Param(np.zeros(out_channels))
        self._cols = None
        self._xshape = None

    def params(self, prefix):
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]

    def forward(self, x):
        # float32 inputs stay float32 (storage precision); tests use float64
        x = np.asarray(x)
        if x.dtype != np.float32:
            x = x.astype(np.float64, copy=False)
        if x.ndim != 4 or x.shape[1] != self.cin:
            raise ShapeError(f"Conv2D expects (B, {self.cin}, H, W), got {x.shape}")
        b, _, h, w = x.shape
        pad = self.k // 2
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        cols = np.empty((b, h, w, self.cin * self.k * self.k), dtype=x.dtype)
        col = 0
        for ci in range(self.cin):
            for di in range(self.k):
                for dj in range(self.k):
                    cols[:, :, :, col] = xp[:, ci, di:di + h, dj:dj + w]
                    col += 1
        flat = cols.reshape(-1, cols.shape[-1])
        wmat = self.w.value.reshape(self.cout, -1).astype(x.dtype, copy=False)
        y = (flat @ wmat.T + self.b.value.astype(x.dtype, copy=False)).reshape(b, h, w, self.cout)
        self._cols = flat
        self._xshape = x.shape
        self._dtype = x.dtype
        return np.ascontiguousarray(y.transpose(0, 3, 1, 2))

    def backward(self, dy):
        dy = np.asarray(dy).astype(self._dtype, copy=False)
        b, _, h, w = self._xshape
        pad = self.k // 2
        dmat = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(-1, self.cout)
        self.w.grad += (dmat.T @ self._cols).reshape(self.w.value.shape)
        self.b.grad += dmat.sum(axis=0)
        wmat = self.w.value.reshape(self.cout, -1).astype(self._dtype, copy=False)
        dcols = (dmat @ wmat).reshape(b, h, w, self.cin * self.k * self.k)
        dxp = np.zeros((b, self.cin, h + 2 * pad, w + 2 * pad), dtype=self._dtype)
        col = 0
        for ci in range(self.cin):
            for di in range(self.k):
                for dj in range(self.k):
                    dxp[:, ci, di:di + h, dj:dj + w] += dcols[:, :, :, col]
                    col += 1
        return dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp


class MaxPool2x2:
    """2x2 max pooling with stride 2; spatial dims must be even.

    Ties go to the first cell in row-major window order.
    """

    def __init__(self):
        self._argmax = None
        self._xshape = None

    def forward(self, x):
        b, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"MaxPool2x2 needs even dims, got {h}x{w}")
        windows = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        flat = np.ascontiguousarray(windows).reshape(b, c, h // 2, w // 2, 4)
        self._argmax = flat.argmax(axis=-1)
        self._xshape = x.shape
        return np.take_along_axis(flat, self._argmax[..., None], axis=-1)[..., 0]

    def backward(self, dy):
        b, c, h, w = self._xshape
        dflat = np.zeros((b, c, h // 2, w // 2, 4), dtype=np.asarray(dy).dtype)
        np.put_along_axis(dflat, self._argmax[..., None], dy[..., None], axis=-1)
        dx = dflat.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return np.ascontiguousarray(dx).reshape(b, c, h, w)


class ConvPoolEncoder:
    """Two conv+pool blocks followed by one FC layer; output length 256.

    Input spatial dims must be divisible by 4 (two 2x2 pools).
    """

    OUT_DIM = 256

    def __init__(self, in_channels, in_hw, channels=(8, 8), kernel_size=3, rng=None):
        if rng is None:
            rng = np.random.default_rng(0)
        h, w = in_hw
        if h % 4 or w % 4:
            raise ShapeError(f"encoder input dims must be divisible by 4, got {h}x{w}")
        self.in_channels = in_channels
        self.in_hw = (h, w)
        self.conv1 = Conv2D(in_channels, channels[0], kernel_size, rng)
        self.pool1 = MaxPool2x2()
        self.conv2 = Conv2D(channels[0], channels[1], kernel_size, rng)
        self.pool2 = MaxPool2x2()
        self.flat_dim = channels[1] * (h // 4) * (w // 4)
        self.fc = FCLayer(self.flat_dim, self.OUT_DIM, "none", rng)

    def params(self, prefix):
        return (self.conv1.params(f"{prefix}.conv1")
                + self.conv2.params(f"{prefix}.conv2")
                + self.fc.params(f"{prefix}.fc"))

    def forward(self, x):
        x = np.asarray(x)
        if x.dtype != np.float32:
            x = x.astype(np.float64, copy=False)
        squeeze = x.ndim == 3
        if squeeze:
            x = x[None]
        if x.shape[1:] != (self.in_channels, *self.in_hw):
            raise ShapeError(f"encoder expects (*, {self.in_channels}, {self.in_hw[0]}, "
                             f"{self.in_hw[1]}), got {x.shape}")
        h = self.pool1.forward(self.conv1.forward(x))
        h = self.pool2.forward(self.conv2.forward(h))
        self._pooled_shape = h.shape
        y = self.fc.forward(h.reshape(h.shape[0], -1))
        return y[0] if squeeze else y

    def backward(self, dy):
        dy = np.asarray(dy, dtype=np.float64)
        squeeze = dy.ndim == 1
        if squeeze:
            dy = dy[None]
        dh = self.fc.backward(dy).reshape(self._pooled_shape)
        dh = self.conv2.backward(self.pool2.backward(dh))
        dx = self.conv1.backward(self.pool1.backward(dh))
        return dx[0] if squeeze else dx


def softmax_rows(m):
    """Row-wise softmax with row-max subtraction for stability."""
    m = np.asarray(m, dtype=np.float64)
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


BCE_CLAMP = 1e-7


def binary_cross_entropy(scores, targets):
    """Summed binary cross-entropy and its gradient w.r.t. the scores.

    Scores are clamped to [1e-7, 1 - 1e-7] before the logs; where the clamp
    is active the gradient is zero (the clamp is flat there).
    """
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if scores.shape != targets.shape:
        raise ShapeError(f"scores {scores.shape} vs targets {targets.shape}")
    s = np.clip(scores, BCE_CLAMP, 1.0 - BCE_CLAMP)
    loss = -(targets * np.log(s) + (1.0 - targets) * np.log(1.0 - s)).sum()
    grad = (-targets / s + (1.0 - targets) / (1.0 - s))
    grad[(scores < BCE_CLAMP) | (scores > 1.0 - BCE_CLAMP)] = 0.0
    return loss, grad


def pairwise_hinge_loss(pos, neg, margin=0.2):
    """Sum over all (pos, neg) pairs of max(0, neg - pos + margin).

    Returns (loss, dpos, dneg). Empty pos or neg means no supervision:
    loss 0 with zero gradients. Subgradient at the kink is 0.
    """
    if margin <= 0:
        raise ValueError("margin must be positive")
    pos = np.asarray(pos, dtype=np.float64).ravel()
    neg = np.asarray(neg, dtype=np.float64).ravel()
    dpos = np.zeros_like(pos)
    dneg = np.zeros_like(neg)
    if pos.size == 0 or neg.size == 0:
        return 0.0, dpos, dneg
    slack = neg[None, :] - pos[:, None] + margin
    active = slack > 0.0
    loss = float(slack[active].sum())
    dpos -= active.sum(axis=1).astype(np.float64)
    dneg += active.sum(axis=0).astype(np.float64)
    return loss, dpos, dneg


def smooth_l1(diff, delta=1.0):
    """Elementwise Huber loss and gradient on a difference array."""
    diff = np.asarray(diff, dtype=np.float64)
    a = np.abs(diff)
    quad = a <= delta
    loss = np.where(quad, 0.5 * diff * diff / delta, a - 0.5 * delta).sum()
    grad = np.where(quad, diff / delta, np.sign(diff))
    return float(loss), grad


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference gradient check."""

    tol: float
    per_block: dict = field(default_factory=dict)

    @property
    def max_rel_error(self):
        return max(self.per_block.values()) if self.per_block else 0.0

    @property
    def passed(self):
        return self.max_rel_error <= self.tol

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"gradcheck {status}: max rel err {self.max_rel_error:.3e} (tol {self.tol:.1e})"


def finite_diff_check(loss_fn, blocks, tol=1e-4, step=1e-3, max_entries=20, seed=0):
    """Compare analytic gradients against central finite differences.

    loss_fn() must run the full forward and backward, accumulating fresh
    gradients into `blocks` (a mapping name -> Param with zeroed grads).
    Up to max_entries coordinates per block are probed (seeded choice).
    """
    if isinstance(blocks, ParamStore):
        blocks = dict(blocks.items())
    for p in blocks.values():
        p.grad[...] = 0.0
    loss_fn()
    analytic = {name: p.grad.copy() for name, p in blocks.items()}
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for name, p in blocks.items():
        flat = p.value.ravel()
        n = flat.size
        idx = np.arange(n) if n <= max_entries else np.sort(rng.choice(n, max_entries, replace=False))
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            lp = loss_fn()
            flat[i] = orig - step
            lm = loss_fn()
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * step)
            a = analytic[name].ravel()[i]
            denom = max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, abs(a - numeric) / denom)
        report.per_block[name] = worst
        for q, g in zip(blocks.values(), analytic.values()):
            q.grad[...] = 0.0
    # Leave the analytic gradients in place for the caller.
    for name, p in blocks.items():
        p.grad[...] = analytic[name]
    return report
