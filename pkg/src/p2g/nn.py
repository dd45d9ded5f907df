"""Parameter containers, layers, the Adam optimizer, and checkpoint I/O.

Checkpoint format (flat binary, little endian):
    magic "P2GC" | version u32 | count u32 |
    per parameter: name_len u16 | utf-8 name | rank u8 | extents u32[rank] |
                   f32 payload
An architecture manifest (plain text) is written alongside the checkpoint
as `<path>.manifest`; its hash guards against loading into a mismatched
model.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor

CHECKPOINT_MAGIC = b"P2GC"
CHECKPOINT_VERSION = 1


class Module:
    """Lightweight parameter container; submodules are discovered via
    attribute walk in insertion order, so parameter naming is stable."""

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def named_parameters(self, prefix: str = ""):
        out = []
        for key, val in self.__dict__.items():
            name = f"{prefix}{key}" if prefix else key
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((name, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(prefix=name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(prefix=f"{name}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out.append((f"{name}.{i}", item))
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True, dtype=dtype)


class Linear(Module):
    """y = x @ W + b with He-normal init (overridable to zeros for heads)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 zero_init: bool = False, bias_init=None):
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d_out))
        b = np.zeros(d_out)
        if bias_init is not None:
            b = np.asarray(bias_init, dtype=np.float64).copy()
        self.weight = parameter(w)
        self.bias = parameter(b)

    def __call__(self, x: Tensor) -> Tensor:
        return (x @ self.weight) + self.bias


class Conv2d(Module):
    """Single-image conv layer; forward lives in autodiff.conv2d."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int,
                 pad: int, rng: np.random.Generator):
        fan_in = c_in * kernel * kernel
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, kernel, kernel))
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(c_out))
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        from .autodiff import conv2d

        return conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class Adam:
    """Adam with bias correction; zeroes grads after each step."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ValueError("Adam.step: parameter has no gradient")
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            m_hat = self.m[i] / corr1
            v_hat = self.v[i] / corr2
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)
            p.grad = None


# ---------------------------------------------------------------------------
# checkpoint I/O


def manifest_hash(manifest: str) -> str:
    return hashlib.sha256(manifest.encode("utf-8")).hexdigest()[:16]


def save_checkpoint(path, named_params, manifest: str | None = None):
    path = Path(path)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(named_params)))
        for name, tensor in named_params:
            data = np.ascontiguousarray(tensor.data, dtype=np.float32)
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", data.ndim))
            for extent in data.shape:
                f.write(struct.pack("<I", extent))
            f.write(data.astype("<f4").tobytes())
    if manifest is not None:
        side = path.with_name(path.name + ".manifest")
        side.write_text(manifest + f"\nhash = {manifest_hash(manifest)}\n")


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        out[name] = arr.copy()
    return out


def load_manifest(path) -> str | None:
    side = Path(str(path) + ".manifest")
    if not side.exists():
        return None
    return side.read_text()


def restore_parameters(module: Module, loaded: dict[str, np.ndarray]):
    named = dict(module.named_parameters())
    missing = set(named) - set(loaded)
    extra = set(loaded) - set(named)
    if missing or extra:
        raise ValueError(f"checkpoint mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, arr in loaded.items():
        p = named[name]
        if p.data.shape != arr.shape:
            raise ValueError(f"{name}: shape {arr.shape} != parameter {p.data.shape}")
        p.data = arr.astype(p.dtype)
