"""Named parameters, Adam with decoupled weight decay, checkpoint I/O.

Checkpoint layout (little-endian throughout): magic "MVCK", u16 version
(currently 1), u32 parameter count, then per parameter: u16 name length,
UTF-8 name, u8 rank, one u32 per dimension, raw float32 data. Round trips
are bit-exact for float32 tensors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor

CHECKPOINT_MAGIC = b"MVCK"
CHECKPOINT_VERSION = 1


class MissingGradError(RuntimeError):
    """step() ran before backward populated a parameter's gradient."""


class CheckpointFormatError(IOError):
    """Checkpoint bytes do not parse as the MVCK format."""


@dataclass
class Parameter:
    name: str
    tensor: Tensor


class AdamW:
    """Adam with weight decay applied directly to the weights.

    Update per step t:
        m = b1 m + (1-b1) g        v = b2 v + (1-b2) g^2
        p -= lr * (mhat / (sqrt(vhat) + eps) + weight_decay * p)
    Gradients are cleared after each step; a subsequent step without a
    fresh backward raises MissingGradError.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self._m = {p.name: np.zeros_like(p.tensor.data) for p in self.params}
        self._v = {p.name: np.zeros_like(p.tensor.data) for p in self.params}

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p in self.params:
            g = p.tensor.grad
            if g is None:
                raise MissingGradError(f"parameter {p.name!r} has no gradient")
            m = self._m[p.name]
            v = self._v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            upd = mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay:
                upd = upd + self.weight_decay * p.tensor.data
            p.tensor.data -= (self.lr * upd).astype(p.tensor.data.dtype, copy=False)
            if not np.all(np.isfinite(p.tensor.data)):
                raise FloatingPointError(f"parameter {p.name!r} became non-finite")
            p.tensor.grad = None

    def zero_grad(self):
        for p in self.params:
            p.tensor.grad = None

    # --- optimizer state as parameters, for resumable training ---

    def state_parameters(self) -> list[Parameter]:
        out = [Parameter("opt/step", Tensor(np.array([self.step_count], dtype=np.float32)))]
        for p in self.params:
            out.append(Parameter(f"opt/m/{p.name}", Tensor(self._m[p.name].astype(np.float32))))
            out.append(Parameter(f"opt/v/{p.name}", Tensor(self._v[p.name].astype(np.float32))))
        return out

    def load_state(self, blobs: dict):
        self.step_count = int(blobs["opt/step"][0])
        for p in self.params:
            self._m[p.name] = blobs[f"opt/m/{p.name}"].astype(p.tensor.data.dtype).reshape(
                p.tensor.shape
            )
            self._v[p.name] = blobs[f"opt/v/{p.name}"].astype(p.tensor.data.dtype).reshape(
                p.tensor.shape
            )


def clip_global_norm(params, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.tensor.grad is not None:
            g = p.tensor.grad.astype(np.float64, copy=False)
            total += float((g * g).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params:
            if p.tensor.grad is not None:
                p.tensor.grad = (p.tensor.grad * scale).astype(p.tensor.grad.dtype, copy=False)
    return norm


def save_checkpoint(path, params):
    params = list(params)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(params))]
    for p in params:
        name = p.name.encode("utf-8")
        arr = np.ascontiguousarray(p.tensor.data, dtype="<f4")
        chunks.append(struct.pack("<H", len(name)))
        chunks.append(name)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def load_checkpoint(path) -> dict:
    """Read an MVCK file into an ordered name -> float32 array mapping."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {buf[:4]!r}")
    try:
        version, count = struct.unpack_from("<HI", buf, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointFormatError(f"{path}: unsupported version {version}")
        off = 10
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(dims)
            off += 4 * n
            out[name] = arr.copy()
        if off != len(buf):
            raise CheckpointFormatError(f"{path}: {len(buf) - off} trailing bytes")
    except (struct.error, ValueError) as e:
        raise CheckpointFormatError(f"{path}: truncated ({e})") from e
    return out


def assign_checkpoint(params, blobs: dict, strict=True):
    """Copy checkpoint arrays into parameters, matching names and shapes."""
    params = list(params)
    by_name = {p.name: p for p in params}
    if strict:
        missing = sorted(set(by_name) - set(blobs))
        extra = sorted(set(blobs) - set(by_name))
        if missing or extra:
            raise KeyError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
    for name, arr in blobs.items():
        p = by_name.get(name)
        if p is None:
            continue
        if tuple(arr.shape) != tuple(p.tensor.shape):
            raise ValueError(f"{name}: checkpoint shape {arr.shape} vs model {p.tensor.shape}")
        p.tensor.data = arr.astype(p.tensor.data.dtype)
