"""Dense float64 numeric core on top of torch autograd.

torch records the operation tape; this module supplies the encoder
building blocks, parameter bookkeeping and the checkpoint file format.

Checkpoint layout (all integers little-endian)::

    magic     8 bytes   b"NSHCKPT1"
    meta_len  uint32    length of the UTF-8 JSON metadata block
    meta      bytes     JSON object (model/config description)
    count     uint32    number of tensors
    per tensor:
      name_len uint32, name (UTF-8)
      ndim     uint32, dims (uint64 each)
      data     float64 little-endian, row-major
"""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64
MAGIC = b"NSHCKPT1"


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def tensor(values, requires_grad: bool = False) -> torch.Tensor:
    return torch.tensor(np.asarray(values, dtype=np.float64), dtype=DTYPE, requires_grad=requires_grad)


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in {what}")
    return t


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul shape mismatch: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    """Max-shifted softmax (torch's fused kernel subtracts the row max)."""
    return F.softmax(x, dim=axis)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise ShapeError(f"layer_norm gain/bias {tuple(gain.shape)} vs input {tuple(x.shape)}")
    # biased variance, eps inside the square root
    return F.layer_norm(x, (x.shape[-1],), gain, bias, eps)


def gelu(x: torch.Tensor) -> torch.Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    return F.gelu(x, approximate="tanh")


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def dropout(x: torch.Tensor, rate: float, train: bool, generator: torch.Generator | None = None) -> torch.Tensor:
    """Inverted dropout; identity unless ``train``."""
    if not train or rate <= 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=DTYPE) >= rate
    return x * keep / (1.0 - rate)


def glorot_init(shape, rng: np.random.Generator) -> torch.Tensor:
    """Uniform in +-sqrt(6 / (fan_in + fan_out)) for a 2-D shape."""
    if len(shape) != 2:
        raise ConfigError(f"glorot_init needs a 2-D shape, got {tuple(shape)}")
    bound = math.sqrt(6.0 / (shape[0] + shape[1]))
    return torch.from_numpy(rng.uniform(-bound, bound, size=tuple(shape))).to(DTYPE)


def encoder_layer_params(prefix: str, d: int, hidden: int, rng: np.random.Generator) -> dict[str, torch.Tensor]:
    p = {}
    for name in ("wq", "wk", "wv", "wo"):
        p[f"{prefix}.{name}"] = glorot_init((d, d), rng)
        p[f"{prefix}.b{name[1]}"] = torch.zeros(d, dtype=DTYPE)
    p[f"{prefix}.w1"] = glorot_init((d, hidden), rng)
    p[f"{prefix}.b1"] = torch.zeros(hidden, dtype=DTYPE)
    p[f"{prefix}.w2"] = glorot_init((hidden, d), rng)
    p[f"{prefix}.b2"] = torch.zeros(d, dtype=DTYPE)
    for ln in ("ln1", "ln2"):
        p[f"{prefix}.{ln}_g"] = torch.ones(d, dtype=DTYPE)
        p[f"{prefix}.{ln}_b"] = torch.zeros(d, dtype=DTYPE)
    return p


def multi_head_attention(
    q_in: torch.Tensor,
    kv_in: torch.Tensor,
    p: dict[str, torch.Tensor],
    prefix: str,
    heads: int,
    key_mask: torch.Tensor | None = None,
    drop: float = 0.0,
    train: bool = False,
    generator: torch.Generator | None = None,
):
    """Scaled dot-product attention.  Returns ``(output, weights)``.

    ``q_in``: [..., Tq, d], ``kv_in``: [..., Tk, d], ``key_mask``: [..., Tk]
    (True marks real tokens).  ``weights`` has shape [..., heads, Tq, Tk].
    """
    d = q_in.shape[-1]
    if d % heads:
        raise ConfigError(f"model dim {d} not divisible by {heads} heads")
    dh = d // heads
    lead = q_in.shape[:-2]

    def split(x):
        return x.reshape(*x.shape[:-1], heads, dh).transpose(-2, -3)

    q = split(q_in @ p[f"{prefix}.wq"] + p[f"{prefix}.bq"])
    k = split(kv_in @ p[f"{prefix}.wk"] + p[f"{prefix}.bk"])
    v = split(kv_in @ p[f"{prefix}.wv"] + p[f"{prefix}.bv"])
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask[..., None, None, :], float("-inf"))
    weights = softmax(scores, axis=-1)
    attn = dropout(weights, drop, train, generator)
    out = (attn @ v).transpose(-2, -3).reshape(*lead, q_in.shape[-2], d)
    return out @ p[f"{prefix}.wo"] + p[f"{prefix}.bo"], weights


def transformer_encoder_layer(
    tokens: torch.Tensor,
    p: dict[str, torch.Tensor],
    prefix: str,
    heads: int,
    drop: float = 0.0,
    train: bool = False,
    key_mask: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
    cls_only: bool = False,
):
    """Post-LN encoder layer: attention + residual + LN, then GELU FFN + residual + LN.

    With ``cls_only`` only row 0 is computed (it still attends to every
    token), which is all a [CLS] readout needs from the last layer.
    Returns ``(output, attention weights)``.
    """
    q_in = tokens[..., :1, :] if cls_only else tokens
    a, w = multi_head_attention(q_in, tokens, p, prefix, heads, key_mask, drop, train, generator)
    x = layer_norm(q_in + a, p[f"{prefix}.ln1_g"], p[f"{prefix}.ln1_b"])
    f = gelu(x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"]) @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]
    f = dropout(f, drop, train, generator)
    return layer_norm(x + f, p[f"{prefix}.ln2_g"], p[f"{prefix}.ln2_b"]), w


class ParamStore:
    """Named leaf tensors in insertion order."""

    def __init__(self):
        self._params: OrderedDict[str, torch.Tensor] = OrderedDict()

    def add(self, name: str, value: torch.Tensor) -> torch.Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = value.detach().clone().to(DTYPE).requires_grad_(True)
        self._params[name] = t
        return t

    def update(self, params: dict[str, torch.Tensor]):
        for k, v in params.items():
            self.add(k, v)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[tuple[str, torch.Tensor]]:
        return iter(self._params.items())

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def as_dict(self) -> dict[str, torch.Tensor]:
        return dict(self._params)

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, torch.Tensor]:
        return {k: (t.grad if t.grad is not None else torch.zeros_like(t)) for k, t in self._params.items()}

    def numel(self) -> int:
        return sum(t.numel() for t in self._params.values())

    def copy_from(self, other: "ParamStore"):
        with torch.no_grad():
            for k, t in self._params.items():
                t.copy_(other[k])

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.detach().numpy().copy() for k, t in self._params.items()}


def backward(loss: torch.Tensor, store: ParamStore) -> dict[str, torch.Tensor]:
    """Accumulate dloss/dparam into ``store``; unreachable parameters get zeros."""
    if loss.numel() != 1 or loss.dim() != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if loss.requires_grad:
        loss.backward()
    for _, t in store:
        if t.grad is None:
            t.grad = torch.zeros_like(t)
    return store.grads()


def save_checkpoint(path, store: ParamStore, meta: dict | None = None):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(store, meta))


def checkpoint_bytes(store: ParamStore, meta: dict | None = None) -> bytes:
    meta_raw = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", len(meta_raw)), meta_raw, struct.pack("<I", len(store))]
    for name, t in store:
        raw = name.encode()
        arr = np.ascontiguousarray(t.detach().numpy(), dtype="<f8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def load_checkpoint(path) -> tuple[OrderedDict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    off = 8
    (meta_len,) = struct.unpack_from("<I", buf, off)
    off += 4
    meta = json.loads(buf[off:off + meta_len].decode())
    off += meta_len
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + n].decode()
        off += n
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, off)
        off += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).copy()
        off += 8 * size
    return out, meta
