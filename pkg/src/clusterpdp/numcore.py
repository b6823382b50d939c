"""Numeric substrate: parameter storage, attention primitives, gradients and Adam.

Gradients come from torch's reverse-mode autograd. ``finite_difference_grad``
is an independent oracle that only ever calls the forward function, and
``gradcheck`` compares the two.
"""

from __future__ import annotations

import io
import json
import math
import struct
from pathlib import Path
from typing import Callable, Iterator, Optional

import numpy as np
import torch

from clusterpdp.errors import CheckpointError, GradientUnavailable, MaskExhausted, ShapeError

NEG_INF = -1e9
# additive mask entries at or below this are treated as "masked"
MASK_THRESHOLD = -1e8
LN_EPS = 1e-5

CHECKPOINT_MAGIC = b"PDPCKPT1"
CHECKPOINT_VERSION = 1


class ParamStore:
    """Named parameters with gradient buffers and Adam moments.

    Parameters are leaf tensors with ``requires_grad=True``; gradients are
    written into ``grads`` by :func:`backward`, never into ``.grad``.
    """

    def __init__(self, dtype: torch.dtype = torch.float32):
        self.dtype = dtype
        self.params: dict[str, torch.Tensor] = {}
        self.grads: dict[str, Optional[torch.Tensor]] = {}
        self.exp_avg: dict[str, torch.Tensor] = {}
        self.exp_avg_sq: dict[str, torch.Tensor] = {}
        self.step_count = 0

    def add(self, name: str, value) -> torch.Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = torch.tensor(np.array(value), dtype=self.dtype).requires_grad_(True)
        self.params[name] = t
        self.grads[name] = None
        return t

    @classmethod
    def wrap(cls, tensors: dict[str, torch.Tensor], dtype: torch.dtype) -> "ParamStore":
        """Store over existing tensors, without copying (used for functional evaluation)."""
        store = cls(dtype)
        store.params = dict(tensors)
        store.grads = {name: None for name in tensors}
        return store

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def numel(self) -> int:
        return sum(p.numel() for p in self.params.values())

    def zero_grad(self) -> None:
        for name in self.grads:
            self.grads[name] = None

    def copy(self, dtype: Optional[torch.dtype] = None) -> "ParamStore":
        """Detached copy of the parameters (moments and step count included)."""
        out = ParamStore(dtype or self.dtype)
        for name, p in self.params.items():
            out.params[name] = p.detach().to(out.dtype).clone().requires_grad_(True)
            out.grads[name] = None
        for name, m in self.exp_avg.items():
            out.exp_avg[name] = m.to(out.dtype).clone()
            out.exp_avg_sq[name] = self.exp_avg_sq[name].to(out.dtype).clone()
        out.step_count = self.step_count
        return out

    def numpy(self) -> dict[str, np.ndarray]:
        return {name: p.detach().cpu().numpy().copy() for name, p in self.params.items()}


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def linear(x: torch.Tensor, W: torch.Tensor, b: Optional[torch.Tensor] = None) -> torch.Tensor:
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} does not match weight {tuple(W.shape)}")
    y = x @ W
    if b is not None:
        if b.shape[-1] != W.shape[1]:
            raise ShapeError(f"linear: bias {tuple(b.shape)} does not match weight {tuple(W.shape)}")
        y = y + b
    return y


def _masked(add_mask: torch.Tensor) -> torch.Tensor:
    return add_mask <= MASK_THRESHOLD


def _softmax(z: torch.Tensor, blocked: Optional[torch.Tensor] = None) -> torch.Tensor:
    # written out because torch.softmax is slow on short CPU rows; the clamp keeps
    # exp off its (very slow) underflow path and only touches weights below e^-80
    z = (z - z.detach().amax(dim=-1, keepdim=True)).clamp(min=-80.0)
    e = torch.exp(z)
    if blocked is not None:
        e = e.masked_fill(blocked, 0.0)
    return e / e.sum(dim=-1, keepdim=True)


def softmax_masked(logits: torch.Tensor, add_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Softmax over the last axis; entries whose additive mask is -inf come out exactly 0."""
    if add_mask is None:
        return _softmax(logits)
    blocked = _masked(add_mask)
    if bool(blocked.all(dim=-1).any()):
        raise MaskExhausted("every entry of a softmax row is masked")
    return _softmax(logits + add_mask.clamp(min=NEG_INF), blocked)


def attention_weights(
    Q: torch.Tensor, K: torch.Tensor, heads: int, add_mask: Optional[torch.Tensor] = None
) -> torch.Tensor:
    """Per-head attention weights of shape ``(..., heads, Nq, Nk)``."""
    d = Q.shape[-1]
    if K.shape[-1] != d or d % heads:
        raise ShapeError(f"mha: feature dims Q={d}, K={K.shape[-1]} with {heads} heads")
    dk = d // heads
    q = Q.unflatten(-1, (heads, dk)).transpose(-3, -2)
    k = K.unflatten(-1, (heads, dk)).transpose(-3, -2)
    scores = q @ k.transpose(-1, -2) / math.sqrt(dk)
    mask = None if add_mask is None else add_mask.unsqueeze(-3)
    return softmax_masked(scores, mask)


def mha(
    Q: torch.Tensor,
    K: torch.Tensor,
    V: torch.Tensor,
    heads: int,
    add_mask: Optional[torch.Tensor] = None,
    W_out: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Multi-head scaled dot-product attention on already-projected Q, K, V.

    ``add_mask`` broadcasts against ``(..., Nq, Nk)``; heads are concatenated
    and multiplied by ``W_out`` when given.
    """
    if V.shape[-1] % heads or K.shape[-2] != V.shape[-2]:
        raise ShapeError(f"mha: K {tuple(K.shape)} and V {tuple(V.shape)} disagree")
    a = attention_weights(Q, K, heads, add_mask)
    v = V.unflatten(-1, (heads, V.shape[-1] // heads)).transpose(-3, -2)
    out = (a @ v).transpose(-3, -2).flatten(-2)
    if W_out is not None:
        out = linear(out, W_out)
    return out


def layer_norm(x: torch.Tensor, gain: torch.Tensor, shift: torch.Tensor, eps: float = LN_EPS) -> torch.Tensor:
    if gain.shape[-1] != x.shape[-1] or shift.shape[-1] != x.shape[-1]:
        raise ShapeError(f"layer_norm: features {x.shape[-1]} vs gain {tuple(gain.shape)}")
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps) * gain + shift


def backward(loss: torch.Tensor, store: ParamStore) -> dict[str, torch.Tensor]:
    """Accumulate d(loss)/d(param) into ``store.grads``; untouched parameters get zeros."""
    if loss.numel() != 1:
        raise ShapeError("backward needs a scalar loss")
    if not loss.requires_grad:
        raise GradientUnavailable("loss was not computed from recorded parameter operations")
    names = store.names()
    grads = torch.autograd.grad(loss, [store[n] for n in names], allow_unused=True)
    for name, g in zip(names, grads):
        g = torch.zeros_like(store[name]) if g is None else g.detach()
        prev = store.grads[name]
        store.grads[name] = g if prev is None else prev + g
    return dict(store.grads)  # type: ignore[arg-type]


def adam_step(
    store: ParamStore,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update in place; consumes (and clears) the gradients."""
    missing = [n for n, g in store.grads.items() if g is None]
    if missing:
        raise GradientUnavailable(f"no gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    with torch.no_grad():
        for name, p in store.params.items():
            g = store.grads[name]
            m = store.exp_avg.get(name)
            if m is None:
                m = store.exp_avg[name] = torch.zeros_like(p)
                store.exp_avg_sq[name] = torch.zeros_like(p)
            v = store.exp_avg_sq[name]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.sub_(lr * (m / bc1) / (torch.sqrt(v / bc2) + eps))
    store.zero_grad()


def finite_difference_grad(
    loss_fn: Callable[[ParamStore], torch.Tensor],
    store: ParamStore,
    h: float = 1e-3,
    chunk: Optional[int] = 256,
) -> dict[str, np.ndarray]:
    """Central differences of ``loss_fn`` w.r.t. every parameter entry, in float64.

    With ``chunk`` set, perturbed copies of the flattened parameter vector are
    evaluated ``chunk`` at a time through ``torch.func.vmap``; ``chunk=None``
    falls back to one forward pass per perturbation.
    """
    work = store.copy(torch.float64)
    names = work.names()
    shapes = [tuple(work[n].shape) for n in names]
    sizes = [work[n].numel() for n in names]
    base = torch.cat([work[n].detach().reshape(-1) for n in names])
    total = base.numel()

    def f(vec: torch.Tensor) -> torch.Tensor:
        parts = torch.split(vec, sizes)
        return loss_fn(ParamStore.wrap({n: p.reshape(s) for n, p, s in zip(names, parts, shapes)}, torch.float64))

    grad = np.empty(total)
    with torch.no_grad():
        if chunk is None:
            for i in range(total):
                e = torch.zeros(total, dtype=torch.float64)
                e[i] = h
                grad[i] = (float(f(base + e)) - float(f(base - e))) / (2 * h)
        else:
            batched = torch.func.vmap(f)
            for start in range(0, total, chunk):
                idx = torch.arange(start, min(start + chunk, total))
                E = torch.zeros(len(idx), total, dtype=torch.float64)
                E[torch.arange(len(idx)), idx] = h
                up = batched(base + E)
                down = batched(base - E)
                grad[start : start + len(idx)] = ((up - down) / (2 * h)).numpy()
    out = {}
    offset = 0
    for name, shape, size in zip(names, shapes, sizes):
        out[name] = grad[offset : offset + size].reshape(shape)
        offset += size
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def gradcheck(
    loss_fn: Callable[[ParamStore], torch.Tensor],
    store: ParamStore,
    h: float = 1e-3,
    floor: float = 1e-6,
    chunk: Optional[int] = 256,
) -> tuple[float, str]:
    """Max elementwise relative error between autograd and central differences (f64 replay).

    Returns the error and the name of the parameter where it occurs.
    """
    work = store.copy(torch.float64)
    analytic = {k: v.numpy() for k, v in backward(loss_fn(work), work).items()}
    numeric = finite_difference_grad(loss_fn, work, h=h, chunk=chunk)
    worst, where = 0.0, ""
    for name in work.names():
        err = float(relative_error(analytic[name], numeric[name], floor).max(initial=0.0))
        if err > worst:
            worst, where = err, name
    return worst, where


def save_checkpoint(store: ParamStore, meta: dict, path: str | Path) -> None:
    """Binary container: magic, JSON header, then ``name / shape / little-endian f32`` records."""
    header = dict(meta, version=CHECKPOINT_VERSION, step_count=store.step_count)
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    hb = json.dumps(header, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(hb)))
    buf.write(hb)
    buf.write(struct.pack("<I", len(store)))
    for name in store.names():
        arr = store[name].detach().cpu().numpy().astype("<f4")
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[ParamStore, dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    buf = io.BytesIO(raw)

    def read(fmt: str):
        size = struct.calcsize(fmt)
        chunk = buf.read(size)
        if len(chunk) != size:
            raise CheckpointError("truncated checkpoint")
        return struct.unpack(fmt, chunk)

    if buf.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file")
    (hlen,) = read("<I")
    header = json.loads(buf.read(hlen))
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    store = ParamStore(torch.float32)
    (count,) = read("<I")
    for _ in range(count):
        (nlen,) = read("<H")
        name = buf.read(nlen).decode()
        (ndim,) = read("<B")
        shape = read(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) * 4
        payload = buf.read(size)
        if len(payload) != size:
            raise CheckpointError(f"truncated payload for {name}")
        store.add(name, np.frombuffer(payload, dtype="<f4").reshape(shape))
    store.step_count = int(header.get("step_count", 0))
    return store, header
