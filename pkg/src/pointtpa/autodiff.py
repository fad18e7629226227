"""Differentiable primitives, gradient extraction, finite-difference checks,
SGD and the PTPK checkpoint format.

Reverse-mode differentiation is delegated to torch autograd in float64; the
finite-difference gradcheck here is deliberately torch-free in its
derivative estimate (it only evaluates the loss).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64


class NumericalError(RuntimeError):
    """Raised when a NaN/Inf shows up or a gradient check fails."""


class CheckpointError(ValueError):
    pass


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    return torch.tensor(np.asarray(data, dtype=np.float64), dtype=DTYPE, requires_grad=requires_grad)


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericalError(f"non-finite values in {what}")
    return t


def _shape_error(op: str, a: torch.Tensor, b: torch.Tensor) -> ValueError:
    return ValueError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


# -- primitives ---------------------------------------------------------------


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise _shape_error("matmul", a, b)
    return a @ b


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise _shape_error("add", a, b) from None
    return a + b


def mul_scalar(a: torch.Tensor, s: float) -> torch.Tensor:
    return a * s


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def softmax_rows(z: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = z / temperature
    z = z - z.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def layernorm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise _shape_error("layernorm", x, gamma)
    return F.layer_norm(x, x.shape[-1:], gamma, beta, eps)


def mean_rows_masked(values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Average ``values[..., n, C]`` over the slots where ``mask[..., n]`` is true.

    Rows with no true slot average to zero.
    """
    if values.shape[:-1] != mask.shape:
        raise _shape_error("mean_rows_masked", values, mask)
    w = mask.to(values.dtype)
    total = (values * w.unsqueeze(-1)).sum(dim=-2)
    count = w.sum(dim=-1, keepdim=True).clamp(min=1.0)
    return total / count


def gather_rows(x: torch.Tensor, perm) -> torch.Tensor:
    return x[torch.as_tensor(perm, dtype=torch.long)]


def scatter_rows(x: torch.Tensor, perm) -> torch.Tensor:
    """Inverse of :func:`gather_rows`: ``out[perm[k]] = x[k]``."""
    idx = torch.as_tensor(perm, dtype=torch.long)
    if len(idx) != len(x):
        raise _shape_error("scatter_rows", x, idx)
    return x.new_zeros(x.shape).index_copy(0, idx, x)


def pad_rows(x: torch.Tensor, rows: int, value: float = 0.0) -> torch.Tensor:
    extra = rows - len(x)
    if extra < 0:
        raise ValueError(f"pad_rows: cannot pad {len(x)} rows down to {rows}")
    if extra == 0:
        return x
    return torch.cat([x, x.new_full((extra,) + tuple(x.shape[1:]), value)], dim=0)


def slice_rows(x: torch.Tensor, start: int, stop: int) -> torch.Tensor:
    return x[start:stop]


def sum_all(x: torch.Tensor) -> torch.Tensor:
    return x.sum()


def cross_entropy(logits: torch.Tensor, labels, ignore_index: int = -1) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    if logits.shape[:1] != labels.shape:
        raise _shape_error("cross_entropy", logits, labels)
    return F.cross_entropy(logits, labels, ignore_index=ignore_index)


# -- gradients ------------------------------------------------------------------


def backward(loss: torch.Tensor, params: Mapping[str, torch.nn.Parameter]) -> dict[str, torch.Tensor]:
    """Gradient of a scalar loss for every named parameter.

    Frozen (``requires_grad=False``) and unreachable parameters get zeros.
    """
    if loss.numel() != 1:
        raise ValueError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    check_finite(loss, "loss")
    names = [n for n, p in params.items() if p.requires_grad]
    grads = {n: torch.zeros_like(p) for n, p in params.items()}
    if names and loss.requires_grad:
        found = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
        for n, g in zip(names, found):
            if g is not None:
                grads[n] = g
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def finite_difference(loss_fn: Callable[[], torch.Tensor], p: torch.Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn`` with respect to every entry of ``p``."""
    out = np.zeros(p.numel())
    flat = p.data.view(-1)
    with torch.no_grad():
        for i in range(p.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            out[i] = (up - down) / (2 * h)
    return out.reshape(tuple(p.shape))


@dataclass
class GradcheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    max_abs_error: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def failures(self) -> list[str]:
        return [n for n, e in self.max_rel_error.items() if not e < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    def table(self) -> str:
        width = max([len(n) for n in self.max_rel_error] + [9])
        lines = [f"{'parameter':<{width}}  {'max_rel_err':>12}  {'max_abs_err':>12}  status"]
        for n, e in self.max_rel_error.items():
            status = "ok" if e < self.tolerance else "FAIL"
            lines.append(f"{n:<{width}}  {e:12.3e}  {self.max_abs_error[n]:12.3e}  {status}")
        return "\n".join(lines)


def gradcheck(
    loss_fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.nn.Parameter],
    h: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradcheckReport:
    """Compare autograd gradients with central differences for trainable params."""
    analytic = backward(loss_fn(), params)
    report = GradcheckReport(tolerance=tolerance)
    for name, p in params.items():
        if not p.requires_grad:
            continue
        a = analytic[name].detach().numpy()
        f = finite_difference(loss_fn, p, h)
        rel = relative_error(a, f)
        report.max_rel_error[name] = float(rel.max()) if rel.size else 0.0
        report.max_abs_error[name] = float(np.abs(a - f).max()) if rel.size else 0.0
    return report


# -- optimizer --------------------------------------------------------------------


class SGD:
    """Plain SGD with optional heavy-ball momentum; never touches frozen params."""

    def __init__(self, params: Mapping[str, torch.nn.Parameter], lr: float, momentum: float = 0.0):
        self.params = {n: p for n, p in params.items() if p.requires_grad}
        self.lr = lr
        self.momentum = momentum
        self._velocity = {n: torch.zeros_like(p) for n, p in self.params.items()}

    def step(self, grads: Mapping[str, torch.Tensor]) -> None:
        with torch.no_grad():
            for n, p in self.params.items():
                g = grads[n]
                if self.momentum:
                    v = self._velocity[n]
                    v.mul_(self.momentum).add_(g)
                    g = v
                p.sub_(self.lr * g)


# -- PTPK checkpoints -------------------------------------------------------------

MAGIC = b"PTPK"
VERSION = 1


@dataclass
class CheckpointEntry:
    array: np.ndarray
    trainable: bool


def encode_checkpoint(entries: Iterable[tuple[str, np.ndarray, bool]]) -> bytes:
    entries = list(entries)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, array, trainable in entries:
        array = np.asarray(array, dtype="<f8").copy(order="C")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<BI", int(bool(trainable)), array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(array.tobytes())
    return b"".join(chunks)


def decode_checkpoint(blob: bytes) -> dict[str, CheckpointEntry]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"truncated checkpoint at byte offset {pos}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError("bad magic at byte offset 0")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at byte offset 4")
    out: dict[str, CheckpointEntry] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        trainable, rank = struct.unpack("<BI", take(5))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        array = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        if name in out:
            raise CheckpointError(f"duplicate parameter {name!r}")
        out[name] = CheckpointEntry(array, bool(trainable))
    if pos != len(blob):
        raise CheckpointError(f"trailing bytes at byte offset {pos}")
    return out


def model_entries(model: torch.nn.Module) -> list[tuple[str, np.ndarray, bool]]:
    return [(n, p.detach().numpy(), p.requires_grad) for n, p in model.named_parameters()]


def save_checkpoint(path, model: torch.nn.Module) -> None:
    Path(path).write_bytes(encode_checkpoint(model_entries(model)))


def load_checkpoint(path) -> dict[str, CheckpointEntry]:
    return decode_checkpoint(Path(path).read_bytes())
