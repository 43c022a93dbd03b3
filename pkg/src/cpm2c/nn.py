"""Neural layers and the Adam optimizer, built on the tensor module.

Layers hold their parameters as ``Tensor`` leaves and expose
``named_parameters`` (trainable) plus ``named_state`` (trainable and
persistent buffers such as batch-norm running statistics). Checkpoints
serialize ``named_state`` into a flat binary format.
"""

from __future__ import annotations

import math
import struct
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import CheckpointError, NumericalError, ShapeError
from .tensor import Tensor


def _join(prefix: str, name: str) -> str:
    return name if not prefix else f"{prefix}.{name}"


def _sqrt(x: Tensor) -> Tensor:
    """Differentiable square root of a strictly positive tensor."""
    return T.exp(T.scale(T.log(x), 0.5))


class Linear:
    """Affine map y = x W^T + b over the last axis."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        bound = 1.0 / math.sqrt(in_dim)
        self.weight = Tensor(rng.uniform(-bound, bound, (out_dim, in_dim)),
                             requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, out_dim),
                           requires_grad=True)

    @classmethod
    def zeros(cls, in_dim: int, out_dim: int) -> "Linear":
        """Zero-initialized layer (used for residual output projections)."""
        layer = cls.__new__(cls)
        layer.weight = T.zeros((out_dim, in_dim), requires_grad=True)
        layer.bias = T.zeros(out_dim, requires_grad=True)
        return layer

    @classmethod
    def identity(cls, dim: int) -> "Linear":
        layer = cls.__new__(cls)
        layer.weight = Tensor(np.eye(dim), requires_grad=True)
        layer.bias = T.zeros(dim, requires_grad=True)
        return layer

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[1]:
            raise ShapeError(f"linear: input dim {x.shape[-1]} != "
                             f"{self.weight.shape[1]}")
        shape = x.shape
        if len(shape) > 2:
            x = T.reshape(x, (int(np.prod(shape[:-1])), shape[-1]))
        out = T.add(T.matmul(x, T.transpose(self.weight, 0, 1)), self.bias)
        if len(shape) > 2:
            out = T.reshape(out, shape[:-1] + (self.weight.shape[0],))
        return out

    def named_parameters(self, prefix: str = ""):
        return [(_join(prefix, "weight"), self.weight),
                (_join(prefix, "bias"), self.bias)]

    named_state = named_parameters


class LayerNorm:
    """Normalization over the last axis with learnable scale and shift."""

    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = T.ones(dim, requires_grad=True)
        self.beta = T.zeros(dim, requires_grad=True)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        mean = T.reduce_mean(x, axis=-1, keepdims=True)
        centered = T.sub(x, mean)
        var = T.reduce_mean(T.mul(centered, centered), axis=-1, keepdims=True)
        denom = _sqrt(T.add(var, Tensor(self.eps)))
        return T.add(T.mul(T.div(centered, denom), self.gamma), self.beta)

    def named_parameters(self, prefix: str = ""):
        return [(_join(prefix, "gamma"), self.gamma),
                (_join(prefix, "beta"), self.beta)]

    named_state = named_parameters


class MultiHeadAttention:
    """Scaled dot-product attention over an L x D sequence.

    The output projection starts at zero so the enclosing residual block
    is the identity at initialization.
    """

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator):
        if dim % num_heads != 0:
            raise ShapeError(f"attention: dim {dim} not divisible by "
                             f"{num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.query = Linear(dim, dim, rng)
        self.key = Linear(dim, dim, rng)
        self.value = Linear(dim, dim, rng)
        self.out = Linear.zeros(dim, dim)

    def _split(self, x: Tensor, batch: int, length: int) -> Tensor:
        # (B, L, D) -> (B, H, L, d)
        return T.transpose(
            T.reshape(x, (batch, length, self.num_heads, self.head_dim)), 1, 2)

    def forward(self, x: Tensor, return_weights: bool = False):
        """Self-attention over a (L, D) sequence or a (B, L, D) batch."""
        single = x.ndim == 2
        if single:
            x = T.reshape(x, (1,) + x.shape)
        batch, length = x.shape[0], x.shape[1]
        q = self._split(self.query.forward(x), batch, length)
        k = self._split(self.key.forward(x), batch, length)
        v = self._split(self.value.forward(x), batch, length)
        scores = T.scale(T.matmul(q, T.transpose(k, 2, 3)),
                         1.0 / math.sqrt(self.head_dim))
        weights = T.softmax(scores, axis=-1)
        ctx = T.matmul(weights, v)                       # (B, H, L, d)
        merged = T.reshape(T.transpose(ctx, 1, 2), (batch, length, self.dim))
        out = self.out.forward(merged)
        if single:
            out = T.reshape(out, (length, self.dim))
        if return_weights:
            if single:
                weights = T.reshape(
                    weights, (self.num_heads, length, length))
            return out, weights
        return out

    def named_parameters(self, prefix: str = ""):
        out = []
        for name, layer in (("query", self.query), ("key", self.key),
                            ("value", self.value), ("out", self.out)):
            out.extend(layer.named_parameters(_join(prefix, name)))
        return out

    named_state = named_parameters


class TransformerBlock:
    """Pre-norm residual block: attention then a two-layer ReLU FFN.

    Zero-initialized output projections make the whole block the identity
    map at initialization, so early training is dominated by the token
    and positional signal rather than attention noise.
    """

    def __init__(self, dim: int, num_heads: int = 8,
                 ffn_hidden: Optional[int] = None,
                 rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        hidden = ffn_hidden if ffn_hidden is not None else 4 * dim
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, num_heads, rng)
        self.ln2 = LayerNorm(dim)
        self.ffn1 = Linear(dim, hidden, rng)
        self.ffn2 = Linear.zeros(hidden, dim)

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        h = T.add(x, self.attn.forward(self.ln1.forward(x)))
        return T.add(h, self.ffn2.forward(T.relu(self.ffn1.forward(self.ln2.forward(h)))))

    def named_parameters(self, prefix: str = ""):
        out = []
        for name, mod in (("ln1", self.ln1), ("attn", self.attn),
                          ("ln2", self.ln2), ("ffn1", self.ffn1),
                          ("ffn2", self.ffn2)):
            out.extend(mod.named_parameters(_join(prefix, name)))
        return out

    named_state = named_parameters


class BatchNorm:
    """Batch normalization over the frame axis of a T x D stack.

    Batched (B, T, D) input is normalized per sequence, matching a loop
    over the individual (T, D) stacks; running statistics then track the
    average of the per-sequence moments.
    """

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = T.ones(dim, requires_grad=True)
        self.beta = T.zeros(dim, requires_grad=True)
        self.momentum = momentum
        self.eps = eps
        self.running_mean = np.zeros(dim, dtype=np.float32)
        self.running_var = np.ones(dim, dtype=np.float32)
        self.frozen = False  # identity harness: never update running stats

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        if train:
            mean = T.reduce_mean(x, axis=-2, keepdims=True)
            centered = T.sub(x, mean)
            var = T.reduce_mean(T.mul(centered, centered), axis=-2, keepdims=True)
            if not self.frozen:
                n = x.shape[-2]
                correction = n / (n - 1) if n > 1 else 1.0
                m = self.momentum
                dim = self.running_mean.shape[0]
                batch_mean = mean.data.reshape(-1, dim).mean(axis=0)
                batch_var = var.data.reshape(-1, dim).mean(axis=0)
                self.running_mean = ((1 - m) * self.running_mean
                                     + m * batch_mean).astype(
                    self.running_mean.dtype)
                self.running_var = ((1 - m) * self.running_var
                                    + m * correction * batch_var).astype(
                    self.running_var.dtype)
            denom = _sqrt(T.add(var, Tensor(self.eps)))
            normed = T.div(centered, denom)
        else:
            denom = np.sqrt(self.running_var + self.eps)
            normed = T.div(T.sub(x, Tensor(self.running_mean)), Tensor(denom))
        return T.add(T.mul(normed, self.gamma), self.beta)

    def named_parameters(self, prefix: str = ""):
        return [(_join(prefix, "gamma"), self.gamma),
                (_join(prefix, "beta"), self.beta)]

    def named_state(self, prefix: str = ""):
        return self.named_parameters(prefix) + [
            (_join(prefix, "running_mean"), self.running_mean),
            (_join(prefix, "running_var"), self.running_var)]


class PhiStack:
    """Per-frame pointwise transform: (linear, batch-norm, ReLU) blocks.

    Operates on a T x D stack frame-wise; batch statistics are taken over
    the T axis. ``skip_relu`` exists for the exact-identity harness.
    """

    def __init__(self, dim: int, blocks: int = 2,
                 rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.linears = [Linear(dim, dim, rng) for _ in range(blocks)]
        self.norms = [BatchNorm(dim) for _ in range(blocks)]
        self.skip_relu = False

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        for lin, bn in zip(self.linears, self.norms):
            x = bn.forward(lin.forward(x), train=train)
            if not self.skip_relu:
                x = T.relu(x)
        return x

    def named_parameters(self, prefix: str = ""):
        out = []
        for i, (lin, bn) in enumerate(zip(self.linears, self.norms)):
            out.extend(lin.named_parameters(_join(prefix, f"block{i}.linear")))
            out.extend(bn.named_parameters(_join(prefix, f"block{i}.bn")))
        return out

    def named_state(self, prefix: str = ""):
        out = []
        for i, (lin, bn) in enumerate(zip(self.linears, self.norms)):
            out.extend(lin.named_state(_join(prefix, f"block{i}.linear")))
            out.extend(bn.named_state(_join(prefix, f"block{i}.bn")))
        return out


def identity_phi(dim: int, blocks: int = 2) -> PhiStack:
    """A PhiStack configured to be the exact identity map in eval mode.

    Linear layers are identity, batch-norm stats are frozen at (0, 1)
    with eps 0, and the ReLU is bypassed. Used by tests that assert
    difference identities exactly.
    """
    phi = PhiStack.__new__(PhiStack)
    phi.linears = [Linear.identity(dim) for _ in range(blocks)]
    phi.norms = []
    for _ in range(blocks):
        bn = BatchNorm(dim, eps=0.0)
        bn.frozen = True
        phi.norms.append(bn)
    phi.skip_relu = True
    return phi


class PositionalEmbedding:
    """Learnable position table added before the transformer."""

    def __init__(self, length: int, dim: int, rng: np.random.Generator):
        self.table = Tensor(rng.normal(0.0, 0.02, (length, dim)),
                            requires_grad=True)

    def named_parameters(self, prefix: str = ""):
        return [(_join(prefix, "table"), self.table)]

    named_state = named_parameters


class Adam:
    """Adam with bias correction over a fixed list of named parameters."""

    def __init__(self, named_params, lr: float = 1e-5, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.named = list(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {n: np.zeros_like(p.data) for n, p in self.named}
        self._v = {n: np.zeros_like(p.data) for n, p in self.named}

    def step(self) -> None:
        """Apply one update from the gradients currently held by the params.

        The whole step aborts (no parameter touched) if any gradient is
        non-finite, naming the offending parameter.
        """
        for name, p in self.named:
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NumericalError(f"non-finite gradient for parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        for name, p in self.named:
            g = p.grad
            if g is None:
                continue
            m = self._m[name] = self.beta1 * self._m[name] + (1 - self.beta1) * g
            v = self._v[name] = self.beta2 * self._v[name] + (1 - self.beta2) * (g * g)
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.named:
            p.grad = None


# ---------------------------------------------------------------------------
# checkpoint serialization

CHECKPOINT_MAGIC = b"CPM2C\x00"
CHECKPOINT_VERSION = 1


def _entry_array(obj) -> np.ndarray:
    return obj.data if isinstance(obj, Tensor) else np.asarray(obj)


def save_checkpoint(path, named_state) -> None:
    """Write parameters and buffers as a flat little-endian binary file."""
    entries = list(named_state)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(entries)))
        for name, obj in entries:
            arr = _entry_array(obj)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> dict:
    """Read a checkpoint file into an ordered name -> float32 array map."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from None
    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)

    def u32():
        nonlocal off
        if off + 4 > len(blob):
            raise CheckpointError(f"{path}: truncated header")
        val = struct.unpack_from("<I", blob, off)[0]
        off += 4
        return val

    version = u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    count = u32()
    out = {}
    for _ in range(count):
        name_len = u32()
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        rank = u32()
        shape = tuple(u32() for _ in range(rank))
        n = int(np.prod(shape)) if shape else 1
        end = off + 4 * n
        if end > len(blob):
            raise CheckpointError(f"{path}: truncated payload for {name!r}")
        out[name] = np.frombuffer(blob[off:end], dtype="<f4").reshape(shape).copy()
        off = end
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return out


def apply_state(named_state, loaded: dict) -> None:
    """Copy loaded arrays into live parameters/buffers, verifying layout.

    All mismatches (missing names, unexpected names, wrong shapes) are
    collected and reported together.
    """
    entries = list(named_state)
    problems = []
    want = {name for name, _ in entries}
    have = set(loaded)
    for name in sorted(want - have):
        problems.append(f"missing from checkpoint: {name}")
    for name in sorted(have - want):
        problems.append(f"unexpected in checkpoint: {name}")
    for name, obj in entries:
        if name not in loaded:
            continue
        arr = loaded[name]
        target = _entry_array(obj)
        if arr.shape != target.shape:
            problems.append(f"shape mismatch for {name}: checkpoint "
                            f"{arr.shape}, model {target.shape}")
    if problems:
        raise CheckpointError("checkpoint incompatible: " + "; ".join(problems))
    for name, obj in entries:
        arr = loaded[name]
        if isinstance(obj, Tensor):
            obj.data = arr.astype(obj.data.dtype)
        else:
            np.copyto(obj, arr.astype(obj.dtype))
