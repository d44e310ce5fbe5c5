"""Layer zoo: the block set needed by the artifact-reduction networks.

Modules register parameters and children by attribute assignment; parameter
names are the dotted attribute paths, fixed once ``assign_names`` runs.
"""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_label", None)

    def __setattr__(self, key, value):
        if isinstance(value, Tensor):
            self._params[key] = value
        elif isinstance(value, Module):
            self._modules[key] = value
        object.__setattr__(self, key, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix=""):
        for k, p in self._params.items():
            yield (f"{prefix}.{k}" if prefix else k), p
        for k, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}.{k}" if prefix else k)

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_modules(self, prefix=""):
        yield prefix, self
        for k, m in self._modules.items():
            yield from m.named_modules(f"{prefix}.{k}" if prefix else k)

    def assign_names(self, root=""):
        """Record dotted paths on parameters and modules (checkpoint + error names)."""
        for name, m in self.named_modules(root):
            object.__setattr__(m, "_label", name or type(m).__name__)
        for name, p in self.named_parameters(root):
            p.name = name
        return self

    def state_dict(self, prefix=""):
        return {name: p.data.copy() for name, p in self.named_parameters(prefix)}

    def load_state_dict(self, state, prefix=""):
        for name, p in self.named_parameters(prefix):
            if name not in state:
                raise KeyError(f"missing parameter {name!r} in state")
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != expected {p.data.shape}")
            p.data = arr.copy()

    def set_trainable(self, flag):
        for p in self.parameters():
            p.requires_grad = bool(flag)
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def param_checksum(self):
        return float(sum(np.abs(p.data).sum() for p in self.parameters()))

    def where(self):
        return self._label or type(self).__name__


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._items = []
        for m in mods:
            self.append(m)

    def append(self, m):
        self._modules[str(len(self._items))] = m
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Sequential(ModuleList):
    def forward(self, x):
        for m in self._items:
            x = m(x)
        return x


def _he_init(rng, shape, fan_in):
    std = math.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=shape)


def _param(data, dtype=None):
    t = Tensor(np.asarray(data, dtype=dtype or T.default_dtype()), requires_grad=True)
    return t


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=None, bias=True, zero_init=False):
        super().__init__()
        if in_ch < 1 or out_ch < 1 or kernel < 1:
            raise ValueError("Conv2d: channel and kernel extents must be positive")
        if stride < 1:
            raise ValueError("Conv2d: stride must be positive")
        self.in_ch, self.out_ch = in_ch, out_ch
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        fan_in = in_ch * kernel * kernel
        w = np.zeros((out_ch, in_ch, kernel, kernel)) if zero_init else _he_init(rng, (out_ch, in_ch, kernel, kernel), fan_in)
        self.weight = _param(w)
        self.bias = _param(np.zeros(out_ch)) if bias else None

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ValueError(f"{self.where()}: expected (N,{self.in_ch},H,W) input, got {x.shape}")
        y = T.conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        if self.bias is not None:
            y = y + self.bias.reshape(1, self.out_ch, 1, 1)
        return y


class ConvTranspose2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=0, bias=True):
        super().__init__()
        if in_ch < 1 or out_ch < 1 or kernel < 1:
            raise ValueError("ConvTranspose2d: channel and kernel extents must be positive")
        self.in_ch, self.out_ch = in_ch, out_ch
        self.stride, self.padding = stride, padding
        fan_in = in_ch * kernel * kernel
        self.weight = _param(_he_init(rng, (in_ch, out_ch, kernel, kernel), fan_in))
        self.bias = _param(np.zeros(out_ch)) if bias else None

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ValueError(f"{self.where()}: expected (N,{self.in_ch},H,W) input, got {x.shape}")
        y = T.conv_transpose2d(x, self.weight, stride=self.stride, padding=self.padding)
        if self.bias is not None:
            y = y + self.bias.reshape(1, self.out_ch, 1, 1)
        return y


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, bias=True, zero_init=False):
        super().__init__()
        if in_dim < 1 or out_dim < 1:
            raise ValueError("Linear: dimensions must be positive")
        self.in_dim, self.out_dim = in_dim, out_dim
        w = np.zeros((in_dim, out_dim)) if zero_init else _he_init(rng, (in_dim, out_dim), in_dim)
        self.weight = _param(w)
        self.bias = _param(np.zeros(out_dim)) if bias else None

    def forward(self, x):
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"{self.where()}: expected last dim {self.in_dim}, got {x.shape}")
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class GroupNorm(Module):
    """Group normalization; falls back to one group per channel when channels < groups."""

    def __init__(self, channels, groups=8, eps=1e-5):
        super().__init__()
        if channels < 1:
            raise ValueError("GroupNorm: channels must be positive")
        self.channels = channels
        self.groups = groups if channels >= groups else channels
        if channels % self.groups != 0:
            self.groups = math.gcd(channels, self.groups)
        self.eps = eps
        self.weight = _param(np.ones(channels))
        self.bias = _param(np.zeros(channels))

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ValueError(f"{self.where()}: expected (N,{self.channels},H,W), got {x.shape}")
        n, c, h, w = x.shape
        g = self.groups
        r = x.reshape(n, g, (c // g) * h * w)
        m = r.mean(axis=2, keepdims=True)
        centered = r - m
        v = T.square(centered).mean(axis=2, keepdims=True)
        normed = centered * T.pow_const(v + self.eps, -0.5)
        y = normed.reshape(n, c, h, w)
        return y * self.weight.reshape(1, c, 1, 1) + self.bias.reshape(1, c, 1, 1)


class SiLU(Module):
    def forward(self, x):
        return T.silu(x)


class Downsample(Module):
    """Learned 2x spatial reduction (3x3 conv, stride 2)."""

    def __init__(self, in_ch, out_ch, rng):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, 3, rng, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(Module):
    """Learned 2x spatial expansion (nearest-neighbor repeat + 3x3 conv)."""

    def __init__(self, in_ch, out_ch, rng):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, 3, rng, padding=1)

    def forward(self, x):
        return self.conv(T.nearest_upsample2(x))


class ResidualBlock(Module):
    """norm-free entry conv -> GN -> SiLU -> zero-init conv, added to the input.

    ``extra_ch`` widens the first convolution for inputs fused along the
    channel axis (e.g. a mask plane); the second conv starts at zero so a
    fresh block is the identity.
    """

    def __init__(self, channels, rng, extra_ch=0, groups=8):
        super().__init__()
        self.channels = channels
        self.extra_ch = extra_ch
        self.conv1 = Conv2d(channels + extra_ch, channels, 3, rng, padding=1)
        self.norm = GroupNorm(channels, groups)
        self.act = SiLU()
        self.conv2 = Conv2d(channels, channels, 3, rng, padding=1, zero_init=True)

    def forward(self, x, extra=None):
        if (extra is not None) != (self.extra_ch > 0):
            raise ValueError(f"{self.where()}: extra input presence must match construction")
        h = x if extra is None else fuse_mask(x, extra)
        h = self.conv2(self.act(self.norm(self.conv1(h))))
        return x + h


def fuse_mask(features, mask):
    """Concatenate a mask plane onto the feature channels."""
    if mask.shape[0] != features.shape[0] or mask.shape[-2:] != features.shape[-2:]:
        raise ValueError(f"fuse_mask: mask {mask.shape} does not match features {features.shape}")
    return T.concat([features, mask], axis=1)


def fuse_implant(tokens, bias_vec):
    """Add a per-sample conditioning vector to every spatial token."""
    n, _, c = tokens.shape
    if bias_vec.shape != (n, c):
        raise ValueError(f"fuse_implant: bias {bias_vec.shape} incompatible with tokens {tokens.shape}")
    return tokens + bias_vec.reshape(n, 1, c)


class TransformerBlock(Module):
    """Single-head self-attention over flattened spatial tokens, then an MLP.

    Pre-norm; attention and MLP outputs start at zero so the block begins as
    the identity. An optional per-sample bias vector conditions the tokens
    before attention.
    """

    def __init__(self, channels, rng, mlp_ratio=2, groups=8):
        super().__init__()
        self.channels = channels
        self.norm1 = GroupNorm(channels, groups)
        self.q = Linear(channels, channels, rng)
        self.k = Linear(channels, channels, rng)
        self.v = Linear(channels, channels, rng)
        self.proj = Linear(channels, channels, rng, zero_init=True)
        self.norm2 = GroupNorm(channels, groups)
        hidden = channels * mlp_ratio
        self.mlp1 = Linear(channels, hidden, rng)
        self.mlp2 = Linear(hidden, channels, rng, zero_init=True)
        self.scale = 1.0 / math.sqrt(channels)

    def forward(self, x, token_bias=None):
        n, c, h, w = x.shape
        if c != self.channels:
            raise ValueError(f"{self.where()}: expected {self.channels} channels, got {c}")

        def tokens_of(t):
            return t.reshape(n, c, h * w).transpose(0, 2, 1)

        def image_of(t):
            return t.transpose(0, 2, 1).reshape(n, c, h, w)

        tok = tokens_of(self.norm1(x))
        if token_bias is not None:
            tok = fuse_implant(tok, token_bias)
        q, k, v = self.q(tok), self.k(tok), self.v(tok)
        att = T.softmax(T.matmul(q, k.transpose(0, 2, 1)) * self.scale, axis=-1)
        x = x + image_of(self.proj(T.matmul(att, v)))
        tok2 = tokens_of(self.norm2(x))
        x = x + image_of(self.mlp2(T.silu(self.mlp1(tok2))))
        return x
