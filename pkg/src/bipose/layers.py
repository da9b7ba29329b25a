"""Module containers and the primitive layers built on :mod:`bipose.autograd`."""

from __future__ import annotations

import contextlib
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor
from .bitpack import pack_activations, pack_weights
from .kernels import BINARY, REAL, ConvSpec, binary_conv2d

DTYPE = np.float32

# Populated with (ConvSpec, out_h, out_w) for every conv forward while tracing.
_TRACE: list | None = None


@contextlib.contextmanager
def trace_convs():
    """Record the spec and output size of every convolution executed inside the block."""
    global _TRACE
    prev, _TRACE = _TRACE, []
    try:
        yield _TRACE
    finally:
        _TRACE = prev


class Module:
    """Owns parameters, buffers and child modules in registration order."""

    def __init__(self):
        object.__setattr__(self, "_param_names", [])
        object.__setattr__(self, "_buffer_names", [])
        object.__setattr__(self, "_module_names", [])
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            if name not in self._param_names:
                self._param_names.append(name)
        elif isinstance(value, Module):
            if name not in self._module_names:
                self._module_names.append(name)
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray):
        if name not in self._buffer_names:
            self._buffer_names.append(name)
        object.__setattr__(self, name, value)

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name in self._module_names:
            child = getattr(self, name)
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def modules(self):
        return [m for _, m in self.named_modules()]

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for prefix, mod in self.named_modules():
            for name in mod._param_names:
                yield (f"{prefix}.{name}" if prefix else name), getattr(mod, name)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for prefix, mod in self.named_modules():
            for name in mod._buffer_names:
                yield (f"{prefix}.{name}" if prefix else name), getattr(mod, name)

    def train(self, mode: bool = True):
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        """Cast parameters and buffers in place (float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for prefix, mod in self.named_modules():
            for name in mod._buffer_names:
                object.__setattr__(mod, name, getattr(mod, name).astype(dtype))
        return self

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for name, p in self.named_parameters():
            p.data = np.array(state[name], dtype=p.data.dtype).reshape(p.data.shape)
        for prefix, mod in self.named_modules():
            for bname in mod._buffer_names:
                full = f"{prefix}.{bname}" if prefix else bname
                cur = getattr(mod, bname)
                object.__setattr__(mod, bname, np.array(state[full], dtype=cur.dtype).reshape(cur.shape))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, items=()):
        super().__init__()
        self._items: list[Module] = []
        for m in items:
            self.append(m)

    def append(self, m: Module):
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Identity(Module):
    def forward(self, x):
        return x


def _kaiming(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(DTYPE)


class Conv2d(Module):
    """Real or binary convolution without bias.

    In binary mode both the input and the latent weights pass through the
    sign binarizer and the result is scaled per output filter by the mean
    absolute latent weight (held constant for the backward pass).  Padding of
    the binarized input uses +1.  With ``packed`` set and the module in eval
    mode, the forward runs the XOR/popcount kernel on packed bits instead.
    """

    def __init__(self, c_in, c_out, k=3, stride=1, binary=False, bias=False, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.spec = ConvSpec(c_in, c_out, k, stride, mode=BINARY if binary else REAL)
        if binary and bias:
            raise ValueError("binary convolutions carry no bias")
        scale = 1.0 if not binary else 0.5
        self.weight = Parameter(_kaiming(rng, (c_out, c_in, k, k), c_in * k * k) * scale)
        self.bias = Parameter(np.zeros(c_out, dtype=DTYPE)) if bias else None
        self.alpha_override: np.ndarray | None = None
        self.packed = False

    @property
    def binary(self) -> bool:
        return self.spec.mode == BINARY

    def scale_factors(self) -> np.ndarray:
        if self.alpha_override is not None:
            return self.alpha_override
        w = self.weight.data
        return np.abs(w).reshape(w.shape[0], -1).mean(axis=1).astype(w.dtype)

    def forward(self, x: Tensor) -> Tensor:
        s = self.spec
        if _TRACE is not None:
            oh, ow = s.out_size(x.shape[2], x.shape[3])
            _TRACE.append((s, oh, ow))
        if not self.binary:
            out = ag.conv2d(x, self.weight, s.stride, s.padding)
            if self.bias is not None:
                out = ag.add(out, ag.reshape(self.bias, (1, -1, 1, 1)))
            return out
        alpha = self.scale_factors()
        if self.packed and not self.training and not x.requires_grad:
            out = binary_conv2d(pack_activations(x.data), pack_weights(self.weight.data), alpha, s)
            return Tensor(out.astype(x.dtype, copy=False))
        xb = ag.sign_ste(x)
        wb = ag.sign_ste(self.weight)
        out = ag.conv2d(xb, wb, s.stride, s.padding, pad_value=1.0)
        return ag.mul(out, alpha.astype(out.dtype).reshape(1, -1, 1, 1))


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, gamma_init: float = 1.0):
        super().__init__()
        self.gamma = Parameter(np.full(channels, gamma_init, dtype=DTYPE))
        self.beta = Parameter(np.zeros(channels, dtype=DTYPE))
        self.register_buffer("running_mean", np.zeros(channels, dtype=DTYPE))
        self.register_buffer("running_var", np.ones(channels, dtype=DTYPE))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ag.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.momentum, self.eps
        )


class PReLU(Module):
    def __init__(self, channels: int, init: float = 0.25):
        super().__init__()
        self.slope = Parameter(np.full(channels, init, dtype=DTYPE))

    def forward(self, x):
        return ag.prelu(x, self.slope)


class ReLU(Module):
    def forward(self, x):
        return ag.relu(x)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(d_in)
        self.weight = Parameter(rng.uniform(-bound, bound, (d_out, d_in)).astype(DTYPE))
        self.bias = Parameter(np.zeros(d_out, dtype=DTYPE)) if bias else None

    def forward(self, x):
        if _TRACE is not None:
            _TRACE.append(("linear", self.weight.shape[1], self.weight.shape[0]))
        return ag.linear(x, self.weight, self.bias)


class Sequential(Module):
    def __init__(self, *mods: Module):
        super().__init__()
        self.layers = ModuleList(mods)

    def forward(self, x):
        for m in self.layers:
            x = m(x)
        return x


def set_packed_inference(model: Module, enabled: bool = True) -> Module:
    """Route every binary conv of ``model`` through the packed kernel in eval mode."""
    for m in model.modules():
        if isinstance(m, Conv2d) and m.binary:
            m.packed = enabled
    return model
