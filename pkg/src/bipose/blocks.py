"""Building blocks of the binary pose network.

* :class:`BinaryUnit` - binarized conv, batch norm, residual add, PReLU.
* :class:`IRBottleneck` - 1x1/3x3/1x1 Binary Unit chain whose output is
  reweighted per channel by an SE branch computed from the block input.
* :class:`MSBlock` - channels split n/2, n/4, n/4 across stacks of three,
  two and one 3x3 units (7x7, 5x5 and 3x3 receptive fields), concatenated
  and channel-shuffled.
* :class:`FusionLayer` - real-valued cross-resolution exchange.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigurationError
from .layers import BatchNorm, Conv2d, Identity, Linear, Module, ModuleList, PReLU, ReLU, Sequential


class BinaryUnit(Module):
    """``PReLU(x + BN(conv(x)))``; the residual add is dropped when shapes differ.

    ``binary=False`` gives the real-valued twin used by the teacher.
    """

    def __init__(self, c_in, c_out, k=3, stride=1, binary=True, residual=None, rng=None):
        super().__init__()
        can_residual = c_in == c_out and stride == 1
        if residual is None:
            residual = can_residual
        if residual and not can_residual:
            raise ConfigurationError(f"residual unit needs matching shapes, got {c_in}->{c_out} stride {stride}")
        self.residual = residual
        self.conv = Conv2d(c_in, c_out, k, stride, binary=binary, rng=rng)
        self.bn = BatchNorm(c_out)
        self.act = PReLU(c_out)

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        if self.residual:
            if y.shape != x.shape:
                raise ConfigurationError(f"residual shape mismatch {x.shape} vs {y.shape}")
            y = ag.add(x, y)
        return self.act(y)


class SEBlock(Module):
    """Channel weights ``sigmoid(FC(ReLU(FC(avgpool(x)))))`` in (0, 1)."""

    def __init__(self, c_in, c_out=None, reduction=4, rng=None):
        super().__init__()
        c_out = c_in if c_out is None else c_out
        hidden = max(c_in // reduction, 1)
        self.fc1 = Linear(c_in, hidden, rng=rng)
        self.fc2 = Linear(hidden, c_out, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return ag.sigmoid(self.fc2(ag.relu(self.fc1(ag.global_avg_pool(x)))))


def se_weights(x: Tensor, se: SEBlock) -> Tensor:
    return se(x)


class IRBottleneck(Module):
    """Information-reconstruction bottleneck.

    ``out = shortcut(x) + s * path(x)`` where ``s = SE(x)`` is one weight per
    output channel and ``path`` contracts to ``planes`` channels then expands
    to ``planes * expansion``.  The shortcut is the identity when widths
    match, otherwise a real 1x1 conv followed by batch norm.
    """

    expansion = 4

    def __init__(self, c_in, planes, binary=True, reduction=4, rng=None):
        super().__init__()
        c_out = planes * self.expansion
        self.c_in, self.c_out = c_in, c_out
        self.unit1 = BinaryUnit(c_in, planes, k=1, binary=binary, rng=rng)
        self.unit2 = BinaryUnit(planes, planes, k=3, binary=binary, rng=rng)
        self.unit3 = BinaryUnit(planes, c_out, k=1, binary=binary, rng=rng)
        self.se = SEBlock(c_in, c_out, reduction, rng=rng)
        if c_in == c_out:
            self.shortcut = Identity()
        else:
            self.shortcut = Sequential(Conv2d(c_in, c_out, 1, rng=rng), BatchNorm(c_out))

    def conv_path(self, x: Tensor) -> Tensor:
        return self.unit3(self.unit2(self.unit1(x)))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.c_in:
            raise ConfigurationError(f"IR-Bottleneck expects {self.c_in} channels, got {x.shape[1]}")
        s = self.se(x)
        return ag.add(self.shortcut(x), ag.scale_channels(self.conv_path(x), s))


def shuffle_indices(n: int) -> np.ndarray:
    """Gather order that interleaves [A(n/2), B(n/4), C(n/4)] as A,A,B,C groups."""
    if n < 4 or n % 4:
        raise ConfigurationError(f"channel count {n} must be a positive multiple of 4")
    q = n // 4
    idx = np.empty(n, dtype=np.int64)
    g = np.arange(q)
    idx[0::4] = 2 * g
    idx[1::4] = 2 * g + 1
    idx[2::4] = 2 * q + g
    idx[3::4] = 3 * q + g
    return idx


def unshuffle_indices(n: int) -> np.ndarray:
    return np.argsort(shuffle_indices(n))


def channel_shuffle(x, n: int | None = None):
    """Apply the A,A,B,C interleave along axis 1 (axis 0 for 1-D/3-D arrays)."""
    if isinstance(x, Tensor):
        return ag.take_channels(x, shuffle_indices(x.shape[1]))
    x = np.asarray(x)
    axis = 1 if x.ndim == 4 else 0
    idx = shuffle_indices(x.shape[axis] if n is None else n)
    return np.take(x, idx, axis=axis)


class MSBlock(Module):
    """Multi-scale basic block: split, three unit stacks, concat, shuffle."""

    def __init__(self, n, binary=True, rng=None):
        super().__init__()
        if n < 4 or n % 4:
            raise ConfigurationError(f"MS-Block width {n} must be divisible by 4")
        self.n = n
        half, quarter = n // 2, n // 4
        self.branch_a = Sequential(*[BinaryUnit(half, half, binary=binary, rng=rng) for _ in range(3)])
        self.branch_b = Sequential(*[BinaryUnit(quarter, quarter, binary=binary, rng=rng) for _ in range(2)])
        self.branch_c = Sequential(BinaryUnit(quarter, quarter, binary=binary, rng=rng))
        self._perm = shuffle_indices(n)

    def forward(self, x: Tensor) -> Tensor:
        n = self.n
        if x.shape[1] != n:
            raise ConfigurationError(f"MS-Block expects {n} channels, got {x.shape[1]}")
        a = self.branch_a(ag.channel_slice(x, 0, n // 2))
        b = self.branch_b(ag.channel_slice(x, n // 2, 3 * n // 4))
        c = self.branch_c(ag.channel_slice(x, 3 * n // 4, n))
        return ag.take_channels(ag.concat([a, b, c], axis=1), self._perm)


class BasicBlock(Module):
    """Two 3x3 convs with an identity shortcut (the unmodified building block).

    The real variant is conv-BN-ReLU-conv-BN, add, ReLU.  The binarized
    variant drops both ReLUs: binarizing a rectified tensor yields a constant
    +1 input, so it keeps only sign-conv-BN twice plus the shortcut.
    """

    def __init__(self, n, binary=True, rng=None):
        super().__init__()
        self.binary = binary
        self.conv1 = Conv2d(n, n, 3, binary=binary, rng=rng)
        self.bn1 = BatchNorm(n)
        self.conv2 = Conv2d(n, n, 3, binary=binary, rng=rng)
        self.bn2 = BatchNorm(n)

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn1(self.conv1(x))
        if not self.binary:
            y = ag.relu(y)
        y = ag.add(x, self.bn2(self.conv2(y)))
        return y if self.binary else ag.relu(y)


class _UpSample(Module):
    def __init__(self, c_in, c_out, factor, rng=None):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, 1, rng=rng)
        self.bn = BatchNorm(c_out)
        self.factor = factor

    def forward(self, x):
        return ag.upsample_nearest(self.bn(self.conv(x)), self.factor)


def _down_chain(c_in, c_out, steps, rng=None) -> Sequential:
    mods: list[Module] = []
    for t in range(steps):
        last = t == steps - 1
        mods.append(Conv2d(c_in, c_out if last else c_in, 3, stride=2, rng=rng))
        mods.append(BatchNorm(c_out if last else c_in))
        if not last:
            mods.append(ReLU())
    return Sequential(*mods)


class FusionLayer(Module):
    """Sum every branch, resampled to each requested output branch.

    Branch ``j`` has width ``widths[j]`` and resolution halved ``j`` times.
    Lower-resolution inputs go through a 1x1 conv, batch norm and nearest
    upsampling; higher-resolution inputs through a chain of stride-2 3x3
    convs.  All resamplers are real-valued.
    """

    def __init__(self, widths, outputs=None, rng=None):
        super().__init__()
        self.widths = list(widths)
        self.outputs = list(range(len(widths))) if outputs is None else list(outputs)
        self.paths = ModuleList()
        for i in self.outputs:
            row = ModuleList()
            for j, wj in enumerate(self.widths):
                if j == i:
                    row.append(Identity())
                elif j > i:
                    row.append(_UpSample(wj, self.widths[i], 2 ** (j - i), rng=rng))
                else:
                    row.append(_down_chain(wj, self.widths[i], i - j, rng=rng))
            self.paths.append(row)

    def check_pyramid(self, xs):
        if len(xs) != len(self.widths):
            raise ConfigurationError(f"fusion expects {len(self.widths)} branches, got {len(xs)}")
        h0, w0 = xs[0].shape[2:]
        for j, x in enumerate(xs):
            if x.shape[1] != self.widths[j]:
                raise ConfigurationError(f"branch {j} has {x.shape[1]} channels, expected {self.widths[j]}")
            if x.shape[2] * 2**j != h0 or x.shape[3] * 2**j != w0:
                raise ConfigurationError(f"branch {j} resolution {x.shape[2:]} breaks the halving pyramid")

    def forward(self, xs: list[Tensor]) -> list[Tensor]:
        self.check_pyramid(xs)
        if len(xs) == 1:
            return list(xs)
        outs = []
        for row in self.paths:
            acc = None
            for path, x in zip(row, xs):
                y = path(x)
                acc = y if acc is None else ag.add(acc, y)
            outs.append(acc)
        return outs
