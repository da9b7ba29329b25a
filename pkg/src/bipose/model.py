"""Network assembly, cost accounting and the ``BIHR`` model file format."""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .bitpack import pack, unpack
from .blocks import BasicBlock, FusionLayer, IRBottleneck, MSBlock
from .errors import ConfigurationError, CorruptionError, FormatError, InvalidInputError
from .kernels import OpCount, count_ops
from .layers import BatchNorm, Conv2d, Identity, Linear, Module, ModuleList, PReLU, Sequential

PRUNED = ((4,), (0, 4), (0, 0, 4), (0, 0, 0, 4))
UNPRUNED = ((4,), (4, 4), (4, 4, 4), (4, 4, 4, 4))


@dataclass(frozen=True)
class NetworkConfig:
    """Declarative description of the multi-branch network.

    ``stages[n]`` lists the block count of every branch at stage ``n + 1``;
    stage 1 holds the IR-Bottlenecks.  Branch ``i`` has width
    ``width * 2**i`` and resolution ``input / (4 * 2**i)``.
    """

    joints: int = 5
    in_channels: int = 1
    input_size: tuple[int, int] = (64, 64)
    stem_channels: int = 16
    width: int = 8
    planes: int = 8
    stages: tuple[tuple[int, ...], ...] = PRUNED
    num_modules: tuple[int, ...] = (1, 1, 1, 1)
    binarize: bool = True
    block: str = "ms"
    se_reduction: int = 4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(tuple(int(b) for b in s) for s in self.stages))
        object.__setattr__(self, "num_modules", tuple(int(m) for m in self.num_modules))
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        self.validate()

    def validate(self):
        if len(self.stages) < 2:
            raise ConfigurationError("need at least two stages")
        for n, s in enumerate(self.stages):
            if len(s) != n + 1:
                raise ConfigurationError(f"stage {n + 1} must list {n + 1} branch block counts, got {s}")
            if any(b < 0 for b in s):
                raise ConfigurationError("block counts must be non-negative")
        if len(self.num_modules) != len(self.stages):
            raise ConfigurationError("num_modules needs one entry per stage")
        if self.block not in ("ms", "basic"):
            raise ConfigurationError(f"unknown block kind {self.block!r}")
        if self.block == "ms" and self.width % 4:
            raise ConfigurationError("MS-Block widths must be divisible by 4")
        if min(self.joints, self.in_channels, self.stem_channels, self.width, self.planes) < 1:
            raise ConfigurationError("sizes must be positive")
        d = self.divisor
        if self.input_size[0] % d or self.input_size[1] % d:
            raise ConfigurationError(f"input size {self.input_size} must be divisible by {d}")

    @property
    def n_branches(self) -> int:
        return len(self.stages)

    @property
    def divisor(self) -> int:
        return 4 * 2 ** (self.n_branches - 1)

    def branch_widths(self, n: int | None = None) -> list[int]:
        n = self.n_branches if n is None else n
        return [self.width * 2**i for i in range(n)]

    @property
    def heatmap_size(self) -> tuple[int, int]:
        return self.input_size[0] // 4, self.input_size[1] // 4

    def scaled(self, multiplier: float) -> "NetworkConfig":
        """Scale every channel count (stem, planes, branch width) by ``multiplier``."""
        w = max(4, int(round(self.width * multiplier / 4)) * 4)
        return replace(
            self,
            width=w,
            stem_channels=max(1, int(round(self.stem_channels * multiplier))),
            planes=max(1, int(round(self.planes * multiplier))),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [list(s) for s in self.stages]
        d["num_modules"] = list(self.num_modules)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown network fields: {sorted(unknown)}")
        if "stages" in d:
            d["stages"] = tuple(tuple(s) for s in d["stages"])
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def desk_config(**overrides) -> NetworkConfig:
    """The default laptop-scale setup: 64x64 input, branch widths 8/16/32/64."""
    return NetworkConfig(**overrides)


def paper_config(**overrides) -> NetworkConfig:
    """W32 widths at 256x192 input with 17 joints."""
    base = dict(
        joints=17,
        in_channels=3,
        input_size=(256, 192),
        stem_channels=64,
        width=32,
        planes=64,
        num_modules=(1, 1, 4, 3),
    )
    base.update(overrides)
    return NetworkConfig(**base)


def _tag_chain(mod: Module, div: int) -> int:
    """Record each conv's input downsampling factor, following stride-2 steps in order."""
    for m in mod.modules():
        if isinstance(m, Conv2d):
            m.in_div = div
            if m.spec.stride == 2:
                div *= 2
        elif isinstance(m, Linear):
            m.in_div = div
    return div


class Transition(Module):
    """Adapts the previous stage's branches to the next stage's widths and adds one branch.

    Like the stem, these real layers end in PReLU rather than ReLU: whatever
    they emit is binarized next, and the sign of a rectified tensor is
    constantly +1.
    """

    def __init__(self, prev_widths, new_widths, rng=None):
        super().__init__()
        self.paths = ModuleList()
        for i, w_new in enumerate(new_widths):
            if i < len(prev_widths):
                if prev_widths[i] == w_new:
                    self.paths.append(Identity())
                else:
                    self.paths.append(Sequential(Conv2d(prev_widths[i], w_new, 3, rng=rng), BatchNorm(w_new), PReLU(w_new)))
            else:
                src = prev_widths[-1]
                self.paths.append(Sequential(Conv2d(src, w_new, 3, stride=2, rng=rng), BatchNorm(w_new), PReLU(w_new)))
        self.n_prev = len(prev_widths)

    def forward(self, xs):
        outs = []
        for i, path in enumerate(self.paths):
            src = xs[i] if i < self.n_prev else xs[-1]
            outs.append(path(src))
        return outs


class HRModule(Module):
    """Per-branch block stacks followed by a fusion layer."""

    def __init__(self, widths, blocks, block_kind, binary, outputs=None, rng=None):
        super().__init__()
        make = MSBlock if block_kind == "ms" else BasicBlock
        self.branches = ModuleList(
            Sequential(*[make(w, binary=binary, rng=rng) for _ in range(b)]) for w, b in zip(widths, blocks)
        )
        self.fusion = FusionLayer(widths, outputs, rng=rng)

    def forward(self, xs):
        return self.fusion([br(x) for br, x in zip(self.branches, xs)])


class BinaryPoseNet(Module):
    """Real stem, IR-Bottleneck stage, multi-branch stages, real 1x1 head."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        binary = config.binarize
        c = config.stem_channels
        self.stem = Sequential(
            Conv2d(config.in_channels, c, 3, stride=2, rng=rng),
            BatchNorm(c),
            PReLU(c),
            Conv2d(c, c, 3, stride=2, rng=rng),
            BatchNorm(c),
            PReLU(c),
        )
        _tag_chain(self.stem, 1)
        layer1 = []
        c_in = c
        for _ in range(config.stages[0][0]):
            blk = IRBottleneck(c_in, config.planes, binary=binary, reduction=config.se_reduction, rng=rng)
            layer1.append(blk)
            c_in = blk.c_out
        self.layer1 = Sequential(*layer1)
        _tag_chain(self.layer1, 4)

        prev = [c_in]
        self.transitions = ModuleList()
        self.stages = ModuleList()
        last = len(config.stages) - 1
        for n in range(1, len(config.stages)):
            widths = config.branch_widths(n + 1)
            tr = Transition(prev, widths, rng=rng)
            for i, path in enumerate(tr.paths):
                _tag_chain(path, 4 * 2 ** min(i, len(prev) - 1))
            self.transitions.append(tr)
            mods = ModuleList()
            for m in range(config.num_modules[n]):
                outputs = [0] if (n == last and m == config.num_modules[n] - 1) else None
                hm = HRModule(widths, config.stages[n], config.block, binary, outputs, rng=rng)
                for i, br in enumerate(hm.branches):
                    _tag_chain(br, 4 * 2**i)
                for row in hm.fusion.paths:
                    for j, path in enumerate(row):
                        _tag_chain(path, 4 * 2**j)
                mods.append(hm)
            self.stages.append(mods)
            prev = widths
        self.head = Conv2d(config.width, config.joints, 1, bias=True, rng=rng)
        _tag_chain(self.head, 4)

    def forward(self, x) -> Tensor:
        x = ag.as_tensor(x)
        if x.ndim == 3:
            x = Tensor(x.data[None])
        d = self.config.divisor
        h, w = x.shape[2:]
        if x.shape[1] != self.config.in_channels:
            raise InvalidInputError(f"expected {self.config.in_channels} input channels, got {x.shape[1]}")
        if h % d or w % d:
            raise InvalidInputError(f"input {h}x{w} must be divisible by {d}")
        y = self.layer1(self.stem(x))
        branches = [y]
        for tr, mods in zip(self.transitions, self.stages):
            branches = tr(branches)
            for m in mods:
                branches = m(branches)
        return self.head(branches[0])

    def predict(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Inference-mode heatmaps for a stack of images."""
        was_training = self.training
        self.eval()
        outs = []
        with ag.no_grad():
            for i in range(0, len(images), batch_size):
                outs.append(self.forward(Tensor(np.asarray(images[i : i + batch_size], dtype=np.float32))).data)
        self.train(was_training)
        return np.concatenate(outs)


def build(config: NetworkConfig) -> BinaryPoseNet:
    return BinaryPoseNet(config)


def teacher_config(config: NetworkConfig) -> NetworkConfig:
    return replace(config, binarize=False)


# --------------------------------------------------------------------------
# cost accounting
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CostReport:
    params: int
    binary_params: int
    ops: OpCount

    @property
    def real_params(self) -> int:
        return self.params - self.binary_params

    @property
    def storage_bytes(self) -> float:
        """Deployed size: 1 bit per binary weight, 32 bits for everything else."""
        return self.binary_params / 8 + self.real_params * 4

    @property
    def total_ops(self) -> float:
        return self.ops.ops


def count_params_and_ops(model: BinaryPoseNet, input_size: tuple[int, int] | None = None) -> CostReport:
    """Sum per-layer parameter and operation counts for one image of ``input_size``."""
    h, w = model.config.input_size if input_size is None else input_size
    total = OpCount()
    binary_params = 0
    for m in model.modules():
        if isinstance(m, Conv2d):
            oh, ow = m.spec.out_size(h // m.in_div, w // m.in_div)
            total = total + count_ops(m.spec, oh, ow)
            if m.binary:
                binary_params += m.weight.data.size
        elif isinstance(m, Linear):
            total = total + OpCount(flops=m.weight.data.size)
    return CostReport(model.num_parameters(), binary_params, total)


def key_layers(model: BinaryPoseNet) -> dict[str, list[tuple[str, str]]]:
    """Conv names and modes grouped by role (stem, transition, fusion, head, blocks)."""
    groups: dict[str, list[tuple[str, str]]] = {"stem": [], "transition": [], "fusion": [], "head": [], "blocks": []}
    for name, m in model.named_modules():
        if not isinstance(m, Conv2d):
            continue
        if name.startswith("stem"):
            role = "stem"
        elif name.startswith("transitions"):
            role = "transition"
        elif ".fusion." in name:
            role = "fusion"
        elif name.startswith("head"):
            role = "head"
        else:
            role = "blocks"
        groups[role].append((name, m.spec.mode))
    return groups


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------

MAGIC = b"BIHR"
VERSION = 1
_KIND_FLOAT, _KIND_PACKED, _KIND_JSON = 0, 1, 2


def _binary_weight_names(model: Module) -> set[str]:
    return {f"{name}.weight" for name, m in model.named_modules() if isinstance(m, Conv2d) and m.binary}


def _encode_record(idx: int, kind: int, arr: np.ndarray | None, alpha=None, blob: bytes = b"") -> bytes:
    buf = io.BytesIO()
    if kind == _KIND_JSON:
        buf.write(struct.pack("<IBB", idx, kind, 0))
        buf.write(struct.pack("<I", len(blob)))
        buf.write(blob)
        return buf.getvalue()
    buf.write(struct.pack("<IBB", idx, kind, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    if kind == _KIND_FLOAT:
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    else:
        bits = pack(arr.reshape(-1))
        buf.write(struct.pack("<I", bits.words.shape[-1]))
        buf.write(bits.words.astype("<u8").tobytes())
        buf.write(np.asarray(alpha, dtype="<f4").tobytes())
    return buf.getvalue()


def encode_model(model: BinaryPoseNet, train_state: dict | None = None) -> tuple[bytes, dict[str, int]]:
    """Serialize ``model``; returns the file bytes and per-record byte sizes."""
    binary_names = _binary_weight_names(model)
    convs = {f"{name}.weight": m for name, m in model.named_modules() if isinstance(m, Conv2d)}
    state = model.state_dict()
    names = list(state)
    if train_state is not None:
        names.append("__train_state__")
    config_blob = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    names_blob = json.dumps(names).encode()
    records = []
    sizes: dict[str, int] = {}
    for idx, name in enumerate(names):
        if name == "__train_state__":
            rec = _encode_record(idx, _KIND_JSON, None, blob=json.dumps(train_state, sort_keys=True).encode())
        elif name in binary_names:
            rec = _encode_record(idx, _KIND_PACKED, state[name], alpha=convs[name].scale_factors())
        else:
            rec = _encode_record(idx, _KIND_FLOAT, state[name])
        sizes[name] = len(rec)
        records.append(rec)
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<H", VERSION))
    out.write(struct.pack("<I", len(config_blob)))
    out.write(config_blob)
    out.write(struct.pack("<I", len(names_blob)))
    out.write(names_blob)
    out.write(struct.pack("<I", len(records)))
    for rec in records:
        out.write(rec)
    body = out.getvalue()
    return body + struct.pack("<I", zlib.crc32(body)), sizes


def atomic_write(path, data: bytes):
    """Write via a temp file in the target directory, then rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(model: BinaryPoseNet, path, train_state: dict | None = None) -> dict[str, int]:
    data, sizes = encode_model(model, train_state)
    atomic_write(path, data)
    return sizes


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CorruptionError("model file is truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_model(data: bytes) -> tuple[BinaryPoseNet, dict | None]:
    if len(data) < 6 or data[:4] != MAGIC:
        raise FormatError("not a BIHR model file (bad magic)")
    (version,) = struct.unpack("<H", data[4:6])
    if version != VERSION:
        raise FormatError(f"unsupported model file version {version}")
    if len(data) < 10:
        raise CorruptionError("model file is truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptionError("checksum mismatch: file is truncated or corrupted")
    r = _Reader(body)
    r.take(6)
    (clen,) = r.unpack("<I")
    try:
        config = NetworkConfig.from_dict(json.loads(r.take(clen)))
        (nlen,) = r.unpack("<I")
        names = json.loads(r.take(nlen))
    except (ValueError, TypeError) as exc:
        raise CorruptionError(f"unreadable header: {exc}") from exc
    (n_records,) = r.unpack("<I")
    state: dict[str, np.ndarray] = {}
    alphas: dict[str, np.ndarray] = {}
    train_state = None
    for _ in range(n_records):
        idx, kind, ndim = r.unpack("<IBB")
        if idx >= len(names):
            raise CorruptionError(f"record index {idx} out of range")
        name = names[idx]
        if kind == _KIND_JSON:
            (blen,) = r.unpack("<I")
            train_state = json.loads(r.take(blen))
            continue
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape))
        if kind == _KIND_FLOAT:
            state[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        elif kind == _KIND_PACKED:
            (n_words,) = r.unpack("<I")
            words = np.frombuffer(r.take(8 * n_words), dtype="<u8").astype(np.uint64)
            from .bitpack import BitTensor

            bits = BitTensor((size,), words, n_words * 64 - size)
            state[name] = unpack(bits).reshape(shape)
            alphas[name] = np.frombuffer(r.take(4 * shape[0]), dtype="<f4").astype(np.float32)
        else:
            raise CorruptionError(f"unknown record kind {kind}")
    if r.pos != len(body):
        raise CorruptionError("trailing bytes after the last record")
    model = BinaryPoseNet(config)
    expected = set(model.state_dict())
    if expected != set(state):
        raise CorruptionError("record names do not match the configured network")
    model.load_state_dict(state)
    for name, m in model.named_modules():
        key = f"{name}.weight"
        if isinstance(m, Conv2d) and key in alphas:
            m.alpha_override = alphas[key]
    return model, train_state


def load(path) -> BinaryPoseNet:
    with open(path, "rb") as f:
        model, _ = decode_model(f.read())
    return model


def load_checkpoint(path) -> tuple[BinaryPoseNet, dict | None]:
    with open(path, "rb") as f:
        return decode_model(f.read())
