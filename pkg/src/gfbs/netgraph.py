"""Network description, construction, forward pass, and persistence.

A network is a straight-line list of blocks read from a small text
format, one block per line:

    # comment
    name tinyvgg            (optional)
    input 3 32 32           (channels, height, width; required, first)
    conv_bn_relu 16 3 1 1   (out_channels kernel stride padding)
    conv_bn 16 3 1 1        (same, but no ReLU after the norm)
    conv 1 3 1 1            (plain convolution, no norm)
    residual_begin          (push the running stream)
    residual_add            (pop and add elementwise)
    pool 0 2 2 0            (max pool; channel and padding columns fixed 0)
    flatten
    linear 10               (out features)

Blocks after ``flatten`` must all be ``linear``. Residual begin/add pairs
nest like parentheses and both streams must agree in shape at the join.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .autograd import (
    ConvParams,
    LinearParams,
    ParamSet,
    Tape,
    Tensor,
    add,
    batchnorm,
    conv2d,
    flatten,
    linear,
    maxpool2d,
    relu,
)
from .errors import ConfigError, FormatError

CONV_KINDS = ("conv_bn_relu", "conv_bn", "conv")
BN_KINDS = ("conv_bn_relu", "conv_bn")
ALL_KINDS = CONV_KINDS + ("residual_begin", "residual_add", "pool", "flatten", "linear")

CKPT_MAGIC = b"GFBS"
CKPT_VERSION = 1


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    channels: int = 0  # conv kinds: out channels; linear: out features
    kernel: int = 0
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise ConfigError(f"unknown block kind {self.kind!r}")


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    in_channels: int
    in_height: int
    in_width: int
    blocks: tuple[BlockSpec, ...]

    def __post_init__(self):
        if min(self.in_channels, self.in_height, self.in_width) < 1:
            raise ConfigError("input dimensions must be positive")
        infer_shapes(self)  # raises on any structural problem

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.in_channels, self.in_height, self.in_width)


@dataclass(frozen=True, order=True)
class ChannelRef:
    """One channel of one block, addressed by block index."""

    layer: int
    channel: int


@dataclass(frozen=True)
class CouplingGroup:
    """Channels that must be pruned together (shared residual stream)."""

    group_id: int
    members: tuple[ChannelRef, ...]


def infer_shapes(spec: NetworkSpec) -> list[tuple]:
    """Per-block output shapes; validates chaining, residual pairing,
    and block ordering in one walk. Conv/pool shapes are (C, H, W),
    post-flatten shapes are (D,)."""
    shape: tuple = (spec.in_channels, spec.in_height, spec.in_width)
    shapes: list[tuple] = []
    stack: list[tuple] = []
    seen_flatten = False
    for i, b in enumerate(spec.blocks):
        if seen_flatten and b.kind != "linear":
            raise ConfigError(f"block {i}: only linear blocks may follow flatten")
        if b.kind in CONV_KINDS:
            c, h, w = shape
            if b.channels < 1 or b.kernel < 1 or b.stride < 1 or b.padding < 0:
                raise ConfigError(f"block {i}: bad conv geometry")
            ho = (h + 2 * b.padding - b.kernel) // b.stride + 1
            wo = (w + 2 * b.padding - b.kernel) // b.stride + 1
            if ho < 1 or wo < 1:
                raise ConfigError(f"block {i}: conv output collapses to {ho}x{wo}")
            shape = (b.channels, ho, wo)
        elif b.kind == "pool":
            c, h, w = shape
            if b.kernel < 1 or b.stride < 1:
                raise ConfigError(f"block {i}: bad pool geometry")
            if b.channels != 0 or b.padding != 0:
                raise ConfigError(f"block {i}: pool lines use 0 for channels and padding")
            ho = (h - b.kernel) // b.stride + 1
            wo = (w - b.kernel) // b.stride + 1
            if ho < 1 or wo < 1:
                raise ConfigError(f"block {i}: pool output collapses to {ho}x{wo}")
            shape = (c, ho, wo)
        elif b.kind == "residual_begin":
            if len(shape) != 3:
                raise ConfigError(f"block {i}: residual blocks must precede flatten")
            stack.append(shape)
        elif b.kind == "residual_add":
            if not stack:
                raise ConfigError(f"block {i}: residual_add without residual_begin")
            saved = stack.pop()
            if saved != shape:
                raise ConfigError(
                    f"block {i}: residual streams disagree, {saved} vs {shape}")
        elif b.kind == "flatten":
            if len(shape) != 3:
                raise ConfigError(f"block {i}: duplicate flatten")
            shape = (shape[0] * shape[1] * shape[2],)
            seen_flatten = True
        elif b.kind == "linear":
            if len(shape) != 1:
                raise ConfigError(f"block {i}: linear requires a flattened stream")
            if b.channels < 1:
                raise ConfigError(f"block {i}: linear needs >= 1 output features")
            shape = (b.channels,)
        shapes.append(shape)
    if stack:
        raise ConfigError("unmatched residual_begin")
    return shapes


# ---------------------------------------------------------------------------
# spec text round-trip


def parse_spec(text: str) -> NetworkSpec:
    name = "net"
    header: tuple[int, int, int] | None = None
    blocks: list[BlockSpec] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        kind, args = parts[0], parts[1:]

        def ints(n):
            if len(args) != n:
                raise FormatError(f"line {lineno}: {kind} takes {n} integer(s)")
            try:
                return [int(a) for a in args]
            except ValueError:
                raise FormatError(f"line {lineno}: non-integer argument") from None

        if kind == "name":
            if len(args) != 1 or header is not None or blocks:
                raise FormatError(f"line {lineno}: name must come first, one token")
            name = args[0]
        elif kind == "input":
            if header is not None:
                raise FormatError(f"line {lineno}: duplicate input line")
            c, h, w = ints(3)
            header = (c, h, w)
        elif kind in CONV_KINDS:
            c, k, s, p = ints(4)
            blocks.append(BlockSpec(kind, c, k, s, p))
        elif kind == "pool":
            c, k, s, p = ints(4)
            blocks.append(BlockSpec(kind, c, k, s, p))
        elif kind in ("residual_begin", "residual_add", "flatten"):
            ints(0)
            blocks.append(BlockSpec(kind))
        elif kind == "linear":
            (c,) = ints(1)
            blocks.append(BlockSpec(kind, c))
        else:
            raise FormatError(f"line {lineno}: unknown block kind {kind!r}")
    if header is None:
        raise FormatError("spec missing the input line")
    if not blocks:
        raise FormatError("spec has no blocks")
    try:
        return NetworkSpec(name, header[0], header[1], header[2], tuple(blocks))
    except ConfigError as exc:
        raise FormatError(f"invalid spec: {exc}") from exc


def format_spec(spec: NetworkSpec) -> str:
    lines = [f"name {spec.name}",
             f"input {spec.in_channels} {spec.in_height} {spec.in_width}"]
    for b in spec.blocks:
        if b.kind in CONV_KINDS or b.kind == "pool":
            lines.append(f"{b.kind} {b.channels} {b.kernel} {b.stride} {b.padding}")
        elif b.kind == "linear":
            lines.append(f"linear {b.channels}")
        else:
            lines.append(b.kind)
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# network object


class Network:
    """A spec plus one parameter container per block (None for shape ops)."""

    def __init__(self, spec: NetworkSpec, params: list):
        if len(params) != len(spec.blocks):
            raise ConfigError("one parameter entry per block required")
        self.spec = spec
        self.params = params

    @property
    def dtype(self):
        for p in self.params:
            if p is not None:
                return next(iter(p.tensors().values())).dtype
        return np.dtype(np.float32)

    def parameters(self) -> list[Tensor]:
        out = []
        for p in self.params:
            if p is not None:
                out.extend(p.learnable())
        return out

    def named_tensors(self) -> dict[str, Tensor]:
        """Stable name -> tensor map over everything worth persisting."""
        out: dict[str, Tensor] = {}
        for i, p in enumerate(self.params):
            if p is None:
                continue
            for field_name, t in p.tensors().items():
                out[f"b{i}.{field_name}"] = t
        return out

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def clone(self, dtype=None) -> "Network":
        new_params = []
        for p in self.params:
            if p is None:
                new_params.append(None)
                continue
            kw = {}
            for field_name, t in p.tensors().items():
                kw[field_name] = Tensor(t.data.copy(), dtype=dtype or t.dtype)
            if isinstance(p, ParamSet):
                kw["eps"] = p.eps
                kw["momentum"] = p.momentum
            new_params.append(type(p)(**kw))
        return Network(self.spec, new_params)

    def bn_blocks(self) -> list[int]:
        """Indices of blocks carrying batch-norm parameters."""
        return [i for i, b in enumerate(self.spec.blocks) if b.kind in BN_KINDS]

    def count_params(self) -> int:
        return sum(t.size for t in self.parameters())


def build_network(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> Network:
    """Allocate parameters for a spec: Kaiming fan-in normal conv/linear
    weights, unit gamma, zero beta and bias, fresh running statistics."""
    rng = np.random.default_rng(seed)
    shapes = infer_shapes(spec)
    params: list = []
    prev: tuple = spec.input_shape
    for i, b in enumerate(spec.blocks):
        if b.kind in CONV_KINDS:
            c_in = prev[0]
            fan_in = c_in * b.kernel * b.kernel
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                           (b.channels, c_in, b.kernel, b.kernel))
            if b.kind == "conv":
                params.append(ConvParams(
                    weight=Tensor(w, dtype=dtype),
                    bias=Tensor(np.zeros(b.channels), dtype=dtype)))
            else:
                params.append(ParamSet(
                    weight=Tensor(w, dtype=dtype),
                    bias=Tensor(np.zeros(b.channels), dtype=dtype),
                    gamma=Tensor(np.ones(b.channels), dtype=dtype),
                    beta=Tensor(np.zeros(b.channels), dtype=dtype),
                    running_mean=Tensor(np.zeros(b.channels), dtype=dtype),
                    running_var=Tensor(np.ones(b.channels), dtype=dtype)))
        elif b.kind == "linear":
            d = prev[0]
            w = rng.normal(0.0, np.sqrt(2.0 / d), (d, b.channels))
            params.append(LinearParams(
                weight=Tensor(w, dtype=dtype),
                bias=Tensor(np.zeros(b.channels), dtype=dtype)))
        else:
            params.append(None)
        prev = shapes[i]
    return Network(spec, params)


def forward_full(net: Network, batch: Tensor, mode: str, tape: Tape | None = None,
                 trace: dict | None = None, update_stats: bool = True) -> Tensor:
    """Run the whole network. ``trace``, when given, collects per-block
    intermediate tensors: pre-norm conv outputs under "pre_bn" and block
    outputs under "out" (so their ``grad`` fields can be inspected after
    a backward pass)."""
    if batch.data.ndim != 4 or batch.shape[1:] != net.spec.input_shape:
        raise ConfigError(
            f"batch shape {batch.shape} does not match input {net.spec.input_shape}")
    x = batch
    stack: list[Tensor] = []
    for i, b in enumerate(net.spec.blocks):
        p = net.params[i]
        if b.kind in CONV_KINDS:
            pre = conv2d(x, p, stride=b.stride, padding=b.padding, tape=tape)
            if b.kind == "conv":
                x = pre
            else:
                x = batchnorm(pre, p, mode, tape=tape, update_stats=update_stats)
                if b.kind == "conv_bn_relu":
                    x = relu(x, tape=tape)
            if trace is not None:
                trace[i] = {"pre_bn": pre, "out": x}
        elif b.kind == "pool":
            x = maxpool2d(x, b.kernel, b.stride, tape=tape)
        elif b.kind == "residual_begin":
            stack.append(x)
        elif b.kind == "residual_add":
            x = add(stack.pop(), x, tape=tape)
            if trace is not None:
                trace[i] = {"out": x}
        elif b.kind == "flatten":
            x = flatten(x, tape=tape)
        elif b.kind == "linear":
            x = linear(x, p.weight, p.bias, tape=tape)
    return x


# ---------------------------------------------------------------------------
# FLOPs accounting


@dataclass(frozen=True)
class FlopsEntry:
    block: int
    kind: str
    flops: int
    detail: str


@dataclass(frozen=True)
class FlopsReport:
    entries: tuple[FlopsEntry, ...]
    total: int
    conv_total: int

    def ratio_vs(self, baseline: "FlopsReport") -> float:
        if baseline.total == 0:
            raise ConfigError("baseline FLOPs count is zero")
        return self.total / baseline.total


def count_flops(spec: NetworkSpec) -> FlopsReport:
    """Per-sample FLOPs under a fixed convention: one multiply-add is 2
    FLOPs and bias adds are counted. Per block: conv = 2*H'*W'*C_out*k^2*C_in
    + H'*W'*C_out, linear = 2*D*K + K, batch norm = 2 per element, ReLU = 1
    per element, pool = k^2 per output element, residual add = 1 per
    element, flatten free."""
    shapes = infer_shapes(spec)
    entries: list[FlopsEntry] = []
    conv_total = 0
    prev: tuple = spec.input_shape
    for i, b in enumerate(spec.blocks):
        out = shapes[i]
        if b.kind in CONV_KINDS:
            c_in = prev[0]
            c, ho, wo = out
            conv = 2 * ho * wo * c * b.kernel * b.kernel * c_in + ho * wo * c
            conv_total += conv
            f = conv
            elems = c * ho * wo
            if b.kind in BN_KINDS:
                f += 2 * elems
            if b.kind == "conv_bn_relu":
                f += elems
            entries.append(FlopsEntry(i, b.kind, f,
                                      f"{c_in}->{c} k{b.kernel} @{ho}x{wo}"))
        elif b.kind == "pool":
            c, ho, wo = out
            f = b.kernel * b.kernel * c * ho * wo
            entries.append(FlopsEntry(i, b.kind, f, f"k{b.kernel} @{ho}x{wo}"))
        elif b.kind == "residual_add":
            c, h, w = out
            entries.append(FlopsEntry(i, b.kind, c * h * w, f"@{h}x{w}"))
        elif b.kind == "linear":
            d = prev[0]
            k = out[0]
            entries.append(FlopsEntry(i, b.kind, 2 * d * k + k, f"{d}->{k}"))
        else:
            entries.append(FlopsEntry(i, b.kind, 0, ""))
        prev = out
    total = sum(e.flops for e in entries)
    return FlopsReport(tuple(entries), total, conv_total)


# ---------------------------------------------------------------------------
# coupling groups


class _UnionFind:
    def __init__(self):
        self.parent: dict = {}

    def find(self, x):
        self.parent.setdefault(x, x)
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


def build_coupling_groups(spec: NetworkSpec) -> list[CouplingGroup]:
    """Partition prunable channels into atomic groups.

    Channels flowing into a residual add share one stream position and
    must live or die together. Keys track producers: the network input
    and plain-conv outputs cannot be pruned, so any group containing one
    is dropped from the result. Group ids are assigned in order of each
    group's smallest member.
    """
    uf = _UnionFind()
    sources: list = [("in", c) for c in range(spec.in_channels)]
    stack: list[list] = []
    for i, b in enumerate(spec.blocks):
        if b.kind in CONV_KINDS:
            tag = "conv" if b.kind == "conv" else "bn"
            sources = [(tag, i, c) for c in range(b.channels)]
        elif b.kind == "residual_begin":
            stack.append(list(sources))
        elif b.kind == "residual_add":
            saved = stack.pop()
            for a_key, b_key in zip(saved, sources):
                uf.union(a_key, b_key)
        elif b.kind in ("flatten", "linear"):
            break
        # pool keeps channel identity
    all_keys = set(uf.parent)
    for i, b in enumerate(spec.blocks):
        if b.kind in CONV_KINDS:
            tag = "conv" if b.kind == "conv" else "bn"
            all_keys.update((tag, i, c) for c in range(b.channels))
    members: dict = {}
    for key in all_keys:
        members.setdefault(uf.find(key), set()).add(key)

    groups: list[tuple[ChannelRef, ...]] = []
    for group_keys in members.values():
        if any(k[0] != "bn" for k in group_keys):
            continue  # contains the input or a plain-conv channel
        refs = tuple(sorted(ChannelRef(k[1], k[2]) for k in group_keys))
        groups.append(refs)
    groups.sort(key=lambda refs: refs[0])
    return [CouplingGroup(gid, refs) for gid, refs in enumerate(groups)]


def group_lookup(groups: list[CouplingGroup]) -> dict[ChannelRef, int]:
    table: dict[ChannelRef, int] = {}
    for g in groups:
        for ref in g.members:
            table[ref] = g.group_id
    return table


# ---------------------------------------------------------------------------
# checkpoint persistence


_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def save_checkpoint(net: Network, path) -> None:
    spec_bytes = format_spec(net.spec).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    buf.write(struct.pack("<I", len(spec_bytes)))
    buf.write(spec_bytes)
    for name, t in net.named_tensors().items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", _DTYPE_TAGS[t.data.dtype], t.data.ndim))
        for d in t.shape:
            buf.write(struct.pack("<I", d))
        data = t.data
        if data.dtype.byteorder == ">":
            data = data.astype(data.dtype.newbyteorder("<"))
        buf.write(np.ascontiguousarray(data).tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path) -> Network:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != CKPT_MAGIC:
            raise FormatError("bad checkpoint magic")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (spec_len,) = struct.unpack("<I", _read_exact(fh, 4, "spec length"))
        try:
            spec_text = _read_exact(fh, spec_len, "spec text").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("checkpoint spec text is not valid UTF-8") from exc
        spec = parse_spec(spec_text)
        loaded: dict[str, np.ndarray] = {}
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise FormatError("truncated checkpoint while reading record header")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            tag, ndim = struct.unpack("<BB", _read_exact(fh, 2, "dtype/ndim"))
            if tag not in _TAG_DTYPES:
                raise FormatError(f"unknown dtype tag {tag} for {name}")
            dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "dims"))
            dtype = _TAG_DTYPES[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            raw = _read_exact(fh, nbytes, f"data of {name}")
            loaded[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()

    net = build_network(spec, seed=0)
    expected = net.named_tensors()
    if set(loaded) != set(expected):
        missing = sorted(set(expected) - set(loaded))
        extra = sorted(set(loaded) - set(expected))
        raise FormatError(f"checkpoint tensor set mismatch: missing {missing}, extra {extra}")
    for name, arr in loaded.items():
        if arr.shape != expected[name].shape:
            raise FormatError(
                f"checkpoint shape mismatch for {name}: "
                f"{arr.shape} vs spec {expected[name].shape}")
        expected[name].data = np.ascontiguousarray(arr)
    return net
