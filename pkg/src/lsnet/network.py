"""Network architecture: spec validation, parameter init, forward/backward
orchestration through the residual and concatenation skips, and checkpoint
serialization.

The encoder runs one conv block per resolution level with a residual
identity skip, joined by 3x3 stride-2 downsampling convs that change the
channel count.  The decoder mirrors it with 2x2 stride-2 transposed convs,
concatenation of the same-level encoder output, and a conv block whose
residual identity is the up-conv output.  Every conv except the final
classifier is followed by batch norm and PReLU.
"""

import io
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import ops
from .errors import ConfigError, FormatError, ShapeError, UsageError

CHECKPOINT_MAGIC = b"LSNET1"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {0: np.float32, 1: np.float64, 2: np.uint8}
_CODE_FOR_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1,
                   np.dtype(np.uint8): 2}

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
PRELU_INIT = 0.25


@dataclass
class NetSpec:
    """Declarative architecture description."""

    in_slices: int = 5
    num_classes: int = 3
    level_channels: tuple = (64, 128, 256, 512, 512)
    encoder_convs: tuple = (2, 2, 3, 3, 3)
    decoder_convs: tuple = (3, 3, 2, 2)
    strided_downsample: bool = True
    crop_train: int = 320

    def __post_init__(self):
        self.level_channels = tuple(int(c) for c in self.level_channels)
        self.encoder_convs = tuple(int(c) for c in self.encoder_convs)
        self.decoder_convs = tuple(int(c) for c in self.decoder_convs)
        validate_spec(self)

    @property
    def levels(self):
        return len(self.level_channels)

    @property
    def stride_total(self):
        return 1 << (self.levels - 1)


def validate_spec(spec):
    problems = []
    if spec.levels < 2:
        problems.append("need at least 2 resolution levels")
    if len(spec.encoder_convs) != spec.levels:
        problems.append(
            f"encoder_convs has {len(spec.encoder_convs)} entries for "
            f"{spec.levels} levels")
    if len(spec.decoder_convs) != spec.levels - 1:
        problems.append(
            f"decoder_convs has {len(spec.decoder_convs)} entries, "
            f"expected levels-1 = {spec.levels - 1}")
    if any(c < 1 for c in spec.level_channels):
        problems.append("level channel counts must be >= 1")
    if any(c < 1 for c in spec.encoder_convs) or any(c < 1 for c in spec.decoder_convs):
        problems.append("per-level conv counts must be >= 1")
    if spec.in_slices < 1 or spec.in_slices % 2 == 0:
        problems.append(f"in_slices must be odd and >= 1, got {spec.in_slices}")
    if spec.num_classes not in (2, 3):
        problems.append(f"num_classes must be 2 or 3, got {spec.num_classes}")
    if not spec.strided_downsample:
        problems.append("only strided-conv downsampling is implemented")
    if spec.crop_train % spec.stride_total != 0:
        problems.append(
            f"crop_train {spec.crop_train} not divisible by {spec.stride_total}")
    if problems:
        raise ConfigError("invalid network spec: " + "; ".join(problems))


def weighted_layer_count(spec):
    """Number of parameterized conv-type layers (convs, down/up convs,
    classifier)."""
    return (sum(spec.encoder_convs) + (spec.levels - 1)
            + sum(spec.decoder_convs) + (spec.levels - 1) + 1)


def _layer_plan(spec):
    """Conv-type layers in execution order: (kind, name, c_in, c_out, stride).

    kind is 'conv' (conv+bn+prelu), 'tconv' (up-conv+bn+prelu) or 'head'
    (bare conv producing logits).
    """
    ch = spec.level_channels
    plan = []
    for i in range(spec.encoder_convs[0]):
        cin = spec.in_slices if i == 0 else ch[0]
        plan.append(("conv", f"enc0.c{i}", cin, ch[0], 1))
    for l in range(1, spec.levels):
        plan.append(("conv", f"down{l}", ch[l - 1], ch[l], 2))
        for i in range(spec.encoder_convs[l]):
            plan.append(("conv", f"enc{l}.c{i}", ch[l], ch[l], 1))
    for l in range(spec.levels - 2, -1, -1):
        plan.append(("tconv", f"up{l}", ch[l + 1], ch[l], 2))
        for i in range(spec.decoder_convs[l]):
            cin = 2 * ch[l] if i == 0 else ch[l]
            plan.append(("conv", f"dec{l}.c{i}", cin, ch[l], 1))
    plan.append(("head", "head", ch[0], spec.num_classes, 1))
    return plan


@dataclass
class Network:
    spec: NetSpec
    params: dict = field(default_factory=dict)
    bn_stats: dict = field(default_factory=dict)
    dtype: np.dtype = np.float32


def build_network(spec, seed, dtype=np.float32):
    """He-initialized network (PReLU gain, biases zero), deterministic in
    the seed."""
    rng = np.random.default_rng(seed)
    net = Network(spec=spec, dtype=np.dtype(dtype))
    gain = 2.0 / (1.0 + PRELU_INIT ** 2)
    for kind, name, cin, cout, _stride in _layer_plan(spec):
        if kind == "tconv":
            wshape = (cin, cout, 2, 2)
            fan_in = cin  # each output pixel sees ci inputs at stride==kernel
        else:
            wshape = (cout, cin, 3, 3)
            fan_in = cin * 9
        std = np.sqrt(gain / fan_in)
        w = rng.normal(0.0, std, size=wshape).astype(dtype)
        net.params[name + ".w"] = ops.Param(w)
        net.params[name + ".b"] = ops.Param(np.zeros(cout, dtype=dtype))
        if kind != "head":
            net.params[name + ".bn.g"] = ops.Param(np.ones(cout, dtype=dtype))
            net.params[name + ".bn.b"] = ops.Param(np.zeros(cout, dtype=dtype))
            net.params[name + ".act.a"] = ops.Param(
                np.full(cout, PRELU_INIT, dtype=dtype))
            net.bn_stats[name + ".bn"] = ops.RunningStats(
                mean=np.zeros(cout, dtype=dtype), var=np.ones(cout, dtype=dtype))
    return net


class _EvalExec:
    """Runs the architecture without recording anything."""

    mode = "eval"

    def __init__(self, net):
        self.net = net

    def conv(self, x, name, stride):
        p = self.net.params
        return ops.conv2d_forward(x, p[name + ".w"].value, p[name + ".b"].value,
                                  stride=stride, pad=1)

    def tconv(self, x, name):
        p = self.net.params
        return ops.transposed_conv2d_forward(x, p[name + ".w"].value,
                                             p[name + ".b"].value)

    def bn(self, x, name):
        out, _ = ops.batchnorm_forward(
            x, self.net.params[name + ".bn.g"].value,
            self.net.params[name + ".bn.b"].value,
            self.net.bn_stats[name + ".bn"], self.mode,
            momentum=BN_MOMENTUM, eps=BN_EPS)
        return out

    def prelu(self, x, name):
        return ops.prelu_forward(x, self.net.params[name + ".act.a"].value)

    def add(self, a, b):
        return ops.add_elementwise(a, b)

    def concat(self, a, b):
        return ops.concat_channels(a, b)


class ActivationCache:
    """Reverse-mode tape recorded by a train-mode forward pass.

    Holds, per op, the ids of input/output values and a closure computing
    input gradients (parameter gradients accumulate directly into Param.grad).
    Consumed exactly once by :func:`backward`.
    """

    def __init__(self, net):
        self.net = net
        self.values = []
        self.nodes = []  # (out_vid, in_vids, bwd(gout) -> grads per in_vid)
        self.consumed = False
        self.out_vid = None

    def _new(self, arr):
        self.values.append(arr)
        return len(self.values) - 1


class _TrainExec(_EvalExec):
    mode = "train"

    def __init__(self, net):
        super().__init__(net)
        self.tape = ActivationCache(net)

    def source(self, x):
        return self.tape._new(x)

    def value(self, vid):
        return self.tape.values[vid]

    def _record(self, out, in_vids, bwd):
        vid = self.tape._new(out)
        self.tape.nodes.append((vid, in_vids, bwd))
        return vid

    def conv(self, xv, name, stride):
        p = self.net.params
        x = self.value(xv)
        wp, bp = p[name + ".w"], p[name + ".b"]
        out = ops.conv2d_forward(x, wp.value, bp.value, stride=stride, pad=1)
        cache = ops.ConvCache(x=x, weight=wp.value, stride=stride, pad=1)

        def bwd(gout):
            gx, gw, gb = ops.conv2d_backward(cache, gout)
            wp.grad += gw
            bp.grad += gb
            return (gx,)

        return self._record(out, (xv,), bwd)

    def tconv(self, xv, name):
        p = self.net.params
        x = self.value(xv)
        wp, bp = p[name + ".w"], p[name + ".b"]
        out = ops.transposed_conv2d_forward(x, wp.value, bp.value)
        cache = ops.TConvCache(x=x, weight=wp.value)

        def bwd(gout):
            gx, gw, gb = ops.transposed_conv2d_backward(cache, gout)
            wp.grad += gw
            bp.grad += gb
            return (gx,)

        return self._record(out, (xv,), bwd)

    def bn(self, xv, name):
        p = self.net.params
        gp, bp = p[name + ".bn.g"], p[name + ".bn.b"]
        out, cache = ops.batchnorm_forward(
            self.value(xv), gp.value, bp.value, self.net.bn_stats[name + ".bn"],
            "train", momentum=BN_MOMENTUM, eps=BN_EPS)

        def bwd(gout):
            gx, gg, gb = ops.batchnorm_backward(cache, gout)
            gp.grad += gg
            bp.grad += gb
            return (gx,)

        return self._record(out, (xv,), bwd)

    def prelu(self, xv, name):
        ap = self.net.params[name + ".act.a"]
        x = self.value(xv)
        out = ops.prelu_forward(x, ap.value)
        cache = ops.PreluCache(x=x, slope=ap.value)

        def bwd(gout):
            gx, ga = ops.prelu_backward(cache, gout)
            ap.grad += ga
            return (gx,)

        return self._record(out, (xv,), bwd)

    def add(self, av, bv):
        out = ops.add_elementwise(self.value(av), self.value(bv))
        return self._record(out, (av, bv), lambda gout: (gout, gout))

    def concat(self, av, bv):
        a, b = self.value(av), self.value(bv)
        ca = a.shape[1]
        out = ops.concat_channels(a, b)
        return self._record(
            out, (av, bv),
            lambda gout: (gout[:, :ca], gout[:, ca:]))


def _run_architecture(ex, spec, x):
    """Single source of truth for the layer graph; ex is a train or eval
    executor (train passes value ids, eval passes arrays)."""

    def block(v, prefix, count, start=0):
        for i in range(start, count):
            v = ex.conv(v, f"{prefix}.c{i}", 1)
            v = ex.bn(v, f"{prefix}.c{i}")
            v = ex.prelu(v, f"{prefix}.c{i}")
        return v

    skips = []
    v = ex.conv(x, "enc0.c0", 1)
    v = ex.bn(v, "enc0.c0")
    v = ex.prelu(v, "enc0.c0")
    if spec.encoder_convs[0] > 1:
        res = v
        v = block(v, "enc0", spec.encoder_convs[0], start=1)
        v = ex.add(v, res)
    skips.append(v)
    for l in range(1, spec.levels):
        v = ex.conv(v, f"down{l}", 2)
        v = ex.bn(v, f"down{l}")
        v = ex.prelu(v, f"down{l}")
        res = v
        v = block(v, f"enc{l}", spec.encoder_convs[l])
        v = ex.add(v, res)
        if l < spec.levels - 1:
            skips.append(v)
    for l in range(spec.levels - 2, -1, -1):
        u = ex.tconv(v, f"up{l}")
        u = ex.bn(u, f"up{l}")
        u = ex.prelu(u, f"up{l}")
        v = ex.concat(u, skips[l])
        v = block(v, f"dec{l}", spec.decoder_convs[l])
        v = ex.add(v, u)
    return ex.conv(v, "head", 1)


def forward(net, x, mode="eval"):
    """Run the network; logits keep the input's spatial dims.

    Returns (logits, cache); cache is None in eval mode and is the tape
    consumed by :func:`backward` in train mode.
    """
    if mode not in ("train", "eval"):
        raise UsageError(f"mode must be 'train' or 'eval', got {mode!r}")
    if x.ndim != 4 or x.shape[1] != net.spec.in_slices:
        raise ShapeError(
            f"input must be (n,{net.spec.in_slices},h,w), got {x.shape}")
    div = net.spec.stride_total
    h, w = x.shape[2], x.shape[3]
    if h % div or w % div:
        sug_h = max(div, int(round(h / div)) * div)
        sug_w = max(div, int(round(w / div)) * div)
        raise ShapeError(
            f"spatial dims ({h},{w}) must be divisible by {div}; "
            f"nearest valid size is ({sug_h},{sug_w})")
    x = np.ascontiguousarray(x, dtype=net.dtype)
    if mode == "eval":
        return _run_architecture(_EvalExec(net), net.spec, x), None
    ex = _TrainExec(net)
    out_vid = _run_architecture(ex, net.spec, ex.source(x))
    ex.tape.out_vid = out_vid
    return ex.value(out_vid), ex.tape


def backward(net, cache, grad_logits):
    """Chain rule over the recorded tape; fills every Param.grad.

    Residual adds route the gradient to both inputs; concats split it by
    channel range.  Returns the gradient with respect to the network input.
    """
    if cache is None or not isinstance(cache, ActivationCache):
        raise UsageError("backward needs the cache from a train-mode forward")
    if cache.net is not net:
        raise UsageError("cache belongs to a different network")
    if cache.consumed:
        raise UsageError("stale cache: backward was already run on it")
    out = cache.values[cache.out_vid]
    if grad_logits.shape != out.shape:
        raise ShapeError(
            f"grad_logits {grad_logits.shape} does not match logits {out.shape}")
    cache.consumed = True
    grads = {cache.out_vid: np.ascontiguousarray(grad_logits, dtype=net.dtype)}
    for out_vid, in_vids, bwd in reversed(cache.nodes):
        g = grads.pop(out_vid, None)
        if g is None:
            continue
        for vid, gin in zip(in_vids, bwd(g)):
            if vid in grads:
                grads[vid] = grads[vid] + gin
            else:
                grads[vid] = gin
    return grads.get(0)


def zero_grads(net):
    for p in net.params.values():
        p.grad[...] = 0


# ---------------------------------------------------------------------------
# checkpoint serialization

def _write_tensor(buf, name, arr):
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    code = _CODE_FOR_DTYPE[arr.dtype]
    buf.write(struct.pack("<BB", code, arr.ndim))
    for d in arr.shape:
        buf.write(struct.pack("<I", d))
    buf.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def save_checkpoint(net, path):
    """Binary checkpoint: magic, version, tensor count, then named tensors.

    The first entry is a metadata blob holding the architecture spec and
    batch-norm batch counters; parameter values and running stats follow
    in build order.  Round-trips are bit-exact.
    """
    meta = {
        "spec": asdict(net.spec),
        "dtype": str(np.dtype(net.dtype)),
        "bn_batches": {k: v.batches for k, v in sorted(net.bn_stats.items())},
    }
    blob = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    tensors = [("__meta__", blob)]
    for name in sorted(net.params):
        tensors.append((name, net.params[name].value))
    for name in sorted(net.bn_stats):
        tensors.append((name + ".mean", net.bn_stats[name].mean))
        tensors.append((name + ".var", net.bn_stats[name].var))

    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        _write_tensor(buf, name, arr)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated checkpoint while reading {what}",
                              offset=self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u16(self, what):
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what):
        return self.take(1, what)[0]


def load_checkpoint(path):
    """Parse and validate a checkpoint; returns a fully populated Network."""
    with open(path, "rb") as f:
        data = f.read()
    try:
        return _parse_checkpoint(data)
    except FormatError as e:
        wrapped = FormatError(f"{path}: {e}")
        wrapped.offset = e.offset
        raise wrapped from e


def _parse_checkpoint(data):
    r = _Reader(data)
    magic = r.take(len(CHECKPOINT_MAGIC), "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}",
                          offset=0)
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=6)
    count = r.u32("tensor count")
    tensors = {}
    order = []
    for _ in range(count):
        nlen = r.u16("name length")
        name = r.take(nlen, "name").decode("utf-8")
        code = r.u8("dtype code")
        if code not in _DTYPE_CODES:
            raise FormatError(f"unknown dtype code {code} for tensor {name!r}",
                              offset=r.pos - 1)
        ndim = r.u8("ndim")
        dims = tuple(r.u32(f"dim {i} of {name!r}") for i in range(ndim))
        dtype = np.dtype(_DTYPE_CODES[code])
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        raw = r.take(nbytes, f"data of {name!r}")
        arr = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(
            dtype).reshape(dims)
        tensors[name] = arr
        order.append(name)
    if r.pos != len(data):
        raise FormatError(
            f"{len(data) - r.pos} trailing bytes after last tensor", offset=r.pos)
    if not order or order[0] != "__meta__":
        raise FormatError("checkpoint missing leading metadata blob", offset=14)

    try:
        meta = json.loads(tensors["__meta__"].tobytes().decode("utf-8"))
        spec = NetSpec(**meta["spec"])
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"bad checkpoint metadata: {e}") from e

    dtype = np.dtype(meta.get("dtype", "float32"))
    net = Network(spec=spec, dtype=dtype)
    expected = set()
    for kind, name, _cin, cout, _stride in _layer_plan(spec):
        expected.add(name + ".w")
        expected.add(name + ".b")
        if kind != "head":
            expected.update({name + ".bn.g", name + ".bn.b", name + ".act.a",
                             name + ".bn.mean", name + ".bn.var"})
    present = set(tensors) - {"__meta__"}
    if present != expected:
        missing = sorted(expected - present)[:3]
        extra = sorted(present - expected)[:3]
        raise FormatError(
            f"checkpoint tensors do not match spec (missing {missing}, "
            f"unexpected {extra})")
    for name in sorted(present):
        if name.endswith(".bn.mean"):
            continue
        if name.endswith(".bn.var"):
            base = name[:-4]
            net.bn_stats[base] = ops.RunningStats(
                mean=tensors[base + ".mean"].copy(),
                var=tensors[base + ".var"].copy(),
                batches=int(meta["bn_batches"].get(base, 0)))
        else:
            net.params[name] = ops.Param(tensors[name].copy())
    return net
