"""Two-level nested U network: residual U-blocks (RSU) composed into a
six-stage encoder / five-stage decoder with six side outputs and a fused map.

Parameters live in a flat, ordered ``ParamStore`` keyed by hierarchical names
such as ``enc3.e2.conv.w`` or ``dec1.d1.bn.gamma``; the network itself is a set
of pure functions over that store.
"""
import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ValidationError
from .tensor import (Tensor, batchnorm2d, concat_channels, conv2d, maxpool2d,
                     relu, sigmoid, upsample2d)

N_ENCODER = 6
N_DECODER = 5


def parse_height(h):
    """'4F' -> (4, True); '5' or 5 -> (5, False)."""
    s = str(h).strip().upper()
    dilated = s.endswith("F")
    try:
        n = int(s[:-1] if dilated else s)
    except ValueError:
        raise ValidationError(f"bad RSU height {h!r}", field="heights") from None
    if n < 2:
        raise ValidationError(f"RSU height must be >= 2, got {h!r}", field="heights")
    return n, dilated


@dataclass(frozen=True)
class RSUSpec:
    height: int
    in_ch: int
    mid_ch: int
    out_ch: int
    dilated: bool = False

    @property
    def min_extent(self):
        return 1 if self.dilated else 2 ** (self.height - 1)


def _scaled(c, factor):
    return max(1, int(round(c * factor)))


@dataclass(frozen=True)
class U2NetSpec:
    """Architecture description.

    Decoder tuples run deep to shallow (stage 5 first, stage 1 last), which is
    also execution order. Channel widths are base values multiplied by
    ``width_factor``.
    """
    encoder_heights: tuple = ("7", "6", "5", "4", "4F", "4F")
    decoder_heights: tuple = ("4F", "4", "5", "6", "7")
    encoder_mid: tuple = (32, 32, 64, 128, 256, 256)
    encoder_out: tuple = (64, 128, 256, 512, 512, 512)
    decoder_mid: tuple = (256, 128, 64, 32, 16)
    decoder_out: tuple = (512, 256, 128, 64, 64)
    input_channels: int = 2
    side_channels: int = 1
    width_factor: float = 1.0

    def __post_init__(self):
        for name, n in (("encoder_heights", N_ENCODER), ("encoder_mid", N_ENCODER),
                        ("encoder_out", N_ENCODER), ("decoder_heights", N_DECODER),
                        ("decoder_mid", N_DECODER), ("decoder_out", N_DECODER)):
            val = tuple(getattr(self, name))
            object.__setattr__(self, name, val)
            if len(val) != n:
                raise ValidationError(f"{name} needs {n} entries, got {len(val)}", field=name)
        object.__setattr__(self, "encoder_heights", tuple(str(h).upper() for h in self.encoder_heights))
        object.__setattr__(self, "decoder_heights", tuple(str(h).upper() for h in self.decoder_heights))
        for h in self.encoder_heights + self.decoder_heights:
            parse_height(h)
        if self.input_channels < 1:
            raise ValidationError("input_channels must be >= 1", field="input_channels")
        if self.side_channels < 1:
            raise ValidationError("side_channels must be >= 1", field="side_channels")
        if not self.width_factor > 0:
            raise ValidationError("width_factor must be positive", field="width_factor")

    @classmethod
    def full(cls, **kw):
        return cls(**kw)

    @classmethod
    def lite(cls, **kw):
        base = dict(encoder_mid=(16,) * 6, encoder_out=(64,) * 6,
                    decoder_mid=(16,) * 5, decoder_out=(64,) * 5)
        base.update(kw)
        return cls(**base)

    @classmethod
    def toy(cls, **kw):
        base = dict(encoder_heights=("3", "3", "2", "2", "2F", "2F"),
                    decoder_heights=("2F", "2", "2", "3", "3"),
                    width_factor=0.25)
        base.update(kw)
        return cls.lite(**base)

    @classmethod
    def preset(cls, name, **kw):
        try:
            return {"full": cls.full, "lite": cls.lite, "toy": cls.toy}[name](**kw)
        except KeyError:
            raise ValidationError(f"unknown preset {name!r}", field="preset") from None

    @property
    def encoder_specs(self):
        specs, cin = [], self.input_channels
        for h, mid, out in zip(self.encoder_heights, self.encoder_mid, self.encoder_out):
            height, dil = parse_height(h)
            rsu = RSUSpec(height, cin, _scaled(mid, self.width_factor), _scaled(out, self.width_factor), dil)
            specs.append(rsu)
            cin = rsu.out_ch
        return tuple(specs)

    @property
    def decoder_specs(self):
        """Deep to shallow: entry 0 is decoder stage 5."""
        enc = self.encoder_specs
        specs, deeper = [], enc[-1].out_ch
        for i, (h, mid, out) in enumerate(zip(self.decoder_heights, self.decoder_mid, self.decoder_out)):
            stage = N_DECODER - i
            height, dil = parse_height(h)
            rsu = RSUSpec(height, enc[stage - 1].out_ch + deeper,
                          _scaled(mid, self.width_factor), _scaled(out, self.width_factor), dil)
            specs.append(rsu)
            deeper = rsu.out_ch
        return tuple(specs)

    def side_in_channels(self):
        """Channels feeding side outputs 1..6."""
        dec = self.decoder_specs[::-1]
        return [d.out_ch for d in dec] + [self.encoder_specs[-1].out_ch]

    def min_extent(self):
        """Smallest legal input H (and W) for this spec."""
        need = 1
        for k, rsu in enumerate(self.encoder_specs, start=1):
            m = rsu.min_extent
            if k < N_ENCODER:
                m = max(m, 2)  # pooled on the way to the next stage
            need = max(need, m * 2 ** (k - 1))
        return need

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class SaliencyMaps:
    side: list
    fuse: Tensor
    side_logits: list = field(repr=False, default=None)
    fuse_logit: Tensor = field(repr=False, default=None)


# layer plan shared by init, describe and the forward pass

def _rsu_layers(rsu):
    """Yield (role, cin, cout, dilation) for each conv-bn-relu of one RSU."""
    L = rsu.height
    yield "in", rsu.in_ch, rsu.out_ch, 1
    for k in range(1, L + 1):
        cin = rsu.out_ch if k == 1 else rsu.mid_ch
        if rsu.dilated:
            dil = 2 ** (k - 1)
        else:
            dil = 2 if k == L else 1
        yield f"e{k}", cin, rsu.mid_ch, dil
    for k in range(L - 1, 0, -1):
        cout = rsu.out_ch if k == 1 else rsu.mid_ch
        dil = 2 ** (k - 1) if rsu.dilated else 1
        yield f"d{k}", 2 * rsu.mid_ch, cout, dil


def _stages(spec):
    """(prefix, RSUSpec) in execution order."""
    out = [(f"enc{k}", r) for k, r in enumerate(spec.encoder_specs, start=1)]
    out += [(f"dec{N_DECODER - i}", r) for i, r in enumerate(spec.decoder_specs)]
    return out


def layer_plan(spec):
    """Rows of (name, kind, shape) for every parameter tensor, in store order."""
    rows = []
    for prefix, rsu in _stages(spec):
        for role, cin, cout, dil in _rsu_layers(rsu):
            base = f"{prefix}.{role}"
            rows.append((f"{base}.conv.w", f"conv3x3/d{dil}", (cout, cin, 3, 3)))
            rows.append((f"{base}.conv.b", "bias", (cout,)))
            rows.append((f"{base}.bn.gamma", "bn.gamma", (cout,)))
            rows.append((f"{base}.bn.beta", "bn.beta", (cout,)))
    for n, cin in enumerate(spec.side_in_channels(), start=1):
        rows.append((f"side{n}.w", "conv3x3/d1", (spec.side_channels, cin, 3, 3)))
        rows.append((f"side{n}.b", "bias", (spec.side_channels,)))
    rows.append(("fuse.w", "conv1x1", (spec.side_channels, N_ENCODER * spec.side_channels, 1, 1)))
    rows.append(("fuse.b", "bias", (spec.side_channels,)))
    return rows


def param_count(spec):
    """Closed-form count of weights, biases, gammas and betas."""
    def conv(cin, cout, k=3):
        return cout * cin * k * k + cout

    total = 0
    for rsu in spec.encoder_specs + spec.decoder_specs:
        L, m, o = rsu.height, rsu.mid_ch, rsu.out_ch
        total += conv(rsu.in_ch, o) + 2 * o           # input transform
        total += conv(o, m) + 2 * m                   # e1
        total += (L - 1) * (conv(m, m) + 2 * m)       # e2..eL
        total += (L - 2) * (conv(2 * m, m) + 2 * m)   # d(L-1)..d2
        total += conv(2 * m, o) + 2 * o               # d1
    sc = spec.side_channels
    total += sum(conv(c, sc) for c in spec.side_in_channels())
    total += conv(N_ENCODER * sc, sc, k=1)
    return total


def describe(spec):
    """Plain-text layer table: name, type, shape, params."""
    rows = layer_plan(spec)
    width = max(len(r[0]) for r in rows)
    lines = [f"{'name':<{width}}  {'type':<12}  {'shape':<18}  params"]
    total = 0
    for name, kind, shape in rows:
        n = int(np.prod(shape))
        total += n
        lines.append(f"{name:<{width}}  {kind:<12}  {'x'.join(map(str, shape)):<18}  {n}")
    lines.append(f"total parameters: {total}")
    lines.append(f"minimum input extent: {spec.min_extent()}")
    return "\n".join(lines) + "\n"


class ParamStore:
    """Ordered parameter tensors plus batch-norm running statistics."""

    def __init__(self, params=None, buffers=None):
        self.params = dict(params or {})
        self.buffers = dict(buffers or {})

    def __getitem__(self, name):
        return self.params[name]

    def __len__(self):
        return len(self.params)

    def arrays(self):
        return {k: t.data for k, t in self.params.items()}

    def grads(self):
        return {k: t.grad for k, t in self.params.items() if t.grad is not None}

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def count(self):
        return sum(t.size for t in self.params.values())

    def copy(self):
        params = {k: Tensor(t.data.copy(), requires_grad=t.requires_grad) for k, t in self.params.items()}
        return ParamStore(params, {k: v.copy() for k, v in self.buffers.items()})

    def astype(self, dtype):
        params = {k: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad) for k, t in self.params.items()}
        return ParamStore(params, {k: v.astype(dtype) for k, v in self.buffers.items()})

    def requires_grad_(self, flag=True):
        for t in self.params.values():
            t.requires_grad = flag
        return self

    def named_arrays(self):
        """Params then buffers, in store order."""
        yield from ((k, t.data) for k, t in self.params.items())
        yield from self.buffers.items()

    def digest(self):
        h = hashlib.sha256()
        for name, arr in self.named_arrays():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def init_params(spec, seed, dtype=np.float64):
    """He-normal conv weights (std sqrt(2/fan_in)), zero biases, unit gamma, zero beta."""
    rng = np.random.default_rng(seed)
    params, buffers = {}, {}
    for name, kind, shape in layer_plan(spec):
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            arr = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif name.endswith(".gamma"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
        if name.endswith(".bn.gamma"):
            base = name[: -len(".gamma")]
            buffers[f"{base}.running_mean"] = np.zeros(shape, dtype=dtype)
            buffers[f"{base}.running_var"] = np.ones(shape, dtype=dtype)
    return ParamStore(params, buffers)


# forward

def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def rebnconv(x, store, base, dilation, training):
    p = store.params
    y = conv2d(x, p[f"{base}.conv.w"], p[f"{base}.conv.b"], padding=dilation, dilation=dilation)
    y = batchnorm2d(y, p[f"{base}.bn.gamma"], p[f"{base}.bn.beta"],
                    store.buffers[f"{base}.bn.running_mean"], store.buffers[f"{base}.bn.running_var"],
                    training)
    return relu(y)


def _spatial(t):
    return t.shape[2], t.shape[3]


def rsu_forward(x, rsu, store, prefix, training=True):
    """Input transform F1(x) plus an L-level internal U over mid channels, added residually."""
    x = _as_tensor(x)
    if x.ndim != 4 or x.shape[1] != rsu.in_ch:
        raise ValidationError(f"{prefix}: expected {rsu.in_ch} input channels, got shape {x.shape}")
    h, w = _spatial(x)
    if min(h, w) < rsu.min_extent:
        raise ValidationError(
            f"{prefix}: spatial extent {h}x{w} too small for RSU height {rsu.height}; "
            f"minimum legal extent is {rsu.min_extent}")
    layers = {role: dil for role, _, _, dil in _rsu_layers(rsu)}
    L = rsu.height

    hx_in = rebnconv(x, store, f"{prefix}.in", 1, training)
    enc = []
    hx = hx_in
    for k in range(1, L + 1):
        hx = rebnconv(hx, store, f"{prefix}.e{k}", layers[f"e{k}"], training)
        enc.append(hx)
        if not rsu.dilated and k < L - 1:
            hx = maxpool2d(hx)
    d = enc[L - 1]
    for k in range(L - 1, 0, -1):
        skip = enc[k - 1]
        if _spatial(d) != _spatial(skip):
            d = upsample2d(d, size=_spatial(skip))
        d = rebnconv(concat_channels([d, skip]), store, f"{prefix}.d{k}", layers[f"d{k}"], training)
    return d + hx_in


def fuse_maps(side_logits, store):
    """S_fuse logit = 1x1 conv over the concatenated (upsampled) side logits."""
    return conv2d(concat_channels(side_logits), store["fuse.w"], store["fuse.b"])


def check_input(x_shape, spec):
    if len(x_shape) != 4:
        raise ValidationError(f"network input must be N x C x H x W, got shape {tuple(x_shape)}")
    if x_shape[1] != spec.input_channels:
        raise ValidationError(f"network expects {spec.input_channels} input channels, got {x_shape[1]}")
    need = spec.min_extent()
    h, w = x_shape[2], x_shape[3]
    if min(h, w) < need:
        raise ValidationError(
            f"input extent {h}x{w} is below the minimum legal extent {need}x{need} for this spec",
            field="extent")


def u2net_forward(x, spec, store, training=True):
    """Run the network; returns six side maps and the fused map, all at input resolution."""
    x = _as_tensor(x)
    check_input(x.shape, spec)
    size = _spatial(x)

    enc_out = []
    hx = x
    for k, rsu in enumerate(spec.encoder_specs, start=1):
        if k > 1:
            hx = maxpool2d(hx)
        hx = rsu_forward(hx, rsu, store, f"enc{k}", training)
        enc_out.append(hx)

    dec_out = {}
    d = enc_out[-1]
    for i, rsu in enumerate(spec.decoder_specs):
        stage = N_DECODER - i
        skip = enc_out[stage - 1]
        if _spatial(d) != _spatial(skip):
            d = upsample2d(d, size=_spatial(skip))
        d = rsu_forward(concat_channels([d, skip]), rsu, store, f"dec{stage}", training)
        dec_out[stage] = d

    feats = [dec_out[n] for n in range(1, N_DECODER + 1)] + [enc_out[-1]]
    side_logits = []
    for n, f in enumerate(feats, start=1):
        s = conv2d(f, store[f"side{n}.w"], store[f"side{n}.b"], padding=1)
        if _spatial(s) != size:
            s = upsample2d(s, size=size)
        side_logits.append(s)
    fuse_logit = fuse_maps(side_logits, store)
    return SaliencyMaps(side=[sigmoid(s) for s in side_logits], fuse=sigmoid(fuse_logit),
                        side_logits=side_logits, fuse_logit=fuse_logit)
