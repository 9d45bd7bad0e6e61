"""Flat ``key = value`` run configuration.

One file covers phantom generation, network shape, training and
post-processing. Unknown keys are errors; absent keys take defaults.
"""
from dataclasses import dataclass, fields, replace
from typing import Optional

from .errors import ValidationError
from .losses import LossWeights
from .phantom import PhantomConfig
from .train import TrainConfig
from .u2net import U2NetSpec


def _ints(s):
    return tuple(int(v) for v in s.split(","))


def _floats(s):
    return tuple(float(v) for v in s.split(","))


def _strs(s):
    return tuple(v.strip() for v in s.split(","))


def _opt_int(s):
    return None if s.lower() in ("", "none") else int(s)


def _opt_float(s):
    return None if s.lower() in ("", "none") else float(s)


def _opt_strs(s):
    return None if s.lower() in ("", "none") else _strs(s)


@dataclass
class RunConfig:
    # phantom
    dims: tuple = (32, 64, 64)
    spacing: tuple = (1.0, 1.0, 1.0)
    trunk_radius: float = 4.0
    trunk_length: float = 14.0
    branch_depth: int = 2
    angle_min: float = 25.0
    angle_max: float = 45.0
    radius_decay: float = 0.7
    length_decay: float = 0.8
    hu_lumen: float = -1000.0
    hu_wall: float = 0.0
    hu_parenchyma: float = -800.0
    hu_soft_tissue: float = 40.0
    noise_std: float = 20.0
    # network
    preset: str = "toy"
    encoder_heights: Optional[tuple] = None
    decoder_heights: Optional[tuple] = None
    input_channels: int = 2
    side_channels: int = 1
    width_factor: Optional[float] = None
    input_mode: str = "duplicate"
    # training
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 2
    epochs: int = 1
    max_steps: Optional[int] = None
    test_fraction: float = 0.25
    seed: int = 0
    w_side: tuple = (1.0,) * 6
    w_fuse: float = 1.0
    dtype: str = "float32"
    slice_step: int = 1
    # post-processing
    threshold: float = 0.5
    connectivity: int = 26

    def phantom_config(self):
        return PhantomConfig(
            dims=self.dims, spacing=self.spacing, trunk_radius=self.trunk_radius,
            trunk_length=self.trunk_length, branch_depth=self.branch_depth,
            angle_min=self.angle_min, angle_max=self.angle_max, radius_decay=self.radius_decay,
            length_decay=self.length_decay, hu_lumen=self.hu_lumen, hu_wall=self.hu_wall,
            hu_parenchyma=self.hu_parenchyma, hu_soft_tissue=self.hu_soft_tissue,
            noise_std=self.noise_std)

    def net_spec(self):
        kw = dict(input_channels=self.input_channels, side_channels=self.side_channels)
        if self.encoder_heights is not None:
            kw["encoder_heights"] = self.encoder_heights
        if self.decoder_heights is not None:
            kw["decoder_heights"] = self.decoder_heights
        if self.width_factor is not None:
            kw["width_factor"] = self.width_factor
        return U2NetSpec.preset(self.preset, **kw)

    def train_config(self):
        return TrainConfig(
            optimizer=self.optimizer, lr=self.lr, momentum=self.momentum,
            batch_size=self.batch_size, epochs=self.epochs, max_steps=self.max_steps,
            test_fraction=self.test_fraction, seed=self.seed,
            weights=LossWeights(self.w_side, self.w_fuse), dtype=self.dtype)

    def validate(self):
        if self.connectivity not in (6, 26):
            raise ValidationError("connectivity must be 6 or 26", field="connectivity")
        if not 0 <= self.threshold <= 1:
            raise ValidationError("threshold must lie in [0, 1]", field="threshold")
        if self.slice_step < 1:
            raise ValidationError("slice_step must be >= 1", field="slice_step")
        if self.input_mode not in ("duplicate", "pair"):
            raise ValidationError("input_mode must be duplicate or pair", field="input_mode")
        self.phantom_config()
        self.net_spec()
        self.train_config()
        return self


PARSERS = {
    "dims": _ints, "spacing": _floats, "encoder_heights": _opt_strs, "decoder_heights": _opt_strs,
    "w_side": _floats, "width_factor": _opt_float, "max_steps": _opt_int,
    "preset": str, "input_mode": str, "optimizer": str, "dtype": str,
}
for _f in fields(RunConfig):
    if _f.name not in PARSERS:
        PARSERS[_f.name] = int if isinstance(_f.default, int) and not isinstance(_f.default, bool) else float


def parse_config(text, base=None):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ValidationError(f"line {lineno}: expected key = value, got {raw!r}", field=f"line {lineno}")
        if key not in PARSERS:
            raise ValidationError(f"line {lineno}: unknown config key {key!r}", field=key)
        if key in values:
            raise ValidationError(f"line {lineno}: duplicate config key {key!r}", field=key)
        try:
            values[key] = PARSERS[key](value)
        except ValueError:
            raise ValidationError(f"line {lineno}: bad value {value!r} for {key!r}", field=key) from None
    return replace(base or RunConfig(), **values)


def load_config(path=None, overrides=None):
    cfg = RunConfig()
    if path is not None:
        with open(path) as fh:
            cfg = parse_config(fh.read(), cfg)
    if overrides:
        cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    return cfg.validate()


def dump_config(cfg):
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {'none' if v is None else v}")
    return "\n".join(lines) + "\n"
