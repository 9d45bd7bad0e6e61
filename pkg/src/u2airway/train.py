"""Deeply supervised training loop, evaluation pipeline and checkpoint files."""
import json
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import optim
from .errors import FormatError, NumericError, ValidationError
from .losses import LossWeights, deep_supervision_loss, dsc, reduce_side
from .postprocess import refine
from .preprocess import make_inputs, normalize_volume, split_train_test
from .tensor import Tensor, no_grad
from .u2net import ParamStore, U2NetSpec, check_input, init_params, u2net_forward

log = logging.getLogger(__name__)

CKPT_MAGIC = "U2CKPT1"


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 2
    epochs: int = 1
    max_steps: Optional[int] = None
    test_fraction: float = 0.25
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    dtype: str = "float32"

    def __post_init__(self):
        if self.optimizer not in optim.KINDS:
            raise ValidationError(f"optimizer must be one of {', '.join(optim.KINDS)}, got {self.optimizer!r}",
                                  field="optimizer")
        if not self.lr >= 0:
            raise ValidationError("lr must be >= 0", field="lr")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be positive", field="batch_size")
        if self.epochs < 1:
            raise ValidationError("epochs must be positive", field="epochs")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValidationError("max_steps must be positive", field="max_steps")
        if not 0 < self.test_fraction < 1:
            raise ValidationError("test_fraction must be in (0, 1)", field="test_fraction")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError("dtype must be float32 or float64", field="dtype")


class CurvePoint(NamedTuple):
    epoch: int
    step: int
    train_loss: float
    val_loss: Optional[float]


class LossCurve:
    def __init__(self, points=None):
        self.points = list(points or [])

    def append(self, epoch, step, train_loss, val_loss=None):
        if self.points and step <= self.points[-1].step:
            raise ValueError("steps must be strictly increasing")
        self.points.append(CurvePoint(epoch, step, train_loss, val_loss))

    def set_val(self, val_loss):
        self.points[-1] = self.points[-1]._replace(val_loss=val_loss)

    def train_losses(self):
        return np.array([p.train_loss for p in self.points])

    def to_csv(self):
        lines = ["epoch,step,train_loss,val_loss"]
        for p in self.points:
            val = "" if p.val_loss is None else repr(p.val_loss)
            lines.append(f"{p.epoch},{p.step},{p.train_loss!r},{val}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w", newline="\n") as fh:
            fh.write(self.to_csv())

    @classmethod
    def from_csv(cls, text):
        lines = text.strip().split("\n")
        if lines[0] != "epoch,step,train_loss,val_loss":
            raise FormatError("bad loss-curve header", field="header")
        curve = cls()
        for line in lines[1:]:
            e, s, tr, va = line.split(",")
            curve.append(int(e), int(s), float(tr), float(va) if va else None)
        return curve


@dataclass
class Checkpoint:
    spec: U2NetSpec
    store: ParamStore
    opt_state: optim.OptimizerState
    step: int = 0


def _batches(ids, size):
    return [ids[i:i + size] for i in range(0, len(ids), size)]


def _stack(dataset, ids, dtype):
    x = np.stack([dataset[i][0] for i in ids]).astype(dtype)
    gt = np.stack([dataset[i][1] for i in ids]).astype(dtype)[:, None]
    return x, gt


def batch_loss(spec, store, x, gt, weights, training):
    maps = u2net_forward(Tensor(x), spec, store, training=training)
    return deep_supervision_loss(maps, Tensor(gt), weights)


def validation_loss(spec, store, dataset, ids, cfg, dtype):
    """Mean per-slice Eq. objective over ``ids`` in eval mode (no state changes)."""
    total = 0.0
    with no_grad():
        for b in _batches(ids, cfg.batch_size):
            x, gt = _stack(dataset, b, dtype)
            total += batch_loss(spec, store, x, gt, cfg.weights, training=False).item() * len(b)
    return total / len(ids)


def train(cfg, spec, dataset, store=None, progress=None):
    """Train on (2 x H x W input, H x W mask) pairs; returns (Checkpoint, LossCurve).

    With two or more samples a ``test_fraction`` share is held out and scored
    once per epoch. ``progress`` is called with each new curve point.
    """
    if not dataset:
        raise ValidationError("training dataset is empty")
    dtype = np.dtype(cfg.dtype)
    shape = dataset[0][0].shape
    for i, (x, gt) in enumerate(dataset):
        if x.shape != shape or gt.shape != shape[1:]:
            raise ValidationError(f"sample {i}: input {x.shape} / mask {gt.shape} inconsistent with {shape}")
    check_input((1,) + tuple(shape), spec)

    ids = list(range(len(dataset)))
    if len(ids) >= 2:
        train_ids, val_ids = split_train_test(ids, cfg.test_fraction, cfg.seed)
    else:
        train_ids, val_ids = ids, []

    store = store if store is not None else init_params(spec, cfg.seed, dtype)
    state = optim.make_state(cfg.optimizer, store.arrays(), lr=cfg.lr, momentum=cfg.momentum)
    rng = np.random.default_rng([cfg.seed, 1])
    curve = LossCurve()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = [train_ids[i] for i in rng.permutation(len(train_ids))]
        for b in _batches(order, cfg.batch_size):
            x, gt = _stack(dataset, b, dtype)
            loss = batch_loss(spec, store, x, gt, cfg.weights, training=True)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite training loss {value} at step {step + 1}", step=step + 1)
            store.zero_grad()
            loss.backward()
            optim.step(store.arrays(), store.grads(), state)
            step += 1
            curve.append(epoch, step, value)
            if progress:
                progress(curve.points[-1])
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        if val_ids:
            curve.set_val(validation_loss(spec, store, dataset, val_ids, cfg, dtype))
            if progress:
                progress(curve.points[-1])
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    store.zero_grad()
    return Checkpoint(spec, store, state, step), curve


# inference and scoring

def predict_slices(ckpt, inputs, batch_size=4):
    """Fused probability map for each N x C x H x W input slice -> (N, H, W)."""
    out = []
    dtype = next(iter(ckpt.store.params.values())).dtype
    with no_grad():
        for i in range(0, len(inputs), batch_size):
            x = np.asarray(inputs[i:i + batch_size], dtype=dtype)
            maps = u2net_forward(Tensor(x), ckpt.spec, ckpt.store, training=False)
            out.append(reduce_side(maps.fuse).data[:, 0])
    return np.concatenate(out).astype(np.float32)


def predict_volume(ckpt, volume, batch_size=4, input_mode="duplicate"):
    """Normalize, split into 2-channel slices, run the network, restack to (D, H, W)."""
    check_input((1, ckpt.spec.input_channels) + volume.values.shape[1:], ckpt.spec)
    stack = make_inputs(normalize_volume(volume), mode=input_mode)
    return predict_slices(ckpt, stack.batch(), batch_size)


def score_prediction(probs, gt_mask, t=0.5, connectivity=26):
    probs = np.asarray(probs)
    gt_mask = np.asarray(gt_mask)
    if probs.shape != gt_mask.shape:
        raise ValidationError(f"prediction {probs.shape} and ground truth {gt_mask.shape} differ in shape")
    return dsc(refine(probs, t, connectivity), gt_mask)


class CaseResult(NamedTuple):
    name: str
    dsc: Optional[float]
    error: Optional[str] = None


def evaluate(ckpt, cases, t=0.5, connectivity=26):
    """Full pipeline per case -> (list of CaseResult, mean DSC over scored cases).

    ``cases`` holds (name, Volume, ground-truth mask) triples; a failing case is
    reported with its error and the others are still scored.
    """
    results = []
    for name, vol, gt in cases:
        gt_values = gt.values if hasattr(gt, "values") else np.asarray(gt)
        try:
            if vol.values.shape != gt_values.shape:
                raise ValidationError(f"volume {vol.values.shape} and mask {gt_values.shape} differ in shape")
            probs = predict_volume(ckpt, vol)
            results.append(CaseResult(name, score_prediction(probs, gt_values, t, connectivity)))
        except ValidationError as exc:
            results.append(CaseResult(name, None, str(exc)))
    scored = [r.dsc for r in results if r.dsc is not None]
    return results, (float(np.mean(scored)) if scored else float("nan"))


def dsc_table(results, mean):
    lines = ["case,dsc,error"]
    for r in results:
        lines.append(f"{r.name},{'' if r.dsc is None else repr(r.dsc)},{(r.error or '').replace(',', ';')}")
    lines.append(f"mean,{mean!r},")
    return "\n".join(lines) + "\n"


# checkpoints

def _ckpt_tensors(ckpt):
    for name, arr in ckpt.store.params.items():
        yield f"param.{name}", arr.data
    for name, arr in ckpt.store.buffers.items():
        yield f"buffer.{name}", arr
    for name, arr in ckpt.opt_state.buffers.items():
        yield f"opt.{name}", arr


def save_checkpoint(ckpt, path):
    """Text manifest (spec, optimizer, step, one line per tensor) then float32 LE payloads."""
    lines = [CKPT_MAGIC, "spec " + ckpt.spec.to_json(),
             "optimizer " + json.dumps({**ckpt.opt_state.hyperparams(), "step": ckpt.opt_state.step},
                                       sort_keys=True),
             f"step {ckpt.step}"]
    payloads, offset = [], 0
    for name, arr in _ckpt_tensors(ckpt):
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        shape = ",".join(map(str, arr.shape)) or "scalar"
        lines.append(f"tensor {name} {shape} {offset}")
        payloads.append(data)
        offset += len(data)
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n\n").encode("ascii"))
        for p in payloads:
            fh.write(p)


def read_manifest(raw):
    end = raw.find(b"\n\n")
    if end < 0:
        raise FormatError("checkpoint manifest has no terminating blank line", field="manifest")
    head = raw[: end + 2]
    lines = head.decode("ascii", errors="replace").split("\n")[:-2]
    if not lines or lines[0] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {lines[0] if lines else ''!r}", field="magic")
    meta, tensors, expect = {}, [], 0
    for line in lines[1:]:
        kind, _, rest = line.partition(" ")
        if kind in ("spec", "optimizer", "step"):
            meta[kind] = rest
        elif kind == "tensor":
            parts = rest.split(" ")
            if len(parts) != 3:
                raise FormatError(f"malformed tensor line {line!r}", field="manifest")
            name, shape_s, off_s = parts
            shape = () if shape_s == "scalar" else tuple(int(v) for v in shape_s.split(","))
            if int(off_s) != expect:
                raise FormatError(f"tensor {name}: offset {off_s} but previous tensors end at {expect}",
                                  field=name)
            nbytes = int(np.prod(shape)) * 4
            tensors.append((name, shape, expect, nbytes))
            expect += nbytes
        else:
            raise FormatError(f"unknown manifest line {line!r}", field="manifest")
    for key in ("spec", "optimizer", "step"):
        if key not in meta:
            raise FormatError(f"manifest lacks {key!r}", field=key)
    return meta, tensors, len(head)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    meta, tensors, head_len = read_manifest(raw)
    payload = raw[head_len:]
    for name, shape, off, nbytes in tensors:
        if off + nbytes > len(payload):
            raise FormatError(f"truncated checkpoint: tensor {name} is missing or incomplete", field=name)
    total = sum(t[3] for t in tensors)
    if len(payload) != total:
        raise FormatError(f"checkpoint payload has {len(payload) - total} trailing bytes", field="payload")

    spec = U2NetSpec.from_dict(json.loads(meta["spec"]))
    opt_meta = json.loads(meta["optimizer"])
    params, buffers, opt_bufs = {}, {}, {}
    for name, shape, off, nbytes in tensors:
        arr = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape)
        arr = arr.astype(np.float32)
        group, _, key = name.partition(".")
        if group == "param":
            params[key] = Tensor(arr, requires_grad=True)
        elif group == "buffer":
            buffers[key] = arr
        elif group == "opt":
            opt_bufs[key] = arr
        else:
            raise FormatError(f"unknown tensor group in {name!r}", field=name)
    state = optim.OptimizerState(step=int(opt_meta.pop("step")), buffers=opt_bufs, **opt_meta)
    return Checkpoint(spec, ParamStore(params, buffers), state, int(meta["step"]))
