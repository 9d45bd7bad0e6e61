"""Volume file formats: native RVOL1 (read/write), single-file NIfTI-1 (read
only) and binary PGM slice montages (write only).

RVOL1 layout::

    RVOL1
    dims: D H W
    dtype: f32|i16|u8
    spacing: sz sy sx
    <blank line>
    raw little-endian payload, row-major (z, y, x)
"""
import math
import os
import struct

import numpy as np

from .errors import FormatError, ValidationError
from .postprocess import LabelMap
from .preprocess import Volume

MAGIC = "RVOL1"
DTYPES = {"f32": np.dtype("<f4"), "i16": np.dtype("<i2"), "u8": np.dtype("u1")}


def _dtype_code(arr):
    if arr.dtype.kind == "f":
        return "f32"
    if arr.dtype == np.bool_ or arr.dtype == np.uint8:
        return "u8"
    if arr.dtype == np.int16:
        return "i16"
    if arr.dtype.kind in "iu":
        info = np.iinfo(np.int16)
        if arr.size == 0 or (arr.min() >= info.min and arr.max() <= info.max):
            return "i16"
    raise ValidationError(f"cannot store dtype {arr.dtype} in RVOL1 (supported: f32, i16, u8)", field="dtype")


def format_header(dims, code, spacing):
    d, h, w = (int(n) for n in dims)
    sp = " ".join(repr(float(s)) for s in spacing)
    return f"{MAGIC}\ndims: {d} {h} {w}\ndtype: {code}\nspacing: {sp}\n\n".encode("ascii")


def _unpack(obj):
    if isinstance(obj, Volume):
        return obj.values, obj.spacing
    if isinstance(obj, LabelMap):
        return obj.labels, (1.0, 1.0, 1.0)
    return np.asarray(obj), (1.0, 1.0, 1.0)


def write_volume(obj, path, spacing=None):
    values, sp = _unpack(obj)
    if spacing is not None:
        sp = spacing
    if values.ndim != 3:
        raise ValidationError(f"write_volume needs a 3D array, got shape {values.shape}")
    code = _dtype_code(values)
    payload = np.ascontiguousarray(values, dtype=DTYPES[code]).tobytes()
    with open(path, "wb") as fh:
        fh.write(format_header(values.shape, code, sp))
        fh.write(payload)


def _split_header(raw):
    end = raw.find(b"\n\n")
    if end < 0:
        raise FormatError("missing blank line ending the header", field="header")
    return raw[: end + 2], raw[end + 2:]


def parse_header(head):
    try:
        text = head.decode("ascii")
    except UnicodeDecodeError:
        raise FormatError("header is not ASCII", field="header") from None
    lines = text[:-2].split("\n")
    if lines[0] != MAGIC:
        raise FormatError(f"bad magic {lines[0]!r}, expected {MAGIC!r}", field="magic")
    fields = {}
    for line in lines[1:]:
        key, sep, value = line.partition(": ")
        if not sep:
            raise FormatError(f"malformed header line {line!r}", field="header")
        if key not in ("dims", "dtype", "spacing"):
            raise FormatError(f"unknown header key {key!r}", field=key)
        if key in fields:
            raise FormatError(f"duplicate header key {key!r}", field=key)
        fields[key] = value
    for key in ("dims", "dtype", "spacing"):
        if key not in fields:
            raise FormatError(f"missing header key {key!r}", field=key)

    try:
        dims = tuple(int(v) for v in fields["dims"].split(" "))
    except ValueError:
        raise FormatError(f"dims not integers: {fields['dims']!r}", field="dims") from None
    if len(dims) != 3 or min(dims) < 1:
        raise FormatError(f"dims must be 3 positive integers, got {fields['dims']!r}", field="dims")
    code = fields["dtype"]
    if code not in DTYPES:
        raise FormatError(f"unknown dtype {code!r}", field="dtype")
    try:
        spacing = tuple(float(v) for v in fields["spacing"].split(" "))
    except ValueError:
        raise FormatError(f"spacing not numeric: {fields['spacing']!r}", field="spacing") from None
    if len(spacing) != 3 or not all(math.isfinite(s) and s > 0 for s in spacing):
        raise FormatError(f"spacing must be 3 positive finite numbers, got {fields['spacing']!r}",
                          field="spacing")
    # only the canonical spelling is accepted, so no two headers parse alike
    if format_header(dims, code, spacing) != head:
        raise FormatError("header is not in canonical form", field="header")
    return dims, code, spacing


def read_volume(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    head, payload = _split_header(raw)
    dims, code, spacing = parse_header(head)
    dt = DTYPES[code]
    need = int(np.prod(dims)) * dt.itemsize
    if len(payload) < need:
        raise FormatError(f"truncated payload: {len(payload)} bytes, expected {need}", field="payload")
    if len(payload) > need:
        raise FormatError(f"payload has {len(payload) - need} trailing bytes", field="payload")
    values = np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    return Volume(values, spacing)


# NIfTI-1, single file, uncompressed, 3D, int16/float32

NIFTI_DTYPES = {4: "i2", 16: "f4"}


def read_nifti(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 348:
        raise FormatError(f"file too short for a NIfTI-1 header ({len(raw)} bytes)", field="sizeof_hdr")
    if struct.unpack("<i", raw[:4])[0] == 348:
        end = "<"
    elif struct.unpack(">i", raw[:4])[0] == 348:
        end = ">"
    else:
        raise FormatError("sizeof_hdr is not 348 in either byte order", field="sizeof_hdr")
    magic = raw[344:348]
    if magic == b"ni1\x00":
        raise FormatError("two-file NIfTI (.hdr/.img) is not supported", field="magic")
    if magic != b"n+1\x00":
        raise FormatError(f"bad NIfTI magic {magic!r}", field="magic")
    dim = struct.unpack(end + "8h", raw[40:56])
    if dim[0] != 3:
        raise FormatError(f"only 3D volumes are supported, dim[0] = {dim[0]}", field="dim")
    nx, ny, nz = dim[1:4]
    if min(nx, ny, nz) < 1:
        raise FormatError(f"non-positive dims {dim[1:4]}", field="dim")
    datatype = struct.unpack(end + "h", raw[70:72])[0]
    if datatype not in NIFTI_DTYPES:
        raise FormatError(f"unsupported datatype code {datatype}", field="datatype")
    pixdim = struct.unpack(end + "8f", raw[76:108])
    vox_offset = struct.unpack(end + "f", raw[108:112])[0]
    slope, inter = struct.unpack(end + "2f", raw[112:120])
    if not math.isfinite(vox_offset) or vox_offset < 348:
        raise FormatError(f"bad vox_offset {vox_offset}", field="vox_offset")
    off = int(vox_offset)
    dt = np.dtype(end + NIFTI_DTYPES[datatype])
    need = nx * ny * nz * dt.itemsize
    if len(raw) < off + need:
        raise FormatError(f"truncated payload: need {need} bytes at offset {off}", field="payload")
    stored = np.frombuffer(raw, dtype=dt, count=nx * ny * nz, offset=off).reshape(nz, ny, nx)
    stored = stored.astype(dt.newbyteorder("="))
    if slope == 0 or not math.isfinite(slope):
        slope = 1.0
    if not math.isfinite(inter):
        inter = 0.0
    if slope == 1.0 and inter == 0.0:
        values = stored
    else:
        values = (stored.astype(np.float64) * slope + inter).astype(np.float32)
    spacing = tuple(abs(float(p)) or 1.0 for p in (pixdim[3], pixdim[2], pixdim[1]))
    return Volume(values, spacing)


def read_any(path):
    """Dispatch on extension: .nii -> NIfTI, anything else -> RVOL1."""
    return read_nifti(path) if str(path).endswith(".nii") else read_volume(path)


# PGM montages

def _write_pgm(path, img):
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5" or len(parts) < 4:
        raise FormatError("not a binary PGM", field="magic")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def _label_grays(k):
    # label 1 brightest, distinct for up to 216 labels
    return np.array([0] + [255 - ((lab - 1) * 215) // max(k - 1, 1) for lab in range(1, k + 1)],
                    dtype=np.uint8)


def to_gray(obj, kind="auto"):
    """Map a volume, mask or label map to uint8 (D, H, W) gray levels."""
    if isinstance(obj, LabelMap):
        kind, values = "labels", obj.labels
    else:
        values, _ = _unpack(obj)
    if kind == "auto":
        binary = values.dtype.kind in "biu" and np.isin(values, (0, 1)).all()
        kind = "mask" if binary else "volume"
    if kind == "mask":
        return np.where(values != 0, 255, 0).astype(np.uint8)
    if kind == "labels":
        k = int(values.max()) if values.size else 0
        grays = _label_grays(k)
        return grays[np.minimum(values, k)] if k <= 216 else np.where(values > 0, 255, 0).astype(np.uint8)
    if kind != "volume":
        raise ValidationError(f"unknown montage kind {kind!r}")
    v = values.astype(np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.full(v.shape, 128, dtype=np.uint8)
    return np.round((v - lo) / (hi - lo) * 255).astype(np.uint8)


def export_montage(obj, out_dir, every_k=1, kind="auto", stem="slice"):
    """One P5 PGM per selected axial slice (0, k, 2k, ...); returns the paths."""
    if every_k < 1:
        raise ValidationError(f"every_k must be >= 1, got {every_k}", field="every_k")
    gray = to_gray(obj, kind)
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for z in range(0, gray.shape[0], every_k):
        p = os.path.join(out_dir, f"{stem}_z{z:04d}.pgm")
        _write_pgm(p, gray[z])
        paths.append(p)
    return paths
