"""Thresholding, 3D connected-component labeling and largest-component refinement."""
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ValidationError


@dataclass
class LabelMap:
    labels: np.ndarray       # int32, 0 = background, 1..K by decreasing size
    sizes: dict              # label -> voxel count
    connectivity: int = 26

    @property
    def n_components(self):
        return len(self.sizes)


def _as_3d(a):
    a = np.asarray(a)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise ValidationError(f"expected a (D, H, W) array or a stack of 2D slices, got shape {a.shape}")
    return a


def binarize(fuse_maps, t=0.5):
    """Foreground where value >= t. Accepts a (D, H, W) array or a list of slices."""
    if isinstance(fuse_maps, (list, tuple)):
        fuse_maps = np.stack([np.asarray(m) for m in fuse_maps])
    return (_as_3d(fuse_maps) >= t).astype(np.uint8)


def label_components(mask, connectivity=26):
    """Label connected regions 1..K, largest first.

    Equal-size components are ordered by the row-major index of their first
    voxel.
    """
    mask = _as_3d(mask)
    if connectivity not in (6, 26):
        raise ValidationError(f"connectivity must be 6 or 26, got {connectivity}", field="connectivity")
    raw, k = kernels.label_raw(mask != 0, connectivity)
    if k == 0:
        return LabelMap(raw, {}, connectivity)
    sizes = np.bincount(raw.ravel(), minlength=k + 1)[1:]
    # raw labels already follow first-voxel order, so a stable sort on -size is enough
    order = np.argsort(-sizes, kind="stable")
    remap = np.zeros(k + 1, dtype=np.int32)
    remap[order + 1] = np.arange(1, k + 1, dtype=np.int32)
    labels = remap[raw]
    return LabelMap(labels, {i + 1: int(sizes[j]) for i, j in enumerate(order)}, connectivity)


def extract_largest(lm):
    return (lm.labels == 1).astype(np.uint8)


def refine(fuse_maps, t=0.5, connectivity=26, return_labels=False):
    """binarize -> label_components -> extract_largest."""
    lm = label_components(binarize(fuse_maps, t), connectivity)
    out = extract_largest(lm)
    return (out, lm) if return_labels else out


def component_report(lm):
    """Text summary of a labeling, one line per component."""
    lines = [f"components: {lm.n_components}", f"connectivity: {lm.connectivity}"]
    lines += [f"label {lab}: {n} voxels" for lab, n in lm.sizes.items()]
    return "\n".join(lines) + "\n"
