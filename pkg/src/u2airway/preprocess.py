"""Per-slice CT normalization and construction of 2-channel network inputs."""
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

SENTINEL = -9.0
OUT_MAX = 2.5
Z_CLAMP = 3.0


@dataclass
class Volume:
    """3D scalar field, axes (D, H, W) with D the axial slice index."""
    values: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise ValidationError(f"volume must be 3D with positive dims, got shape {self.values.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3:
            raise ValidationError("spacing needs 3 entries", field="spacing")

    @property
    def dims(self):
        return self.values.shape


def normalize_slice(x, sigma_min=1e-6):
    """z-score one slice, clamp to [-3, 3], map affinely onto [0, 2.5].

    Slices with population std below ``sigma_min`` become all ``SENTINEL``.
    """
    x = np.asarray(x, dtype=np.float64)
    sd = x.std()
    if sd < sigma_min:
        return np.full(x.shape, SENTINEL)
    z = np.clip((x - x.mean()) / sd, -Z_CLAMP, Z_CLAMP)
    return (z + Z_CLAMP) * OUT_MAX / (2 * Z_CLAMP)


def normalize_volume(vol, sigma_min=1e-6):
    values = np.stack([normalize_slice(s, sigma_min) for s in vol.values])
    return Volume(values.astype(np.float32), vol.spacing)


@dataclass
class InputStack:
    slices: list
    indices: list

    def __len__(self):
        return len(self.slices)

    def batch(self, idx=None):
        """Stack (selected) entries into an N x 2 x H x W array."""
        idx = range(len(self.slices)) if idx is None else idx
        return np.stack([self.slices[i] for i in idx])


def make_inputs(nv, mode="duplicate"):
    """One 2-channel input per axial slice.

    ``duplicate`` copies slice k into both channels; ``pair`` puts slice k and
    slice k+1 (clamped at the end) side by side.
    """
    v = nv.values
    if mode not in ("duplicate", "pair"):
        raise ValidationError(f"unknown input mode {mode!r}", field="input_mode")
    slices = []
    for k in range(v.shape[0]):
        other = v[k] if mode == "duplicate" else v[min(k + 1, v.shape[0] - 1)]
        slices.append(np.stack([v[k], other]))
    return InputStack(slices, list(range(v.shape[0])))


def split_train_test(ids, test_fraction=0.25, seed=0):
    """Seeded shuffle, then the first round(fraction*n) ids are the test set."""
    ids = list(ids)
    n = len(ids)
    if n < 2:
        raise ValidationError(f"split_train_test needs at least 2 items, got {n}")
    if not 0 < test_fraction < 1:
        raise ValidationError(f"test_fraction must be in (0, 1), got {test_fraction}", field="test_fraction")
    n_test = int(round(test_fraction * n))
    n_test = min(max(n_test, 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    test = [ids[i] for i in sorted(order[:n_test])]
    train = [ids[i] for i in sorted(order[n_test:])]
    return train, test
