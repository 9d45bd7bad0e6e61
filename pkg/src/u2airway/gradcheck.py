import numpy as np

from .errors import ValidationError
from .tensor import no_grad


def grad_check(f, params, n_samples=100, h=1e-3, seed=0, return_details=False):
    """Compare analytic gradients of the scalar ``f()`` with central differences.

    ``params`` are leaf tensors (float64) that ``f`` closes over. ``n_samples``
    entries are drawn uniformly over all parameter entries (every entry when
    there are fewer). Relative error is ``|a - n| / max(1, |a|, |n|)``.
    """
    params = list(params)
    if not 1e-4 <= h <= 1e-2:
        raise ValidationError(f"grad_check: h must lie in [1e-4, 1e-2], got {h}")
    for p in params:
        if p.dtype != np.float64:
            raise ValidationError(f"grad_check needs float64 parameters, got {p.dtype}")
        p.zero_grad()
    f().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = np.arange(total) if n_samples >= total else rng.choice(total, size=n_samples, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    details = []
    with no_grad():
        for flat in np.sort(picks):
            pi = int(np.searchsorted(offsets, flat, side="right") - 1)
            idx = int(flat - offsets[pi])
            view = params[pi].data.reshape(-1)
            orig = view[idx]
            view[idx] = orig + h
            fp = f().item()
            view[idx] = orig - h
            fm = f().item()
            view[idx] = orig
            num = (fp - fm) / (2 * h)
            ana = float(analytic[pi].reshape(-1)[idx])
            rel = abs(ana - num) / max(1.0, abs(ana), abs(num))
            details.append((pi, idx, ana, num, rel))
    worst = max((d[4] for d in details), default=0.0)
    return (worst, details) if return_details else worst


def network_grad_check(spec, seed=0, n_samples=100, h=1e-3, batch=1, training=False, extent=None):
    """grad_check of the deep-supervision Dice loss through a whole network.

    The input is a normalized phantom slice (duplicated into the input
    channels) at the spec's minimum legal extent, with its lumen mask as
    target. Eval mode is the default: at the minimum extent the deepest stage
    is 1x1, where batch statistics of a single sample are undefined.
    """
    from .losses import deep_supervision_loss
    from .phantom import PhantomConfig, gen_phantom
    from .preprocess import make_inputs, normalize_volume
    from .tensor import Tensor
    from .u2net import init_params, u2net_forward

    s = extent or spec.min_extent()
    ph = gen_phantom(PhantomConfig(dims=(24, s, s), trunk_radius=3.0 * s / 32, trunk_length=10.0), seed=0)
    stack = make_inputs(normalize_volume(ph.volume))
    zs = [18, 6, 12, 22][:batch] if batch <= 4 else list(range(batch))
    x = np.stack([stack.slices[z] for z in zs]).astype(np.float64)
    if spec.input_channels != x.shape[1]:
        x = np.repeat(x[:, :1], spec.input_channels, axis=1)
    x = Tensor(x)
    gt = Tensor(ph.mask.values[zs][:, None].astype(np.float64))
    store = init_params(spec, seed, np.float64)

    def f():
        return deep_supervision_loss(u2net_forward(x, spec, store, training=training), gt)

    return grad_check(f, list(store.params.values()), n_samples=n_samples, h=h, seed=seed)
