"""SGD with momentum and Adam, operating in place on name -> array dicts.

``dual`` runs Adam on the outer-level heads (side and fuse convolutions) and
SGD with momentum on the RSU block parameters. The split is one reading of
"global and local optimizers"; nothing pins down the intended partition.
"""
from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    buffers: dict = field(default_factory=dict)

    def hyperparams(self):
        return {k: getattr(self, k) for k in ("kind", "lr", "momentum", "beta1", "beta2", "eps")}


KINDS = ("adam", "sgd", "dual")


def is_global(name):
    """Outer-level head parameters; everything else lives inside an RSU block."""
    return name.startswith(("side", "fuse."))


def _rule(kind, name):
    if kind == "dual":
        return "adam" if is_global(name) else "sgd"
    return kind


def make_state(kind, params, **hyper):
    """Fresh state with zeroed buffers shaped like ``params``."""
    if kind not in KINDS:
        raise ValueError(f"unknown optimizer {kind!r}")
    state = OptimizerState(kind=kind, **hyper)
    for name, p in params.items():
        slots = ("m", "v") if _rule(kind, name) == "adam" else ("momentum",)
        for slot in slots:
            state.buffers[f"{slot}.{name}"] = np.zeros_like(p)
    return state


def sgd_momentum_step(params, grads, state):
    """v <- mu*v + g ; theta <- theta - lr*v"""
    lr = state.lr
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        v = state.buffers[f"momentum.{name}"]
        v *= p.dtype.type(state.momentum)
        v += g
        p -= p.dtype.type(lr) * v
    state.step += 1


def adam_step(params, grads, state):
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        ty = p.dtype.type
        m = state.buffers[f"m.{name}"]
        v = state.buffers[f"v.{name}"]
        m *= ty(b1)
        m += ty(1 - b1) * g
        v *= ty(b2)
        v += ty(1 - b2) * (g * g)
        mhat = m / ty(c1)
        vhat = v / ty(c2)
        p -= ty(state.lr) * mhat / (np.sqrt(vhat) + ty(state.eps))


def step(params, grads, state):
    if state.kind == "adam":
        adam_step(params, grads, state)
    elif state.kind == "sgd":
        sgd_momentum_step(params, grads, state)
    elif state.kind == "dual":
        # both rules advance the shared counter, so rewind once after the pair
        adam_step({n: p for n, p in params.items() if is_global(n)}, grads, state)
        sgd_momentum_step({n: p for n, p in params.items() if not is_global(n)}, grads, state)
        state.step -= 1
    else:
        raise ValueError(f"unknown optimizer {state.kind!r}")
