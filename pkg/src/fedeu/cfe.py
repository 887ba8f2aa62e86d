"""Client-specific feature embedding (CFE).

A one-hot client identity is expanded by two FC+ReLU layers with instance
normalisation in between, then gates a tanh channel descriptor of the
encoder feature. After each round the client blends its local CFE weights
with the aggregated global ones through a learned coefficient map ``psi``.
"""
from __future__ import annotations

from collections.abc import Callable, Mapping

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor

# parameter names, all in the Cfe group
EMBED1 = "cfe.embed1"
EMBED2 = "cfe.embed2"
GATE_EMBED = "cfe.gate_embed"
GATE_DESC = "cfe.gate_desc"


def one_hot(index, num_clients):
    if not 0 <= index < num_clients:
        raise ContractError(f"client index {index} outside [0, {num_clients})")
    v = np.zeros(num_clients, dtype=np.float32)
    v[index] = 1.0
    return v


def _linear(x, p, prefix):
    return T.add(T.matmul(x, p[prefix + ".weight"]), p[prefix + ".bias"])


def expand_embedding(delta, p):
    """delta [K] one-hot -> delta* [1, C_l]."""
    delta = T.as_tensor(delta)
    if delta.ndim != 1:
        raise ShapeError(f"client embedding must be 1-D, got {delta.shape}")
    h = T.relu(_linear(T.reshape(delta, (1, -1)), p, EMBED1))
    return T.relu(_linear(T.instance_norm(h), p, EMBED2))


def channel_attention(delta_star, descriptor, p):
    """Gate in (0, 1) from the embedding times tanh of the descriptor; [B, C_l]."""
    gate = T.sigmoid(_linear(delta_star, p, GATE_EMBED))
    return T.mul(gate, T.tanh(_linear(descriptor, p, GATE_DESC)))


def apply_cfe(feature, attention):
    b, c = attention.shape
    a = T.reshape(attention, (b, c, 1, 1))
    return T.add(feature, T.mul(feature, a))


def cfe_block(feature, delta, p):
    delta_star = expand_embedding(delta, p)
    attention = channel_attention(delta_star, T.global_avg_pool(feature), p)
    return apply_cfe(feature, attention)


def init_psi(cfe_params):
    return {name: np.ones_like(arr) for name, arr in cfe_params.items()}


def psi_calibrate(local, global_, psi):
    """Element-wise blend ``local + (global - local) * psi``.

    Works on plain arrays and on ``Tensor`` psi values (for the psi gradient).
    """
    if set(local) != set(global_) or set(local) != set(psi):
        raise ShapeError("psi_calibrate: parameter names differ between local, global and psi")
    out = {}
    for name in local:
        lo, gl, ps = local[name], global_[name], psi[name]
        if np.shape(lo) != np.shape(gl) or np.shape(lo) != tuple(np.shape(ps.data if isinstance(ps, Tensor) else ps)):
            raise ShapeError(f"psi_calibrate: shape mismatch for {name}")
        out[name] = lo + (gl - lo) * ps
    return out


def psi_update(
    psi: Mapping[str, np.ndarray],
    local: Mapping[str, np.ndarray],
    global_: Mapping[str, np.ndarray],
    loss_fn: Callable[[dict], Tensor],
    lr: float,
    steps: int = 1,
) -> dict[str, np.ndarray]:
    """Gradient steps on psi with everything else held fixed, then clip to [0, 1].

    ``loss_fn`` receives the calibrated CFE parameters (as Tensors) and must
    return the scalar training loss of the otherwise-frozen network.
    """
    psi = {n: np.asarray(v, dtype=np.float32) for n, v in psi.items()}
    for _ in range(steps):
        leaves = {n: Tensor(v.copy(), requires_grad=True, name="psi/" + n) for n, v in psi.items()}
        loss = loss_fn(psi_calibrate(local, global_, leaves))
        T.backward(loss)
        new = {}
        for n, v in psi.items():
            g = leaves[n].grad
            step = v if g is None else v - np.float32(lr) * g
            new[n] = np.clip(step, 0.0, 1.0).astype(np.float32)
        psi = new
    return psi
