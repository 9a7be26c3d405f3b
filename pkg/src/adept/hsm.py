"""Hidden State Mapper: predicts a token's final hidden state from an early exit.

Forward pipeline for the default ``"conv"`` variant, per token::

    x  = stack(h_i, h_prev, inertia)              # (3, D)
    xn = rms_norm(x, g_in)                         # each row normalized separately
    c  = conv3x3(xn, stride=(1, 1), pad=(0, 1))    # (D,)
    a1 = act(fc1(c))                               # 4D
    a2 = act(fc2(a1))                              # 8D
    m  = rms_norm(fc3(a2), g_mid)                  # 4D
    o  = rms_norm(fc4(m + a1), g_out)              # D
    out = o + c

Two ablation front ends replace the convolution: ``"add"`` sums the three
normalized rows, ``"reshape"`` flattens them into a ``3D`` input for fc1 (the
final residual then adds the normalized current state).

All functions accept a single token (1-D inputs) or a batch (2-D, one token
per row). Backward is exact reverse mode over the recorded tape.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterator

import numpy as np

from .cost_model import CostLedger, hsm_flops
from .errors import ShapeError, TapeMismatch, ZeroState
from .model import gelu, gelu_grad

HSM_EPS = 1e-6
LINEAR_STD = 0.02
CONV_STD = 0.02
VARIANTS = ("conv", "add", "reshape")
ACTIVATIONS = ("gelu", "relu")

PARAM_ORDER = (
    "conv_k", "conv_b",
    "fc1_w", "fc1_b",
    "fc2_w", "fc2_b",
    "fc3_w", "fc3_b",
    "fc4_w", "fc4_b",
    "g_in", "g_mid", "g_out",
)


@dataclass
class HSMWeights:
    fc1_w: np.ndarray
    fc1_b: np.ndarray
    fc2_w: np.ndarray
    fc2_b: np.ndarray
    fc3_w: np.ndarray
    fc3_b: np.ndarray
    fc4_w: np.ndarray
    fc4_b: np.ndarray
    g_in: np.ndarray
    g_mid: np.ndarray
    g_out: np.ndarray
    conv_k: np.ndarray | None = None
    conv_b: np.ndarray | None = None
    variant: str = "conv"
    activation: str = "gelu"

    @property
    def d_hidden(self) -> int:
        return self.g_in.shape[0]

    def names(self) -> tuple[str, ...]:
        if self.variant == "conv":
            return PARAM_ORDER
        return PARAM_ORDER[2:]

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        for n in self.names():
            yield n, getattr(self, n)

    def n_parameters(self) -> int:
        return sum(a.size for _, a in self.named_arrays())

    def map(self, fn) -> "HSMWeights":
        """New weights with ``fn`` applied to every parameter array."""
        kw = {n: fn(a) for n, a in self.named_arrays()}
        return HSMWeights(**kw, variant=self.variant, activation=self.activation)

    def zeros_like(self) -> "HSMWeights":
        return self.map(np.zeros_like)

    def copy(self) -> "HSMWeights":
        return self.map(np.array)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for _, a in self.named_arrays()])

    def assign_flat(self, vec: np.ndarray) -> None:
        i = 0
        for _, a in self.named_arrays():
            a[...] = vec[i : i + a.size].reshape(a.shape)
            i += a.size


def expected_hsm_shapes(d: int, variant: str = "conv") -> dict[str, tuple[int, ...]]:
    if variant not in VARIANTS:
        raise ValueError(f"unknown HSM variant {variant!r}")
    fc1_in = 3 * d if variant == "reshape" else d
    shapes = {
        "conv_k": (3, 3), "conv_b": (1,),
        "fc1_w": (fc1_in, 4 * d), "fc1_b": (4 * d,),
        "fc2_w": (4 * d, 8 * d), "fc2_b": (8 * d,),
        "fc3_w": (8 * d, 4 * d), "fc3_b": (4 * d,),
        "fc4_w": (4 * d, d), "fc4_b": (d,),
        "g_in": (d,), "g_mid": (4 * d,), "g_out": (d,),
    }
    if variant != "conv":
        del shapes["conv_k"], shapes["conv_b"]
    return shapes


def count_hsm_parameters(d_hidden: int, variant: str = "conv") -> int:
    """Closed form: ``72 D^2 + 23 D + 10`` for the conv variant."""
    d = d_hidden
    if d < 1:
        raise ValueError("d_hidden must be >= 1")
    fc1_in = 3 * d if variant == "reshape" else d
    conv = 9 + 1 if variant == "conv" else 0
    return (
        conv
        + fc1_in * 4 * d + 4 * d
        + 4 * d * 8 * d + 8 * d
        + 8 * d * 4 * d + 4 * d
        + 4 * d * d + d
        + d + 4 * d + d
    )


def init_hsm(d_hidden: int, seed: int, variant: str = "conv", activation: str = "gelu") -> HSMWeights:
    if d_hidden < 1:
        raise ValueError("d_hidden must be >= 1")
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    kw = {}
    for name, shape in expected_hsm_shapes(d_hidden, variant).items():
        if name.startswith("g_"):
            kw[name] = np.ones(shape)
        elif name.endswith("_b"):
            kw[name] = np.zeros(shape)
        elif name == "conv_k":
            kw[name] = rng.normal(0.0, CONV_STD, size=shape)
        else:
            kw[name] = rng.normal(0.0, LINEAR_STD, size=shape)
    return HSMWeights(**kw, variant=variant, activation=activation)


def hsm_from_arrays(arrays: dict[str, np.ndarray], variant: str, activation: str) -> HSMWeights:
    d = arrays["g_in"].shape[0]
    for name, shape in expected_hsm_shapes(d, variant).items():
        if name not in arrays or arrays[name].shape != shape:
            raise ShapeError(f"HSM weight {name}: expected {shape}")
    return HSMWeights(**{n: arrays[n] for n in expected_hsm_shapes(d, variant)}, variant=variant, activation=activation)


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------


def _act(kind: str, x: np.ndarray) -> np.ndarray:
    return gelu(x) if kind == "gelu" else np.maximum(x, 0.0)


def _act_grad(kind: str, x: np.ndarray) -> np.ndarray:
    return gelu_grad(x) if kind == "gelu" else (x > 0).astype(np.float64)


def _rms(x: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + HSM_EPS)
    return g * x * inv, inv


def _rms_backward(x: np.ndarray, inv: np.ndarray, g: np.ndarray, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gdy = g * dy
    dx = inv * gdy - x * inv**3 * np.mean(gdy * x, axis=-1, keepdims=True)
    dg = np.sum((dy * x * inv).reshape(-1, x.shape[-1]), axis=0)
    return dx, dg


def _conv_forward(xn: np.ndarray, k: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    bsz, _, d = xn.shape
    xp = np.zeros((bsz, 3, d + 2))
    xp[:, :, 1:-1] = xn
    out = np.full((bsz, d), b[0])
    for r in range(3):
        for c in range(3):
            out = out + k[r, c] * xp[:, r, c : c + d]
    return out, xp


def _conv_backward(xp: np.ndarray, k: np.ndarray, dc: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    d = dc.shape[1]
    dk = np.empty((3, 3))
    dxp = np.zeros_like(xp)
    for r in range(3):
        for c in range(3):
            dk[r, c] = np.sum(dc * xp[:, r, c : c + d])
            dxp[:, r, c : c + d] += k[r, c] * dc
    return dxp[:, :, 1:-1], dk, np.array([dc.sum()])


@dataclass
class HSMTape:
    """Every intermediate of one (batched) forward pass, in evaluation order."""

    variant: str
    activation: str
    single: bool
    x: np.ndarray
    inv_in: np.ndarray
    xn: np.ndarray
    xp: np.ndarray | None
    base: np.ndarray
    fc1_in: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    z2: np.ndarray
    a2: np.ndarray
    z3: np.ndarray
    inv_mid: np.ndarray
    m: np.ndarray
    r: np.ndarray
    z4: np.ndarray
    inv_out: np.ndarray
    o: np.ndarray
    out: np.ndarray

    def arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, np.ndarray):
                yield f.name, v


def hsm_forward(
    h_i: np.ndarray,
    h_prev: np.ndarray,
    inertia: np.ndarray,
    w: HSMWeights,
    ledger: CostLedger | None = None,
) -> tuple[np.ndarray, HSMTape]:
    """Map ``(h_i, h_prev, inertia)`` to the anticipated final hidden state."""
    h_i, h_prev, inertia = (np.asarray(a, dtype=np.float64) for a in (h_i, h_prev, inertia))
    single = h_i.ndim == 1
    if not (h_i.shape == h_prev.shape == inertia.shape) or h_i.shape[-1] != w.d_hidden or h_i.ndim > 2:
        raise ShapeError(f"HSM inputs must all have trailing width {w.d_hidden}")
    x = np.stack([np.atleast_2d(h_i), np.atleast_2d(h_prev), np.atleast_2d(inertia)], axis=1)
    if np.any(np.all(x == 0.0, axis=-1)):
        raise ZeroState("HSM input branch has zero norm")
    bsz, _, d = x.shape

    xn, inv_in = _rms(x, w.g_in)
    xp = None
    if w.variant == "conv":
        base, xp = _conv_forward(xn, w.conv_k, w.conv_b)
        fc1_in = base
    elif w.variant == "add":
        base = xn.sum(axis=1)
        fc1_in = base
    else:
        base = xn[:, 0]
        fc1_in = xn.reshape(bsz, 3 * d)

    z1 = fc1_in @ w.fc1_w + w.fc1_b
    a1 = _act(w.activation, z1)
    z2 = a1 @ w.fc2_w + w.fc2_b
    a2 = _act(w.activation, z2)
    z3 = a2 @ w.fc3_w + w.fc3_b
    m, inv_mid = _rms(z3, w.g_mid)
    r = m + a1
    z4 = r @ w.fc4_w + w.fc4_b
    o, inv_out = _rms(z4, w.g_out)
    out = o + base

    if ledger is not None:
        ledger.add("hsm", hsm_flops(d, w.variant) * bsz)
    tape = HSMTape(
        w.variant, w.activation, single, x, inv_in, xn, xp, base, fc1_in,
        z1, a1, z2, a2, z3, inv_mid, m, r, z4, inv_out, o, out,
    )
    return (out[0] if single else out), tape


def hsm_backward(
    tape: HSMTape, grad_out: np.ndarray, w: HSMWeights
) -> tuple[HSMWeights, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Gradients of ``<grad_out, out>`` w.r.t. every weight and the three inputs."""
    g = np.atleast_2d(np.asarray(grad_out, dtype=np.float64))
    if tape.variant != w.variant or tape.activation != w.activation:
        raise TapeMismatch("tape was recorded with a different HSM variant")
    if g.shape != tape.out.shape or tape.x.shape[-1] != w.d_hidden or tape.fc1_in.shape[1] != w.fc1_w.shape[0]:
        raise TapeMismatch(f"grad_out shape {g.shape} does not match tape output {tape.out.shape}")
    bsz, _, d = tape.x.shape
    grads: dict[str, np.ndarray] = {}

    d_o = g
    d_base = g.copy()
    dz4, grads["g_out"] = _rms_backward(tape.z4, tape.inv_out, w.g_out, d_o)
    grads["fc4_w"] = tape.r.T @ dz4
    grads["fc4_b"] = dz4.sum(axis=0)
    dr = dz4 @ w.fc4_w.T
    dz3, grads["g_mid"] = _rms_backward(tape.z3, tape.inv_mid, w.g_mid, dr)
    grads["fc3_w"] = tape.a2.T @ dz3
    grads["fc3_b"] = dz3.sum(axis=0)
    da2 = dz3 @ w.fc3_w.T
    dz2 = da2 * _act_grad(w.activation, tape.z2)
    grads["fc2_w"] = tape.a1.T @ dz2
    grads["fc2_b"] = dz2.sum(axis=0)
    da1 = dr + dz2 @ w.fc2_w.T
    dz1 = da1 * _act_grad(w.activation, tape.z1)
    grads["fc1_w"] = tape.fc1_in.T @ dz1
    grads["fc1_b"] = dz1.sum(axis=0)
    d_fc1_in = dz1 @ w.fc1_w.T

    if w.variant == "conv":
        dxn, grads["conv_k"], grads["conv_b"] = _conv_backward(tape.xp, w.conv_k, d_fc1_in + d_base)
    elif w.variant == "add":
        dxn = np.repeat((d_fc1_in + d_base)[:, None, :], 3, axis=1)
    else:
        dxn = d_fc1_in.reshape(bsz, 3, d).copy()
        dxn[:, 0] += d_base

    dx, grads["g_in"] = _rms_backward(tape.x, tape.inv_in, w.g_in, dxn)
    gw = HSMWeights(**grads, variant=w.variant, activation=w.activation)
    if tape.single:
        return gw, (dx[0, 0], dx[0, 1], dx[0, 2])
    return gw, (dx[:, 0], dx[:, 1], dx[:, 2])
