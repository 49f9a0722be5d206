"""Finite-difference verification of analytic gradients.

Each registered check builds small float64 inputs, projects the operation
output onto a fixed random direction to get a scalar, and compares the
backward-pass gradients against central differences with step 1e-6.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T

FD_STEP = 1e-6
DEFAULT_TOLERANCE = 1e-5


@dataclass
class CheckReport:
    op: str
    max_rel_error: float
    tolerance: float
    trials: int
    passed: bool
    worst_trial: int = 0


def relative_error(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def check_scalar_fn(fn, inputs, h=FD_STEP):
    """Compare backward gradients of scalar-valued fn against central
    differences, elementwise over every input marked requires_grad.

    fn(list of Tensors) -> scalar Tensor.  Returns max relative error.
    """
    tensors = [T.Tensor(np.asarray(x, dtype=np.float64), requires_grad=True) for x in inputs]
    out = fn(tensors)
    for t in tensors:
        t.zero_grad()
    out.backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn(tensors).data)
            flat[i] = orig - h
            fm = float(fn(tensors).data)
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * h)
        err = relative_error(analytic, numeric)
        if err.size:
            worst = max(worst, float(err.max()))
    return worst


def _scalarize(op_out, u):
    s = (op_out.data * u).sum()
    res = T.Tensor(np.asarray(s, dtype=op_out.dtype))
    res.requires_grad = op_out.requires_grad
    res._parents = (op_out,)
    res._backward = lambda g: op_out._accumulate(u * g)
    return res


# --- trial builders: each returns (inputs, fn) -----------------------------

def _trial_conv2d(rng):
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3)) * 0.5
    b = rng.standard_normal(3) * 0.1
    u = rng.standard_normal((1, 3, 5, 5))
    return [x, w, b], lambda ts: _scalarize(T.conv2d(*ts), u)


def _trial_conv_transpose2d(rng):
    x = rng.standard_normal((1, 3, 3, 3))
    w = rng.standard_normal((3, 2, 2, 2)) * 0.5
    b = rng.standard_normal(2) * 0.1
    u = rng.standard_normal((1, 2, 6, 6))
    return [x, w, b], lambda ts: _scalarize(T.conv_transpose2d(*ts), u)


def _trial_maxpool2d(rng):
    # distinct values keep windows far from argmax ties at the fd step
    x = rng.permutation(36).reshape(1, 1, 6, 6) * 0.1 + rng.standard_normal((1, 1, 6, 6)) * 0.01
    u = rng.standard_normal((1, 1, 3, 3))
    return [x], lambda ts: _scalarize(T.maxpool2d(ts[0]), u)


def _trial_relu(rng):
    # keep inputs away from the kink at 0
    x = rng.standard_normal((2, 3, 4, 4))
    x = np.where(np.abs(x) < 0.1, x + 0.2 * np.sign(x) + 0.05, x)
    u = rng.standard_normal(x.shape)
    return [x], lambda ts: _scalarize(T.relu(ts[0]), u)


def _trial_bilinear_resize(rng):
    x = rng.standard_normal((1, 1, 6, 6))
    u = rng.standard_normal((1, 1, 4, 3))
    return [x], lambda ts: _scalarize(T.bilinear_resize(ts[0], (4, 3)), u)


def _trial_broadcast_mul(rng):
    f = rng.standard_normal((2, 3, 4, 4))
    m = rng.standard_normal((2, 1, 4, 4))
    u = rng.standard_normal(f.shape)
    return [f, m], lambda ts: _scalarize(T.broadcast_mul(ts[0], ts[1]), u)


def _trial_concat_channels(rng):
    a = rng.standard_normal((1, 2, 3, 3))
    b = rng.standard_normal((1, 3, 3, 3))
    u = rng.standard_normal((1, 5, 3, 3))
    return [a, b], lambda ts: _scalarize(T.concat_channels(ts[0], ts[1]), u)


def _trial_softmax_cross_entropy(rng):
    z = rng.standard_normal((1, 2, 4, 4))
    tgt = (rng.random((1, 1, 4, 4)) > 0.5).astype(np.float64)
    return [z], lambda ts: T.softmax_cross_entropy(ts[0], tgt)


OP_CHECKS = {
    "conv2d": _trial_conv2d,
    "conv_transpose2d": _trial_conv_transpose2d,
    "maxpool2d": _trial_maxpool2d,
    "relu": _trial_relu,
    "bilinear_resize": _trial_bilinear_resize,
    "broadcast_mul": _trial_broadcast_mul,
    "concat_channels": _trial_concat_channels,
    "softmax_cross_entropy": _trial_softmax_cross_entropy,
}


def check_op(name, trials=10, tolerance=DEFAULT_TOLERANCE, seed=0):
    """Run the finite-difference check for one registered op."""
    if name not in OP_CHECKS:
        raise KeyError(f"unknown op {name!r}; known: {sorted(OP_CHECKS)}")
    builder = OP_CHECKS[name]
    worst = 0.0
    worst_trial = 0
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial, zlib.crc32(name.encode())])
        inputs, fn = builder(rng)
        err = check_scalar_fn(fn, inputs)
        if err > worst:
            worst, worst_trial = err, trial
    return CheckReport(name, worst, tolerance, trials, worst < tolerance, worst_trial)


def check_all_ops(trials=10, tolerance=DEFAULT_TOLERANCE, seed=0, ops=None):
    names = sorted(OP_CHECKS) if ops is None else list(ops)
    return [check_op(n, trials=trials, tolerance=tolerance, seed=seed) for n in names]


def check_model(tolerance=DEFAULT_TOLERANCE, seed=0, h=FD_STEP):
    """End-to-end check: loss gradient w.r.t. every parameter and both
    modality inputs of a small gated network on an 8x8 instance."""
    from . import model as M

    config = M.ModelConfig(
        backbone_input="ct", msam_input="pet", depth=3, base_width=2, input_size=(8, 8)
    )
    params = M.build_model(config, seed=seed).astype(np.float64)
    rng = np.random.default_rng([seed, 0xE2E])
    pet = T.Tensor(rng.standard_normal((1, 1, 8, 8)), requires_grad=True)
    ct = T.Tensor(rng.standard_normal((1, 1, 8, 8)), requires_grad=True)
    target = (rng.random((1, 1, 8, 8)) > 0.7).astype(np.float64)

    def loss_value():
        logits, _ = M.forward_graph(params, pet, ct)
        return T.softmax_cross_entropy(logits, target)

    params.zero_grad()
    pet.zero_grad()
    ct.zero_grad()
    loss_value().backward()

    worst = 0.0
    leaves = [t for _, t in params.items()] + [pet, ct]
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(loss_value().data)
            flat[i] = orig - h
            fm = float(loss_value().data)
            flat[i] = orig
            numeric[i] = (fp - fm) / (2 * h)
        err = relative_error(analytic.reshape(-1), numeric)
        if err.size:
            worst = max(worst, float(err.max()))
    return CheckReport("model_end_to_end", worst, tolerance, 1, worst < tolerance)
