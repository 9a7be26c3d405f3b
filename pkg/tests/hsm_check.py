"""Finite-difference helpers shared by the HSM gradient tests and the acceptance suite."""

import numpy as np

from adept.hsm import hsm_backward, hsm_forward, init_hsm


def rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)))


def hsm_gradcheck(d, seed=0, variant="conv", activation="gelu", step=1e-5, per_group=12):
    """Max relative error of analytic vs central-difference gradients.

    Checks up to ``per_group`` randomly chosen entries of every parameter
    group and of the three inputs, against ``L = <g, hsm(x)>`` for a fixed
    random ``g``. The error of a group is ``|num - ana| / max(|num|, |ana|)``
    taken over the sampled entries as a vector: single entries whose true
    gradient is ~1e-6 sit within a factor of 1e5 of the float64 difference
    noise at this step, so an entrywise ratio measures the noise, not the
    derivative.
    """
    rng = np.random.default_rng(seed)
    w = init_hsm(d, seed, variant, activation)
    # larger weights than init so every path carries signal; matrices are
    # scaled by fan-in so units stay off the flat tails of the activation
    w = w.map(lambda a: a + rng.normal(0, 0.3 / np.sqrt(a.shape[0] if a.ndim == 2 else 1), size=a.shape))
    xs = [rng.normal(size=d) for _ in range(3)]
    g = rng.normal(size=d)

    def loss(ws, inputs):
        return float(g @ hsm_forward(*inputs, ws)[0])

    def central(arr, i, inputs):
        old = arr[i]
        arr[i] = old + step
        lp = loss(w, inputs)
        arr[i] = old - step
        lm = loss(w, inputs)
        arr[i] = old
        return (lp - lm) / (2 * step)

    _, tape = hsm_forward(*xs, w)
    grads, gin = hsm_backward(tape, g, w)
    worst = 0.0
    for name, arr in w.named_arrays():
        flat = arr.reshape(-1)
        idx = rng.choice(flat.size, size=min(per_group, flat.size), replace=False)
        num = np.array([central(flat, i, xs) for i in idx])
        worst = max(worst, rel_err_vec(num, getattr(grads, name).reshape(-1)[idx]))
    for k in range(3):
        idx = rng.choice(d, size=min(per_group, d), replace=False)
        num = np.array([central(xs[k], i, xs) for i in idx])
        worst = max(worst, rel_err_vec(num, gin[k][idx]))
    return worst


def rel_err_vec(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def layer_state_batch(model, ids, layer):
    """Mapper inputs taken from the vanilla states at ``layer`` (as if every token exited there)."""
    from adept.model import vanilla_prefill
    from adept.training import ExitBatch

    res = vanilla_prefill(model, ids, keep_layer_states=True)
    st = res.layer_states
    inertia = st[1:layer].sum(axis=0)
    return ExitBatch(st[layer][:-1], st[layer - 1][:-1], inertia[:-1], np.asarray(ids[1:]), res.hidden[:-1])


def head_path_gradcheck(model, hsm, batch, sim_loss_weight=0.0, n_params=100, seed=0, step=1e-6):
    """Max relative error over ``n_params`` sampled HSM entries of the full head-path loss.

    The numeric side is a Richardson-extrapolated central difference (steps
    ``step`` and ``step / 2``): the normalizations inside the mapper curve the
    loss sharply when the residual stream is small, and a plain central
    difference needs an impractically small step to reach 1e-4 there.
    """
    from adept.training import head_path_loss

    rng = np.random.default_rng(seed)
    w = hsm.copy()
    _, grads = head_path_loss(model, w, batch, sim_loss_weight)
    flat = w.flat()
    gflat = grads.flat()

    def central(i, h):
        old = flat[i]
        flat[i] = old + h
        w.assign_flat(flat)
        lp = head_path_loss(model, w, batch, sim_loss_weight, need_grad=False)[0]
        flat[i] = old - h
        w.assign_flat(flat)
        lm = head_path_loss(model, w, batch, sim_loss_weight, need_grad=False)[0]
        flat[i] = old
        w.assign_flat(flat)
        return (lp - lm) / (2 * h)

    worst = 0.0
    for i in rng.choice(flat.size, size=min(n_params, flat.size), replace=False):
        num = (4 * central(i, step / 2) - central(i, step)) / 3
        worst = max(worst, rel_err(np.array(num), np.array(gflat[i])))
    return worst
