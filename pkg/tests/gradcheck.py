"""Central finite-difference checks for every layer, loss and the bridge chain.

Each ``check_*`` runs one random float64 instance and returns the relative
error between the analytic and numeric gradients (max over checked tensors).
"""
from __future__ import annotations

import numpy as np

from cascadeface.losses import LossWeights, TaskLabels, multi_task_loss, smooth_l1, smooth_l1_grad
from cascadeface.model import CascadeModel
from cascadeface.nn import functional as F
from cascadeface.trainer import EndToEndCascade, build_bridged

from oracles import numeric_grad, rel_error

EPS = 1e-5
TOL = 1e-4
INSTANCES = 20


def _proj(rng, shape):
    return rng.normal(size=shape)


def check_conv(rng) -> float:
    n, h, w = int(rng.integers(1, 3)), int(rng.integers(4, 8)), int(rng.integers(4, 8))
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    x = rng.normal(size=(n, h, w, cin))
    wt = rng.normal(size=(cout, cin, k, k))
    b = rng.normal(size=cout)
    out, cols = F.conv2d_forward(x, wt, b, stride)
    r = _proj(rng, out.shape)
    dx, dw, db = F.conv2d_backward(r, x.shape, cols, wt, stride)

    def f():
        return float(np.sum(F.conv2d_forward(x, wt, b, stride)[0] * r))

    return max(rel_error(dx, numeric_grad(f, x, EPS)), rel_error(dw, numeric_grad(f, wt, EPS)),
               rel_error(db, numeric_grad(f, b, EPS)))


def check_maxpool(rng) -> float:
    window = int(rng.integers(2, 4))
    stride = int(rng.integers(1, 3))
    h, w = int(rng.integers(window, 8)), int(rng.integers(window, 8))
    x = rng.normal(size=(1, h, w, 2))
    out, index = F.maxpool_forward(x, window, stride)
    r = _proj(rng, out.shape)
    dx = F.maxpool_backward(r, x.shape, index)

    def f():
        return float(np.sum(F.maxpool_forward(x, window, stride)[0] * r))

    return rel_error(dx, numeric_grad(f, x, EPS))


def check_prelu(rng) -> float:
    x = rng.normal(size=(2, 3, 3, 4))
    # keep inputs away from the kink so the central difference is valid
    x = np.where(np.abs(x) < 1e-3, 0.1, x)
    a = rng.uniform(0.0, 0.5, size=4)
    r = _proj(rng, x.shape)
    dx, da = F.prelu_backward(r, x, a)

    def f():
        return float(np.sum(F.prelu_forward(x, a) * r))

    return max(rel_error(dx, numeric_grad(f, x, EPS)), rel_error(da, numeric_grad(f, a, EPS)))


def check_dense(rng) -> float:
    n, fin, fout = int(rng.integers(1, 5)), int(rng.integers(1, 8)), int(rng.integers(1, 6))
    x = rng.normal(size=(n, fin))
    wt = rng.normal(size=(fout, fin))
    b = rng.normal(size=fout)
    r = _proj(rng, (n, fout))
    dx, dw, db = F.dense_backward(r, x, wt)

    def f():
        return float(np.sum(F.dense_forward(x, wt, b) * r))

    return max(rel_error(dx, numeric_grad(f, x, EPS)), rel_error(dw, numeric_grad(f, wt, EPS)),
               rel_error(db, numeric_grad(f, b, EPS)))


def check_softmax(rng) -> float:
    z = rng.normal(scale=3.0, size=(4, 2))
    r = _proj(rng, z.shape)
    p = F.softmax2_forward(z)
    dz = F.softmax2_backward(r, p)

    def f():
        return float(np.sum(F.softmax2_forward(z) * r))

    return rel_error(dz, numeric_grad(f, z, EPS))


def _random_labels(rng, n):
    cls = rng.integers(0, 2, size=n)
    reg = rng.normal(scale=0.5, size=(n, 4))
    pts = rng.uniform(0, 1, size=(n, 10))
    mask = rng.random((n, 3)) < 0.7
    mask[~mask.any(axis=1), 0] = True
    return TaskLabels(cls, reg, pts, mask)


def _random_heads(rng, n):
    return {"cls_logits": rng.normal(scale=2.0, size=(n, 2)),
            "reg": rng.normal(scale=1.0, size=(n, 4)),
            "pts": rng.normal(loc=0.5, scale=1.0, size=(n, 10))}


def _away_from_kink(heads, labels):
    # smooth L1 has a curvature jump at |residual| = 1; nudge residuals off it
    for key, star in (("reg", labels.reg), ("pts", labels.pts)):
        d = heads[key] - star
        near = np.abs(np.abs(d) - 1.0) < 1e-3
        heads[key] = np.where(near, heads[key] + 0.01, heads[key])


def check_cls_loss(rng) -> float:
    n = 6
    heads = _random_heads(rng, n)
    labels = TaskLabels(rng.integers(0, 2, size=n), np.full((n, 4), np.nan),
                        np.full((n, 10), np.nan), np.tile([True, False, False], (n, 1)))
    w = LossWeights(rng.uniform(0.1, 2), 0.5, 0.5)
    res = multi_task_loss(heads, labels, w)
    z = heads["cls_logits"]
    return rel_error(res.grads["cls"],
                     numeric_grad(lambda: multi_task_loss(heads, labels, w).total, z, EPS))


def check_smooth_l1(rng) -> float:
    x = rng.normal(scale=2.0, size=20)
    x = np.where(np.abs(np.abs(x) - 1) < 1e-3, x + 0.01, x)
    return rel_error(smooth_l1_grad(x), numeric_grad(lambda: float(np.sum(smooth_l1(x))), x, EPS))


def _check_regression_head(rng, key, col) -> float:
    n = 6
    heads = _random_heads(rng, n)
    labels = _random_labels(rng, n)
    labels.mask[:] = False
    labels.mask[:, col] = True
    _away_from_kink(heads, labels)
    w = LossWeights(1.0, rng.uniform(0.1, 2), rng.uniform(0.1, 2))
    res = multi_task_loss(heads, labels, w)
    return rel_error(res.grads[key],
                     numeric_grad(lambda: multi_task_loss(heads, labels, w).total, heads[key], EPS))


def check_reg_loss(rng) -> float:
    return _check_regression_head(rng, "reg", 1)


def check_pts_loss(rng) -> float:
    return _check_regression_head(rng, "pts", 2)


def check_multi_task(rng) -> float:
    n = 8
    heads = _random_heads(rng, n)
    labels = _random_labels(rng, n)
    _away_from_kink(heads, labels)
    keep = rng.random(n) < 0.7
    w = LossWeights(*rng.uniform(0.1, 2, size=3))
    res = multi_task_loss(heads, labels, w, keep)
    errs = [rel_error(res.grads[g], numeric_grad(
        lambda: multi_task_loss(heads, labels, w, keep).total, heads[k], EPS))
        for g, k in (("cls", "cls_logits"), ("reg", "reg"), ("pts", "pts"))]
    return max(errs)


SKIPS = {"draws": 0, "skipped": 0}
MAX_REDRAWS = 25


def _smooth_slope(f, shift):
    """Central difference along ``shift``, or None if the step crosses a kink.

    At a smooth point the two one-sided slopes differ by about curvature * eps;
    a max-pool argmax switch or PReLU sign flip inside the step makes them
    differ by orders of magnitude more.
    """
    f0 = f()
    shift(EPS)
    fp = f()
    shift(-2 * EPS)
    fm = f()
    shift(EPS)
    fwd, bwd = (fp - f0) / EPS, (f0 - fm) / EPS
    central = (fp - fm) / (2 * EPS)
    SKIPS["draws"] += 1
    # a kink inside the step biases the central difference by about |fwd - bwd|
    roundoff = 1e3 * np.finfo(np.float64).eps * max(abs(f0), 1.0) / EPS
    if abs(fwd - bwd) > 0.1 * TOL * abs(central) + roundoff:
        SKIPS["skipped"] += 1
        return None
    return central


def _directional(f, params: dict, analytic: dict, rng, n_dirs=3) -> float:
    """Directional derivatives along random unit directions over all tensors."""
    errs = []
    names = sorted(params)
    for _ in range(n_dirs):
        for _ in range(MAX_REDRAWS):
            dirs = {k: rng.normal(size=params[k].shape) for k in names}
            norm = np.sqrt(sum(np.sum(d * d) for d in dirs.values()))
            dirs = {k: d / norm for k, d in dirs.items()}

            def shift(s):
                for k in names:
                    params[k] += s * dirs[k]
            num = _smooth_slope(f, shift)
            if num is not None:
                break
        else:
            raise AssertionError("no smooth direction found")
        ana = sum(float(np.sum(analytic[k] * dirs[k])) for k in names)
        errs.append(abs(num - ana) / max(abs(num), abs(ana), 1e-12))
    return max(errs)


def _sampled_coords(f, arr, analytic, rng, k=6) -> float:
    flat, g = arr.reshape(-1), analytic.reshape(-1)
    num, ana = [], []
    for i in rng.permutation(flat.size):
        def shift(s, i=i):
            flat[i] += s
        slope = _smooth_slope(f, shift)
        if slope is None:
            continue
        num.append(slope)
        ana.append(g[i])
        if len(num) == k:
            break
    return rel_error(ana, num)


def check_network(rng, name="net12") -> float:
    """Whole-net check: random net, random input, projected heads."""
    model = CascadeModel.initialize(rng=rng, dtype=np.float64, names=(name,))
    net = model.nets[name]
    size = net.spec.input_size
    n = 2 if size < 48 else 1
    x = rng.normal(size=(n, 3, size, size))
    proj = {k: rng.normal(size=(n, d)) for k, d in (("cls", 2), ("reg", 4), ("pts", 10))}

    def f():
        h = net.predict(x)
        return float(sum(np.sum(h[k if k != "cls" else "cls_logits"] * proj[k]) for k in proj))

    net.zero_grad()
    net.forward(x)
    net.backward(proj)
    grads = net.grads
    err = _directional(f, net.params, grads, rng)
    for pname in ("conv1.w", "prelu1.a"):
        err = max(err, _sampled_coords(f, net.params[pname], grads[pname], rng))
    return err


def check_bridge(rng) -> float:
    """48net loss back through both bridges into the 24net and 12net weights."""
    model = CascadeModel.initialize(rng=rng, dtype=np.float64)
    model.trained.update(model.nets)
    bridged = build_bridged(model)
    for net in bridged.nets.values():
        for k in net.params:
            if k.endswith("bridge_w"):
                net.params[k][...] = rng.normal(scale=0.1, size=net.params[k].shape)
    chain = EndToEndCascade(bridged)
    x = rng.normal(size=(1, 3, 48, 48))
    labels = _random_labels(rng, 1)
    w = LossWeights(1.0, 0.5, 1.0)

    def f():
        _, _, h48 = chain.forward(x, train=False)
        return multi_task_loss(h48, labels, w).total

    for net in chain.nets:
        net.zero_grad()
    _, _, h48 = chain.forward(x)
    res = multi_task_loss(h48, labels, w)
    chain.backward(res.grads)
    errs = []
    for net, pname in ((chain.net12, "conv1.w"), (chain.net24, "conv2.w"),
                       (chain.net48, "fc.bridge_w"), (chain.net24, "fc.bridge_w"),
                       (chain.net12, "prelu3.a")):
        errs.append(_sampled_coords(f, net.params[pname], net.grads[pname], rng, k=4))
    return max(errs)


CHECKS = {
    "conv2d": check_conv,
    "max_pool": check_maxpool,
    "prelu": check_prelu,
    "dense": check_dense,
    "softmax2": check_softmax,
    "cls_loss": check_cls_loss,
    "smooth_l1": check_smooth_l1,
    "reg_loss": check_reg_loss,
    "pts_loss": check_pts_loss,
    "multi_task_loss": check_multi_task,
    "net12": lambda rng: check_network(rng, "net12"),
    "net24": lambda rng: check_network(rng, "net24"),
    "net48": lambda rng: check_network(rng, "net48"),
    "bridge": check_bridge,
}


def run_check(name: str, instances: int = INSTANCES, seed: int = 0) -> list:
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    return [CHECKS[name](rng) for _ in range(instances)]
