"""Finite-difference sweep over every op and every trainable architecture.

Everything runs at float64 on tiny shapes; one report row per case.
"""
from __future__ import annotations

import time

import numpy as np

from . import autodiff as ad
from . import model as M
from .autodiff import Tensor


def _t(rng, shape, name, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True, name=name)


def _relu(rng):
    x = rng.normal(size=(3, 4))
    x = np.where(np.abs(x) < 0.05, 0.3, x)
    t = Tensor(x, requires_grad=True, name="x")
    return lambda: ad.sum(ad.relu(t) * ad.relu(t)), [t]


def _matmul(rng):
    a, b = _t(rng, (3, 4), "a"), _t(rng, (4, 2), "b")
    c = rng.normal(size=(3, 2))
    return lambda: ad.sum(ad.matmul(a, b) * c), [a, b]


def _linear(rng):
    x, w, b = _t(rng, (4, 3), "x"), _t(rng, (5, 3), "w"), _t(rng, (5,), "b")
    c = rng.normal(size=(4, 5))
    return lambda: ad.sum(ad.linear(x, w, b) * c), [x, w, b]


def _conv(rng):
    x, w, b = _t(rng, (2, 2, 5, 5), "x"), _t(rng, (3, 2, 3, 3), "w"), _t(rng, (3,), "b")
    c = rng.normal(size=(2, 3, 3, 3))
    return lambda: ad.sum(ad.conv2d(x, w, b, stride=2, padding=1) * c), [x, w, b]


def _elementwise(rng):
    x, y = _t(rng, (3, 3), "x"), _t(rng, (3, 3), "y")
    return lambda: ad.sum((x - y) * (x + y) * x), [x, y]


def _reshape(rng):
    x = _t(rng, (3, 4), "x")
    c = rng.normal(size=(2, 6))
    return lambda: ad.sum(ad.reshape(ad.transpose(x), (2, 6)) * c), [x]


def _mean(rng):
    x = _t(rng, (2, 3, 4), "x")
    c = rng.normal(size=(2, 4))
    return lambda: ad.sum(ad.mean(x, axis=1) * c), [x]


def _gap(rng):
    x = _t(rng, (2, 3, 4, 4), "x")
    c = rng.normal(size=(2, 3))
    return lambda: ad.sum(ad.global_avg_pool(x) * c), [x]


def _l2(rng):
    x = _t(rng, (3, 5), "x")
    c = rng.normal(size=(3, 5))
    return lambda: ad.sum(ad.l2_normalize(x) * c), [x]


def _lse(rng):
    x = _t(rng, (3, 5), "x", 3.0)
    c = rng.normal(size=3)
    return lambda: ad.sum(ad.logsumexp(x, axis=1) * c), [x]


def _ce(rng):
    x = _t(rng, (4, 5), "x", 2.0)
    y = rng.integers(0, 5, size=4)
    return lambda: ad.softmax_cross_entropy(x, y), [x]


def _mse(rng):
    x = _t(rng, (4, 3), "x")
    t = rng.normal(size=(4, 3))
    return lambda: ad.mse(x, t), [x]


def _infonce(rng):
    z1, z2 = _t(rng, (6, 8), "z1"), _t(rng, (6, 8), "z2")
    return lambda: M.infonce_loss(z1, z2, M.ContrastiveConfig(0.5)), [z1, z2]


def _f64(params, rng):
    # zero-initialised biases can park a ReLU exactly on its kink; jitter them off it
    for p in params:
        p.data = p.data.astype(np.float64)
        if p.name.endswith(".b"):
            p.data = p.data + rng.normal(scale=0.1, size=p.shape)
    return params


def _towers(tied):
    def case(rng):
        t = M.build_towers(0, backbone_dim=8, tied=tied)
        g, m = t["gel"], t["membrane"]
        xg = rng.uniform(0, 1, (4, 3, 8, 8))
        xm = rng.uniform(0, 1, (4, 1, 8, 8))
        params = _f64(M.unique_parameters(t), rng)
        return lambda: M.infonce_loss(g.forward(xg)[1], m.forward(xm)[1], M.ContrastiveConfig(0.5)), params
    return case


def _head(kind):
    def case(rng):
        x = Tensor(rng.normal(size=(4, 6)))
        if kind == "class":
            head = M.ClassifierHead(6, 5, rng)
            y = rng.integers(0, 5, 4)
            return lambda: M.ce_loss(head(x), y), _f64(head.parameters(), rng)
        if kind == "pose":
            head = M.PoseHead(6, rng, hidden=5)
            pose = np.column_stack([rng.uniform(-5, 5, (4, 2)), rng.uniform(-30, 30, 4)])
            return lambda: M.pose_mse(head(x), pose), _f64(head.parameters(), rng)
        head = M.ReconHead(6, 1, rng, size=4)
        target = rng.uniform(0, 1, (4, 1, 4, 4))
        return lambda: M.recon_mse(head(x), target), _f64(head.parameters(), rng)
    return case


CASES = {
    "relu": _relu, "matmul": _matmul, "linear": _linear, "conv2d": _conv,
    "elementwise": _elementwise, "transpose_reshape": _reshape, "mean": _mean,
    "global_avg_pool": _gap, "l2_normalize": _l2, "logsumexp": _lse,
    "softmax_cross_entropy": _ce, "mse": _mse, "infonce": _infonce,
    "head/class": _head("class"), "head/pose": _head("pose"), "head/recon": _head("recon"),
    "network/untied": _towers(False), "network/tied": _towers(True),
}


def run_suite(tol: float = 1e-4, trials: int = 3, seed: int = 0) -> dict:
    """Per-case max relative error over ``trials`` random draws."""
    rows = []
    for name, make in CASES.items():
        t0 = time.perf_counter()
        worst, failures = 0.0, []
        # small steps keep the network cases from straddling a ReLU kink
        h = 1e-6 if name.startswith(("network", "head")) else 1e-4
        with ad.precision(np.float64):
            for trial in range(trials):
                fn, params = make(ad.rng_stream(seed, f"gradcheck/{name}", trial))
                rep = ad.grad_check(fn, params, tol=tol, h=h, max_entries=40,
                                    rng=np.random.default_rng(trial))
                worst = max(worst, rep.max_error)
                failures += [f"trial {trial}: {f}" for f in rep.failures]
        rows.append({"case": name, "max_rel_error": worst, "passed": not failures and worst < tol,
                     "failures": failures, "seconds": round(time.perf_counter() - t0, 3)})
    return {"tol": tol, "trials": trials, "passed": all(r["passed"] for r in rows), "cases": rows}
