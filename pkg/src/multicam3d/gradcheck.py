"""Finite-difference verification suite: every differentiable op, and the
end-to-end two-stage pipeline loss on a tiny configuration.

The pipeline probe pins the stop-gradient quantities (teacher forcing on,
per-layer proposal positions frozen from a base run) so central differences
measure exactly the traced computation.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .config import ModelConfig, OptimConfig, RunConfig
from .model import Model
from .scene_sim import SimConfig, sample_scene

PER_OP_TOL = 1e-5
PIPELINE_TOL = 1e-3


def op_suite() -> dict[str, float]:
    """Max relative FD error per op on fixed random inputs."""
    rng = np.random.default_rng(20240818)
    results: dict[str, float] = {}

    def leaf(shape, lo=0.3, hi=2.0):
        return ad.Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)

    def run(name, f, tensors, h=1e-5):
        results[name] = ad.gradient_check(f, tensors, h=h)

    a = leaf((3, 4))
    b = leaf((3, 4))
    w = ad.Tensor(rng.normal(size=(3, 4)))
    pairs = {
        "add": lambda: ad.add(a, b), "sub": lambda: ad.sub(a, b),
        "hadamard": lambda: ad.hadamard(a, b),
        "scale": lambda: ad.scale(a, -2.3),
        "sigmoid": lambda: ad.sigmoid(a), "relu": lambda: ad.relu(ad.sub(a, b)),
        "exp": lambda: ad.exp(a), "log": lambda: ad.log(a),
        "abs": lambda: ad.absolute(ad.sub(a, b)),
        "smooth_l1": lambda: ad.smooth_l1(ad.sub(a, b)),
        "softmax": lambda: ad.softmax(a, axis=1),
        "reduce_max": lambda: ad.reshape(ad.reduce_max(a, axis=0), (1, 4)),
        "log_softmax": lambda: ad.log_softmax(a, axis=0),
    }
    for name, f in pairs.items():
        run(name, lambda f=f: ad.reduce_sum(ad.hadamard(f(), ad.Tensor(
            w.data[:f().shape[0], :f().shape[1]]))), [a, b])

    m1 = leaf((4, 5), -1, 1)
    m2 = leaf((5, 3), -1, 1)
    wm = ad.Tensor(rng.normal(size=(4, 3)))
    run("matmul", lambda: ad.reduce_sum(ad.hadamard(ad.matmul(m1, m2), wm)),
        [m1, m2])

    t = leaf((2, 3))
    run("transpose", lambda: ad.reduce_sum(ad.hadamard(
        ad.transpose(t), ad.Tensor(np.arange(6.0).reshape(3, 2)))), [t])
    run("reshape_concat_narrow", lambda: ad.reduce_sum(
        ad.narrow(ad.concat([ad.reshape(a, (4, 3)), ad.reshape(b, (4, 3))], 0), 0, 2, 4)),
        [a, b])
    run("index_select", lambda: ad.reduce_sum(ad.index_select(a, 1, [0, 3, 3])), [a])
    run("reduce_mean", lambda: ad.reduce_mean(a), [a])

    pool_in = leaf((2, 4, 4))
    w_pool = ad.Tensor(rng.normal(size=(2, 2, 2)))
    run("avg_pool2d", lambda: ad.reduce_sum(
        ad.hadamard(ad.avg_pool2d(pool_in, 2), w_pool)), [pool_in])

    mp = leaf((3, 5, 6), -1, 1)
    u, v = ad.Tensor(2.3, requires_grad=True), ad.Tensor(1.7, requires_grad=True)
    wb1 = ad.Tensor(rng.normal(size=3))
    run("bilinear_sample", lambda: ad.reduce_sum(
        ad.hadamard(ad.bilinear_sample(mp, u, v), wb1)), [mp, u, v], h=1e-6)
    us = np.array([0.4, 3.6, 2.0])
    vs = np.array([1.2, 0.3, 3.9])
    wb2 = ad.Tensor(rng.normal(size=(3, 3)))
    run("bilinear_sample_batch", lambda: ad.reduce_sum(
        ad.hadamard(ad.bilinear_sample_batch(mp, us, vs), wb2)), [mp])
    src = leaf((3, 2))
    w_scatter = ad.Tensor(rng.normal(size=(3, 30)))
    run("col_scatter_add", lambda: ad.reduce_sum(ad.hadamard(
        ad.col_scatter_add(ad.reshape(mp, (3, 30)), src, [4, 4]), w_scatter)),
        [mp, src])
    return results


def tiny_run_config(seed: int = 11) -> RunConfig:
    sim = SimConfig(n_views=2, image_width=64, image_height=64, n_classes=2,
                    boxes_per_scene=(2, 4), focal_px=40.0,
                    size_ranges=((1.6, 2.0, 3.5, 5.0, 1.4, 1.8),
                                 (0.5, 0.8, 0.5, 0.8, 1.5, 1.9)))
    model = ModelConfig(channels=8, hidden=8, n_pro=8, n_layers=2, n_heads=2,
                        score_min=0.01)
    return RunConfig(seed=seed, sim=sim, model=model, optim=OptimConfig())


def pipeline_check(h: float = 1e-4) -> tuple[float, int]:
    """End-to-end FD check of the full two-stage loss on one tiny scene.

    Returns (max relative error over every parameter entry, parameter count).
    """
    config = tiny_run_config()
    model = Model(config)
    scene = sample_scene(config.sim, 5)
    tf_rng = np.random.default_rng(0)

    base = model.forward_train(scene, tf_prob=1.0, tf_rng=tf_rng,
                               force_teacher=True)
    pinned = [out.pre_positions for out in base.layer_outputs]

    def f():
        result = model.forward_train(scene, tf_prob=1.0,
                                     tf_rng=np.random.default_rng(0),
                                     force_teacher=True,
                                     pinned_positions=pinned)
        return result.total

    params = model.named_params()
    tensors = list(params.values())
    err = ad.gradient_check(f, tensors, h=h)
    n_entries = sum(t.size for t in tensors)
    return err, n_entries


def run_all(verbose: bool = True) -> bool:
    ok = True
    for name, err in op_suite().items():
        passed = err < PER_OP_TOL
        ok = ok and passed
        if verbose:
            print(f"gradcheck op {name:24s} rel_err={err:.3e} "
                  f"{'PASS' if passed else 'FAIL'}")
    err, n = pipeline_check()
    passed = err < PIPELINE_TOL
    ok = ok and passed
    if verbose:
        print(f"gradcheck pipeline ({n} parameter entries) rel_err={err:.3e} "
              f"{'PASS' if passed else 'FAIL'}")
    return ok
