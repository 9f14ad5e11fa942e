"""Central finite-difference verification of every differentiable op and
of the end-to-end training loss on a tiny model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import attention as attn
from . import losses as L
from . import tensor as T
from .encoder import EncoderConfig
from .losses import ClusterConfig, ReconConfig, default_layer_set
from .tensor import Tensor
from .trainer import (
    TrainerConfig,
    build_views,
    forward_loss,
    init_train_state,
    optimized_keys,
)

FD_H = 1e-5
OP_TOL = 1e-4
END_TO_END_TOL = 1e-3


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def _rel_err(analytic: np.ndarray, fd: np.ndarray) -> float:
    return float(np.max(np.abs(analytic - fd) / np.maximum(1.0, np.abs(fd))))


def _fd_scalar(f: Callable[[], float], arr: np.ndarray, h: float = FD_H) -> np.ndarray:
    grad = np.zeros_like(arr)
    flat = arr.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def _check_case(make_inputs, f, rng, trials: int) -> float:
    """Max relative error of analytic vs central-FD gradients over trials."""
    worst = 0.0
    for _ in range(trials):
        arrays = make_inputs(rng)
        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        out = f(*tensors)
        out.backward()
        for arr, t in zip(arrays, tensors):
            fd = _fd_scalar(
                lambda: float(f(*[Tensor(a) for a in arrays]).data), arr)
            analytic = t.grad if t.grad is not None else np.zeros_like(arr)
            worst = max(worst, _rel_err(analytic, fd))
    return worst


def _weighted(rng, shape):
    w = rng.standard_normal(shape)
    return lambda t: T.tsum(T.mul(t, Tensor(w)))


def op_cases(rng: np.random.Generator) -> dict:
    """name -> (make_inputs, scalar-valued f) for every differentiable op."""
    def rnd(*shape):
        return rng.standard_normal(shape)

    w34 = _weighted(rng, (3, 4))
    w43 = _weighted(rng, (4, 3))
    w234 = _weighted(rng, (2, 3, 4))
    w24 = _weighted(rng, (2, 4))
    w64 = _weighted(rng, (6, 4))
    w_img = _weighted(rng, (2, 3, 6, 6))
    w_attn = _weighted(rng, (2, 7, 8))

    cases = {
        "add": (lambda r: [r.standard_normal((3, 4)), r.standard_normal((4,))],
                lambda a, b: w34(T.add(a, b))),
        "sub": (lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4))],
                lambda a, b: w34(T.sub(a, b))),
        "mul": (lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 1))],
                lambda a, b: w34(T.mul(a, b))),
        "scale": (lambda r: [r.standard_normal((3, 4))],
                  lambda a: w34(T.scale(a, 2.7))),
        "matmul": (lambda r: [r.standard_normal((2, 3, 5)),
                              r.standard_normal((5, 4))],
                   lambda a, b: w234(T.matmul(a, b))),
        "abs": (lambda r: [r.standard_normal((3, 4)) + 3.0],
                lambda a: w34(T.absolute(a))),
        "log": (lambda r: [r.uniform(0.5, 2.0, (3, 4))],
                lambda a: w34(T.log(a))),
        "exp": (lambda r: [r.standard_normal((3, 4))],
                lambda a: w34(T.exp(a))),
        "gelu": (lambda r: [r.standard_normal((3, 4))],
                 lambda a: w34(T.gelu(a))),
        "softmax": (lambda r: [r.standard_normal((3, 4))],
                    lambda a: w34(T.softmax(a, axis=-1, temperature=0.7))),
        "layer_norm": (lambda r: [r.standard_normal((3, 4)),
                                  r.uniform(0.5, 1.5, (4,)),
                                  r.standard_normal((4,))],
                       lambda a, g, b: w34(T.layer_norm(a, g, b))),
        "mean": (lambda r: [r.standard_normal((2, 3, 4))],
                 lambda a: w24(T.tmean(a, axis=1))),
        "sum": (lambda r: [r.standard_normal((2, 3, 4))],
                lambda a: w24(T.tsum(a, axis=1))),
        "transpose": (lambda r: [r.standard_normal((4, 3, 2))],
                      lambda a: w234(T.transpose(a, (2, 1, 0)))),
        "reshape": (lambda r: [r.standard_normal((6, 4))],
                    lambda a: w234(T.reshape(a, (2, 3, 4)))),
        "concat": (lambda r: [r.standard_normal((2, 4)),
                              r.standard_normal((4, 4))],
                   lambda a, b: w64(T.concat([a, b], axis=0))),
        "gather_rows": (lambda r: [r.standard_normal((5, 4))],
                        lambda a: w34(T.gather_rows(a, np.array([4, 0, 2]),
                                                    axis=0))),
        "scatter_rows": (lambda r: [r.standard_normal((3, 4))],
                         lambda a: w64(T.scatter_rows(a, np.array([5, 0, 2]),
                                                      n_total=6, axis=0))),
        "transposed_conv2d": (
            lambda r: [r.standard_normal((2, 2, 3, 3)),
                       r.standard_normal((2, 3, 2, 2))],
            lambda a, k: w_img(T.transposed_conv2d(a, k, stride=2))),
    }

    def attn_inputs(r):
        return [r.standard_normal((8, 8)) * 0.3 for _ in range(4)] + \
               [r.standard_normal((2, 7, 8)) * 0.5]

    def attn_f(wq, wk, wv, wo, x):
        part = attn.TokenPartition.from_token_mask(
            np.array([False, True, False, True, True, False, False]))
        out = attn.efficient_attention(
            x, part, {"W_q": wq, "W_k": wk, "W_v": wv, "W_o": wo}, heads=2)
        return w_attn(out)

    cases["efficient_attention"] = (attn_inputs, attn_f)
    return cases


def check_ops(seed: int = 0, trials: int = 20) -> list:
    rng = np.random.default_rng(seed)
    results = []
    for name, (make_inputs, f) in op_cases(rng).items():
        err = _check_case(make_inputs, f, rng, trials)
        results.append(CheckResult(name, err, OP_TOL))
    return results


def _tiny_state():
    ecfg = EncoderConfig(image_size=8, patch_size=4, embed_dim=16, depth=2,
                         heads=2, mlp_ratio=2)
    rcfg = ReconConfig(patch_size=4, layer_set=default_layer_set(2),
                       hidden=16, decode_channels=8)
    ccfg = ClusterConfig(n_clusters=8, embed_dim=8, hidden=16)
    tcfg = TrainerConfig(steps=4, batch_size=2, global_size=8, local_size=8,
                         n_locals=1, seed=3)
    return init_train_state(ecfg, rcfg, ccfg, tcfg)


def check_end_to_end(seed: int = 0, sample_frac: float = 0.01,
                     min_samples: int = 40) -> CheckResult:
    """FD check of the total training loss against a sampled subset of
    student parameter entries on a tiny configuration."""
    state = _tiny_state()
    rng = np.random.default_rng(seed)
    images = rng.uniform(0, 1, (2, 3, 8, 8))
    view_rng = np.random.default_rng(seed + 1)
    views = [build_views(images[i], state.tcfg, state.ecfg.patch_size,
                         view_rng, alien_source=images[1 - i])
             for i in range(2)]

    def loss_value() -> float:
        comps, _ = forward_loss(state.params, state.ecfg, state.rcfg,
                                state.ccfg, views)
        return float(L.total_loss(comps).data)

    keys = optimized_keys(state.params)
    for k in keys:
        state.params[k].zero_grad()
    comps, _ = forward_loss(state.params, state.ecfg, state.rcfg,
                            state.ccfg, views)
    L.total_loss(comps).backward()

    entries = [(k, i) for k in keys
               for i in range(state.params[k].size)]
    n_sample = max(min_samples, int(sample_frac * len(entries)))
    picks = rng.choice(len(entries), size=min(n_sample, len(entries)),
                       replace=False)
    worst = 0.0
    for pi in picks:
        k, i = entries[pi]
        flat = state.params[k].data.ravel()
        orig = flat[i]
        flat[i] = orig + FD_H
        up = loss_value()
        flat[i] = orig - FD_H
        down = loss_value()
        flat[i] = orig
        fd = (up - down) / (2 * FD_H)
        g = state.params[k].grad
        analytic = 0.0 if g is None else float(g.ravel()[i])
        worst = max(worst, abs(analytic - fd) / max(1.0, abs(fd)))
    return CheckResult("end_to_end_total_loss", worst, END_TO_END_TOL)


def run_all(seed: int = 0, trials: int = 20) -> list:
    results = check_ops(seed, trials)
    results.append(check_end_to_end(seed))
    return results
