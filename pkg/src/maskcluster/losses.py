"""Reconstruction head, shared clustering layers, and the training losses.

The teacher side of every loss is a plain numpy constant (hard-detached
supervisory signal); gradients flow only through student tensors and the
shared clustering layers on the student path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .encoder import EncoderConfig, trunc_normal
from .tensor import (
    Tensor,
    absolute,
    add,
    concat,
    gather_rows,
    gelu,
    layer_norm,
    log,
    matmul,
    mul,
    reshape,
    scale,
    softmax,
    sub,
    transpose,
    transposed_conv2d,
    tsum,
    tmean,
)


class TrainingFault(RuntimeError):
    """A loss component went non-finite during training."""


def default_layer_set(depth: int) -> tuple:
    """Layers feeding the reconstruction head: the top half of the stack,
    evenly spaced down from the last layer (1-indexed)."""
    step = max(1, round(depth / 6))
    start = math.ceil(depth / 2)
    layers = []
    l = depth
    while l >= start:
        layers.append(l)
        l -= step
    return tuple(reversed(layers))


@dataclass(frozen=True)
class ReconConfig:
    patch_size: int
    layer_set: tuple
    hidden: int = 128
    decode_channels: int = 32

    def validate(self, depth: int):
        if not self.layer_set:
            raise ValueError("reconstruction layer set must be non-empty")
        if any(l < 1 or l > depth for l in self.layer_set):
            raise ValueError(
                f"layer set {self.layer_set} references layers outside 1..{depth}")
        if depth not in self.layer_set:
            raise ValueError("layer set must include the last layer")


@dataclass(frozen=True)
class ClusterConfig:
    n_clusters: int = 64
    tau_student: float = 0.1
    tau_teacher: float = 0.04
    embed_dim: int = 64
    hidden: int = 128
    alpha1: float = 1.0
    alpha2: float = 0.1

    def __post_init__(self):
        if self.n_clusters < 2:
            raise ValueError("need at least 2 clusters")
        if not self.tau_teacher < self.tau_student:
            raise ValueError("teacher temperature must be sharper (smaller)")
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ValueError("entropy-regularizer weights must be nonnegative")

    def tau(self, role: str) -> float:
        return self.tau_teacher if role == "teacher" else self.tau_student


def init_recon_params(ecfg: EncoderConfig, rcfg: ReconConfig,
                      rng: np.random.Generator) -> dict:
    d, p, c = ecfg.embed_dim, rcfg.patch_size, ecfg.image_channels
    cd = rcfg.decode_channels
    return {
        "recon.W1": Tensor(trunc_normal(rng, (d, rcfg.hidden)), requires_grad=True),
        "recon.b1": Tensor(np.zeros(rcfg.hidden), requires_grad=True),
        "recon.W2": Tensor(trunc_normal(rng, (rcfg.hidden, cd)), requires_grad=True),
        "recon.b2": Tensor(np.zeros(cd), requires_grad=True),
        "recon.kernel": Tensor(trunc_normal(rng, (cd, c, p, p)), requires_grad=True),
        "recon.bias": Tensor(np.zeros((1, c, 1, 1)), requires_grad=True),
    }


def init_projection_params(prefix: str, ecfg: EncoderConfig, ccfg: ClusterConfig,
                           rng: np.random.Generator,
                           requires_grad: bool = True) -> dict:
    d, h, e = ecfg.embed_dim, ccfg.hidden, ccfg.embed_dim

    def param(shape, zero=False, one=False):
        data = (np.zeros(shape) if zero else np.ones(shape) if one
                else trunc_normal(rng, shape))
        return Tensor(data, requires_grad=requires_grad)

    return {
        f"{prefix}.ln.g": param((d,), one=True),
        f"{prefix}.ln.b": param((d,), zero=True),
        f"{prefix}.W1": param((d, h)),
        f"{prefix}.b1": param((h,), zero=True),
        f"{prefix}.W2": param((h, h)),
        f"{prefix}.b2": param((h,), zero=True),
        f"{prefix}.W3": param((h, e)),
        f"{prefix}.b3": param((e,), zero=True),
    }


def init_cluster_params(ccfg: ClusterConfig, rng: np.random.Generator) -> dict:
    e, k = ccfg.embed_dim, ccfg.n_clusters
    return {
        "cluster_class.W": Tensor(trunc_normal(rng, (e, k)), requires_grad=True),
        "cluster_patch.W": Tensor(trunc_normal(rng, (e, k)), requires_grad=True),
    }


def reconstruction_head(layer_outputs: list, params: dict,
                        rcfg: ReconConfig) -> Tensor:
    """Sum selected layers' patch tokens, decode back to pixel space."""
    depth = len(layer_outputs)
    rcfg.validate(depth)
    b, n_plus_1, d = layer_outputs[0].shape
    n = n_plus_1 - 1
    patch_idx = np.arange(1, n + 1)
    total = None
    for l in rcfg.layer_set:
        part = gather_rows(layer_outputs[l - 1], patch_idx, axis=1)
        total = part if total is None else add(total, part)
    h = gelu(add(matmul(total, params["recon.W1"]), params["recon.b1"]))
    tokens = add(matmul(h, params["recon.W2"]), params["recon.b2"])
    side = int(round(n ** 0.5))
    grid = transpose(reshape(tokens, (b, side, side, rcfg.decode_channels)),
                     (0, 3, 1, 2))
    img = transposed_conv2d(grid, params["recon.kernel"], rcfg.patch_size)
    return add(img, params["recon.bias"])


def cluster_head(embedding: Tensor, which: str, role: str, params: dict,
                 ccfg: ClusterConfig) -> Tensor:
    """Project an embedding and softmax over the shared clustering layer
    at the role-specific temperature."""
    prefix = f"{role}.proj_{which}"
    h = layer_norm(embedding, params[f"{prefix}.ln.g"], params[f"{prefix}.ln.b"])
    h = gelu(add(matmul(h, params[f"{prefix}.W1"]), params[f"{prefix}.b1"]))
    h = gelu(add(matmul(h, params[f"{prefix}.W2"]), params[f"{prefix}.b2"]))
    z = add(matmul(h, params[f"{prefix}.W3"]), params[f"{prefix}.b3"])
    logits = matmul(z, params[f"cluster_{which}.W"])
    return softmax(logits, axis=-1, temperature=ccfg.tau(role))


# -- loss terms ---------------------------------------------------------

def cross_entropy_sum(target: np.ndarray, pred: Tensor) -> Tensor:
    """Sum over all rows of H(target, pred) = -sum_k t_k log s_k."""
    return scale(tsum(mul(Tensor(target), log(pred))), -1.0)


def l_mask(clean: list, recons: list, masks: list,
           normalize: bool = True) -> Tensor:
    """Masked-pixel l1 reconstruction loss over both global crops.

    `clean` and `masks` are numpy constants ((B,C,H,W) and (B,H,W) bool);
    `recons` are tensors. With normalize=True the raw sum is divided by the
    masked pixel count so the magnitude is resolution independent.
    """
    total = None
    n_masked = 0
    for x, r, m in zip(clean, recons, masks):
        mask = m[:, None, :, :].astype(np.float64)
        n_masked += int(m.sum())
        term = tsum(mul(absolute(sub(r, Tensor(x))), Tensor(mask)))
        total = term if total is None else add(total, term)
    if normalize:
        total = scale(total, 1.0 / max(1, n_masked))
    return total


def l_clust_class(teacher: dict, student: dict, locals_: list) -> Tensor:
    """Class-level clustering cross entropy: crossed global pairs plus both
    teachers against every local crop, averaged by (M+2)*B."""
    b = teacher["g1"].shape[0]
    m = len(locals_)
    total = add(cross_entropy_sum(teacher["g1"], student["g2"]),
                cross_entropy_sum(teacher["g2"], student["g1"]))
    for loc in locals_:
        total = add(total, cross_entropy_sum(teacher["g1"], loc))
        total = add(total, cross_entropy_sum(teacher["g2"], loc))
    return scale(total, 1.0 / ((m + 2) * b))


def l_clust_patch(teacher: dict, student: dict) -> Tensor:
    """Patch-level clustering cross entropy on same-view pairs, averaged
    by 2*N*B. Local crops are excluded."""
    b, n, _ = teacher["g1"].shape
    total = add(cross_entropy_sum(teacher["g1"], student["g1"]),
                cross_entropy_sum(teacher["g2"], student["g2"]))
    return scale(total, 1.0 / (2 * n * b))


def _entropy_of_mean(dists: Tensor) -> Tensor:
    """dists: (rows, K); entropy of the row-mean distribution."""
    mean = tmean(dists, axis=0)
    return scale(tsum(mul(mean, log(mean))), -1.0)


def memax(student_class: list, student_patch: list,
          alpha1: float, alpha2: float) -> Tensor:
    """Negative mean-entropy regularizer over student assignments."""
    flat_class = concat([reshape(p, (-1, p.shape[-1])) for p in student_class],
                        axis=0)
    h_class = _entropy_of_mean(flat_class)
    flat_patch = concat([reshape(p, (-1, p.shape[-1])) for p in student_patch],
                        axis=0)
    h_patch = _entropy_of_mean(flat_patch)
    return scale(add(scale(h_class, alpha1), scale(h_patch, alpha2)), -1.0)


def total_loss(components: dict) -> Tensor:
    """Plain sum of the four loss terms; rejects non-finite components."""
    total = None
    for name, term in components.items():
        if not np.all(np.isfinite(term.data)):
            raise TrainingFault(f"loss component '{name}' is non-finite")
        total = term if total is None else add(total, term)
    return total
