"""Teacher-student training orchestration.

Builds multi-crop view bundles, runs the teacher on clean globals (no
gradients), the student on corrupted globals (split masked attention) and
local crops (dense attention), assembles the four-term loss, and applies
AdamW with warmup/cosine schedules, global-norm clipping, and EMA teacher
updates.
"""

from __future__ import annotations

import json
import math
import os
import zlib
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from . import attention as attn
from . import losses as L
from .encoder import EncoderConfig, forward_views, init_encoder_params
from .losses import ClusterConfig, ReconConfig, TrainingFault, default_layer_set
from .masking import CorruptionPolicy, corrupt, sample_block_mask
from .tensor import Tensor, concat, gather_rows, reshape


@dataclass(frozen=True)
class TrainerConfig:
    steps: int = 200
    batch_size: int = 16
    peak_lr: float = 1e-3
    weight_decay: float = 1e-4
    clip_norm: float = 3.0
    warmup_frac: float = 0.05
    ema_start: float = 0.996
    ema_end: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    n_locals: int = 2
    global_size: int = 32
    local_size: int = 16
    mask_ratio: float = 0.5
    seed: int = 0

    @property
    def warmup_steps(self) -> int:
        return max(1, int(round(self.warmup_frac * self.steps)))


@dataclass
class ViewBatch:
    """Per-image crop bundle: 2 clean + 2 corrupted globals, M locals."""

    g_clean: list
    g_corrupt: list
    masks: list
    locals_: list


# -- augmentations ------------------------------------------------------

def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    c, h, w = img.shape
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def random_resized_crop(img: np.ndarray, out_size: int,
                        rng: np.random.Generator,
                        scale=(0.3, 1.0)) -> np.ndarray:
    c, h, w = img.shape
    frac = rng.uniform(*scale)
    aspect = rng.uniform(3.0 / 4.0, 4.0 / 3.0)
    area = frac * h * w
    cw = int(np.clip(round(math.sqrt(area * aspect)), 1, w))
    ch = int(np.clip(round(math.sqrt(area / aspect)), 1, h))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return _resize_bilinear(img[:, top:top + ch, left:left + cw],
                            out_size, out_size)


def augment(img: np.ndarray, out_size: int, rng: np.random.Generator) -> np.ndarray:
    """Random resized crop + flip + color jitter + occasional blur."""
    view = random_resized_crop(img, out_size, rng)
    if rng.random() < 0.5:
        view = view[:, :, ::-1].copy()
    gain = rng.uniform(0.8, 1.2, size=(3, 1, 1))
    shift = rng.uniform(-0.1, 0.1)
    view = np.clip(view * gain + shift, 0.0, 1.0)
    if rng.random() < 0.5:
        sigma = rng.uniform(0.1, 1.0)
        view = gaussian_filter(view, sigma=(0, sigma, sigma))
    return view


def build_views(image: np.ndarray, tcfg: TrainerConfig, patch_size: int,
                rng: np.random.Generator,
                alien_source: Optional[np.ndarray] = None,
                policy: Optional[CorruptionPolicy] = None) -> ViewBatch:
    """Sample the full multi-crop bundle for one image."""
    if image.ndim != 3 or min(image.shape[1:]) < 2:
        raise ValueError(f"degenerate image shape {image.shape}")
    if policy is None:
        policy = (CorruptionPolicy() if alien_source is not None
                  else CorruptionPolicy(noise=0.5, zeros=0.5, alien=0.0))
    gs = tcfg.global_size // patch_size
    g_clean, g_corrupt, masks = [], [], []
    for _ in range(2):
        view = augment(image, tcfg.global_size, rng)
        mask = sample_block_mask(gs, gs, tcfg.mask_ratio, rng,
                                 patch_size=patch_size)
        alien = None
        if alien_source is not None:
            alien = random_resized_crop(alien_source, tcfg.global_size, rng)
        g_clean.append(view)
        g_corrupt.append(corrupt(view, mask, policy, alien, rng))
        masks.append(mask)
    locals_ = [augment(image, tcfg.local_size, rng)
               for _ in range(tcfg.n_locals)]
    return ViewBatch(g_clean, g_corrupt, masks, locals_)


# -- model parameters ---------------------------------------------------

def init_model_params(ecfg: EncoderConfig, rcfg: ReconConfig,
                      ccfg: ClusterConfig, rng: np.random.Generator) -> dict:
    """Flat parameter dict: student.*, teacher.* (EMA copy), recon.* and
    the shared cluster_* layers."""
    params: dict = {}
    for k, t in init_encoder_params(ecfg, rng).items():
        params[f"student.enc.{k}"] = t
    params.update(L.init_projection_params("student.proj_class", ecfg, ccfg, rng))
    params.update(L.init_projection_params("student.proj_patch", ecfg, ccfg, rng))
    params.update(L.init_recon_params(ecfg, rcfg, rng))
    params.update(L.init_cluster_params(ccfg, rng))
    for key in [k for k in params if k.startswith("student.")]:
        params["teacher." + key[len("student."):]] = Tensor(
            params[key].data.copy())
    return params


def optimized_keys(params: dict) -> list:
    return sorted(k for k in params if not k.startswith("teacher."))


def ema_pairs(params: dict) -> list:
    return [(k, "teacher." + k[len("student."):])
            for k in sorted(params) if k.startswith("student.")]


def _decays(key: str, t: Tensor) -> bool:
    """Weight decay applies to matrices/kernels only; biases, norm params,
    the class token and positional table are exempt."""
    if t.ndim < 2:
        return False
    return not ("cls" in key or "pos" in key or key.endswith("bias"))


@dataclass
class TrainState:
    params: dict
    moments_m: dict
    moments_v: dict
    step: int
    rng: np.random.Generator
    ecfg: EncoderConfig
    rcfg: ReconConfig
    ccfg: ClusterConfig
    tcfg: TrainerConfig


def init_train_state(ecfg: EncoderConfig, rcfg: ReconConfig,
                     ccfg: ClusterConfig, tcfg: TrainerConfig) -> TrainState:
    if tcfg.global_size != ecfg.image_size:
        raise ValueError("trainer global crop size must match encoder config")
    rng = np.random.default_rng(tcfg.seed)
    params = init_model_params(ecfg, rcfg, ccfg, rng)
    m = {k: np.zeros_like(params[k].data) for k in optimized_keys(params)}
    v = {k: np.zeros_like(params[k].data) for k in optimized_keys(params)}
    return TrainState(params, m, v, 0, rng, ecfg, rcfg, ccfg, tcfg)


def default_configs(tcfg: TrainerConfig,
                    ecfg: Optional[EncoderConfig] = None) -> tuple:
    if ecfg is None:
        ecfg = EncoderConfig(image_size=tcfg.global_size)
    rcfg = ReconConfig(patch_size=ecfg.patch_size,
                       layer_set=default_layer_set(ecfg.depth))
    ccfg = ClusterConfig()
    return ecfg, rcfg, ccfg


# -- schedules, optimizer, EMA ------------------------------------------

def schedules(step: int, total_steps: int, warmup_steps: int,
              peak_lr: float, ema_start: float, ema_end: float) -> tuple:
    """(learning rate, EMA momentum) at a given step."""
    if step < warmup_steps:
        lr = peak_lr * step / warmup_steps
    else:
        span = max(1, total_steps - warmup_steps)
        lr = peak_lr * 0.5 * (1 + math.cos(math.pi * (step - warmup_steps) / span))
    lam = ema_end - (ema_end - ema_start) * 0.5 * (
        1 + math.cos(math.pi * min(step, total_steps) / max(1, total_steps)))
    return lr, lam


def global_grad_norm(params: dict, keys: list) -> float:
    total = 0.0
    for k in keys:
        g = params[k].grad
        if g is not None:
            total += float((g * g).sum())
    return math.sqrt(total)


def clip_grads(params: dict, keys: list, clip: float) -> float:
    norm = global_grad_norm(params, keys)
    if norm > clip:
        factor = clip / norm
        for k in keys:
            if params[k].grad is not None:
                params[k].grad *= factor
    return norm


def adamw_step(params: dict, m: dict, v: dict, keys: list, step: int,
               lr: float, wd: float, clip: float,
               beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8) -> float:
    """One decoupled-weight-decay Adam update; `step` is 1-based.
    Returns the pre-clip global gradient norm."""
    norm = clip_grads(params, keys, clip)
    bc1 = 1 - beta1 ** step
    bc2 = 1 - beta2 ** step
    for k in keys:
        p = params[k]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m[k] = beta1 * m[k] + (1 - beta1) * g
        v[k] = beta2 * v[k] + (1 - beta2) * g * g
        update = (m[k] / bc1) / (np.sqrt(v[k] / bc2) + eps)
        if wd > 0 and _decays(k, p):
            update = update + wd * p.data
        p.data = p.data - lr * update
    return norm


def ema_update(params: dict, lam: float):
    """teacher <- lam * teacher + (1 - lam) * student, per parameter."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"EMA momentum must be in [0, 1], got {lam}")
    for s_key, t_key in ema_pairs(params):
        t = params[t_key]
        t.data = lam * t.data + (1 - lam) * params[s_key].data


# -- forward passes ------------------------------------------------------

def _detached(params: dict) -> dict:
    return {k: t.detach() for k, t in params.items()}


def _subdict(params: dict, prefix: str) -> dict:
    n = len(prefix)
    return {k[n:]: t for k, t in params.items() if k.startswith(prefix)}


def _cls_embedding(last_layer: Tensor) -> Tensor:
    b, _, d = last_layer.shape
    return reshape(gather_rows(last_layer, np.array([0]), axis=1), (b, d))


def _patch_embeddings(last_layer: Tensor) -> Tensor:
    n = last_layer.shape[1] - 1
    return gather_rows(last_layer, np.arange(1, n + 1), axis=1)


def teacher_forward(params: dict, ecfg: EncoderConfig, ccfg: ClusterConfig,
                    g_clean: dict) -> tuple:
    """Clean-global teacher pass; returns hard-detached class and patch
    cluster assignments as numpy arrays."""
    det = _detached(params)
    enc = _subdict(det, "teacher.enc.")
    t_class, t_patch = {}, {}
    for g, imgs in g_clean.items():
        last = forward_views(Tensor(imgs), enc, ecfg)[-1]
        t_class[g] = L.cluster_head(_cls_embedding(last), "class", "teacher",
                                    det, ccfg).data
        t_patch[g] = L.cluster_head(_patch_embeddings(last), "patch", "teacher",
                                    det, ccfg).data
    return t_class, t_patch


def student_masked_forward(params: dict, ecfg: EncoderConfig,
                           g_corrupt: dict, masks: dict) -> dict:
    """Split-attention pass over both corrupted globals.

    Images whose masks have the same masked-token count share one batched
    encoder pass; outputs are re-assembled in original batch order.
    """
    enc = _subdict(params, "student.enc.")
    layer_outputs = {}
    for g in g_corrupt:
        b = g_corrupt[g].shape[0]
        parts = []
        for i in range(b):
            token_mask = np.concatenate([[False], masks[g][i].token_mask()])
            parts.append(attn.TokenPartition.from_token_mask(token_mask))
        groups: dict = {}
        for i, p in enumerate(parts):
            groups.setdefault(p.n_masked, []).append(i)
        group_outputs = []
        order = []
        for count in sorted(groups):
            idx = groups[count]
            order.extend(idx)
            outs = forward_views(Tensor(g_corrupt[g][idx]), enc, ecfg,
                                 [parts[i] for i in idx])
            group_outputs.append(outs)
        inverse = np.argsort(np.asarray(order))
        depth = len(group_outputs[0])
        merged = []
        for l in range(depth):
            stacked = concat([go[l] for go in group_outputs], axis=0)
            merged.append(gather_rows(stacked, inverse, axis=0))
        layer_outputs[g] = merged
    return layer_outputs


def forward_loss(params: dict, ecfg: EncoderConfig, rcfg: ReconConfig,
                 ccfg: ClusterConfig, views: list) -> tuple:
    """Assemble all four loss terms for a batch of ViewBatch bundles.

    Returns (components dict of scalar Tensors, student class dists as a
    stacked numpy array for the collapse monitor).
    """
    n_locals = len(views[0].locals_)
    g_clean = {g: np.stack([vb.g_clean[vi] for vb in views])
               for vi, g in enumerate(("g1", "g2"))}
    g_corrupt = {g: np.stack([vb.g_corrupt[vi] for vb in views])
                 for vi, g in enumerate(("g1", "g2"))}
    masks = {g: [vb.masks[vi] for vb in views]
             for vi, g in enumerate(("g1", "g2"))}

    # teacher: clean globals, no gradient graph
    t_class, t_patch = teacher_forward(params, ecfg, ccfg, g_clean)

    # student: corrupted globals through the split-attention branch
    layer_outputs = student_masked_forward(params, ecfg, g_corrupt, masks)
    s_class, s_patch, recons = {}, {}, []
    for g in ("g1", "g2"):
        last = layer_outputs[g][-1]
        s_class[g] = L.cluster_head(_cls_embedding(last), "class", "student",
                                    params, ccfg)
        s_patch[g] = L.cluster_head(_patch_embeddings(last), "patch", "student",
                                    params, ccfg)
        recons.append(L.reconstruction_head(layer_outputs[g], params, rcfg))

    # student: local crops, dense attention
    enc_s = _subdict(params, "student.enc.")
    p_locals = []
    for mi in range(n_locals):
        loc = np.stack([vb.locals_[mi] for vb in views])
        last = forward_views(Tensor(loc), enc_s, ecfg)[-1]
        p_locals.append(L.cluster_head(_cls_embedding(last), "class", "student",
                                       params, ccfg))

    pixel_masks = {g: np.stack([mk.pixel_mask for mk in masks[g]])
                   for g in ("g1", "g2")}
    components = {
        "l_mask": L.l_mask([g_clean["g1"], g_clean["g2"]], recons,
                           [pixel_masks["g1"], pixel_masks["g2"]]),
        "l_clust_class": L.l_clust_class(t_class, s_class, p_locals),
        "l_clust_patch": L.l_clust_patch(t_patch, s_patch),
        "l_memax": L.memax([s_class["g1"], s_class["g2"], *p_locals],
                           [s_patch["g1"], s_patch["g2"]],
                           ccfg.alpha1, ccfg.alpha2),
    }
    class_dists = np.concatenate(
        [s_class["g1"].data, s_class["g2"].data]
        + [p.data for p in p_locals], axis=0)
    return components, class_dists


def train_step(state: TrainState, images: np.ndarray) -> dict:
    """One optimization step over a batch of raw images.

    Returns the logged metrics for the step; the state is updated in place.
    """
    s = state
    b = images.shape[0]
    tcfg, ecfg, ccfg, rcfg = s.tcfg, s.ecfg, s.ccfg, s.rcfg
    alien_perm = s.rng.permutation(b)
    views = [build_views(images[i], tcfg, ecfg.patch_size, s.rng,
                         alien_source=images[alien_perm[i]])
             for i in range(b)]

    components, class_dists = forward_loss(s.params, ecfg, rcfg, ccfg, views)
    total = L.total_loss(components)

    keys = optimized_keys(s.params)
    for k in keys:
        s.params[k].zero_grad()
    total.backward()

    lr, lam = schedules(s.step, tcfg.steps, tcfg.warmup_steps,
                        tcfg.peak_lr, tcfg.ema_start, tcfg.ema_end)
    adamw_step(s.params, s.moments_m, s.moments_v, keys, s.step + 1,
               lr, tcfg.weight_decay, tcfg.clip_norm,
               tcfg.beta1, tcfg.beta2, tcfg.eps)
    ema_update(s.params, lam)
    s.step += 1

    mean_dist = class_dists.mean(axis=0)
    entropy_mean = float(-(mean_dist * np.log(np.maximum(mean_dist, 1e-12))).sum())

    metrics = {name: float(t.data) for name, t in components.items()}
    metrics.update(total=float(total.data), lr=lr, ema=lam,
                   entropy_mean=entropy_mean)
    return metrics


METRIC_COLUMNS = ("step", "l_mask", "l_clust_class", "l_clust_patch",
                  "l_memax", "total", "lr", "ema", "entropy_mean")


def pretrain(state: TrainState, images: np.ndarray, out_dir: str,
             log_every: int = 1) -> list:
    """Run the configured number of steps; writes metrics.csv and a final
    checkpoint under `out_dir`. Returns the metric rows."""
    os.makedirs(out_dir, exist_ok=True)
    ckpt_dir = os.path.join(out_dir, "checkpoint")
    checkpoint_save(state, ckpt_dir)
    rows = []
    csv_path = os.path.join(out_dir, "metrics.csv")
    with open(csv_path, "w") as fh:
        fh.write(",".join(METRIC_COLUMNS) + "\n")
        for _ in range(state.tcfg.steps):
            batch_idx = state.rng.integers(0, images.shape[0],
                                           size=state.tcfg.batch_size)
            try:
                metrics = train_step(state, images[batch_idx])
            except TrainingFault as exc:
                # the fault is raised before any parameter update, so the
                # in-memory state is still the last good one
                checkpoint_save(state, ckpt_dir)
                raise TrainingFault(
                    f"{exc}; last good checkpoint at {ckpt_dir}") from exc
            metrics["step"] = state.step
            rows.append(metrics)
            fh.write(",".join(repr(metrics[c]) if c != "step" else str(metrics[c])
                              for c in METRIC_COLUMNS) + "\n")
    checkpoint_save(state, ckpt_dir)
    return rows


# -- checkpointing -------------------------------------------------------

CHECKPOINT_MAGIC = "maskcluster-checkpoint v1"


def _state_tensors(state: TrainState) -> list:
    entries = [(f"param.{k}", state.params[k].data)
               for k in sorted(state.params)]
    entries += [(f"adam_m.{k}", state.moments_m[k])
                for k in sorted(state.moments_m)]
    entries += [(f"adam_v.{k}", state.moments_v[k])
                for k in sorted(state.moments_v)]
    return entries


def checkpoint_save(state: TrainState, path: str):
    """Text manifest (name, shape, offset, checksum) + raw little-endian
    float64 payload."""
    os.makedirs(path, exist_ok=True)
    entries = _state_tensors(state)
    lines = [CHECKPOINT_MAGIC,
             f"step {state.step}",
             "rng " + json.dumps(state.rng.bit_generator.state, sort_keys=True),
             "config " + json.dumps({
                 "encoder": asdict(state.ecfg),
                 "recon": asdict(state.rcfg),
                 "cluster": asdict(state.ccfg),
                 "trainer": asdict(state.tcfg),
             }, sort_keys=True)]
    offset = 0
    blobs = []
    for name, arr in entries:
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        shape = "x".join(str(d) for d in arr.shape) or "scalar"
        lines.append(f"tensor {name} {shape} {offset} {zlib.crc32(raw):08x}")
        blobs.append(raw)
        offset += len(raw)
    with open(os.path.join(path, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(path, "payload.bin"), "wb") as fh:
        for raw in blobs:
            fh.write(raw)


def checkpoint_load(path: str) -> TrainState:
    """Rebuild a TrainState; refuses on version mismatch or checksum
    failure, naming the offending manifest entries."""
    with open(os.path.join(path, "manifest.txt")) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if lines[0] != CHECKPOINT_MAGIC:
        raise ValueError(
            f"checkpoint version mismatch: got '{lines[0]}', "
            f"expected '{CHECKPOINT_MAGIC}'")
    step = int(lines[1].split(" ", 1)[1])
    rng_state = json.loads(lines[2].split(" ", 1)[1])
    cfg = json.loads(lines[3].split(" ", 1)[1])
    ecfg = EncoderConfig(**cfg["encoder"])
    rcfg = ReconConfig(**{**cfg["recon"],
                          "layer_set": tuple(cfg["recon"]["layer_set"])})
    ccfg = ClusterConfig(**cfg["cluster"])
    tcfg = TrainerConfig(**cfg["trainer"])
    with open(os.path.join(path, "payload.bin"), "rb") as fh:
        payload = fh.read()
    params, m_mom, v_mom = {}, {}, {}
    bad = []
    for line in lines[4:]:
        _, name, shape_s, offset_s, crc_s = line.split(" ")
        shape = () if shape_s == "scalar" else tuple(
            int(d) for d in shape_s.split("x"))
        count = int(np.prod(shape)) if shape else 1
        offset = int(offset_s)
        raw = payload[offset:offset + count * 8]
        if f"{zlib.crc32(raw):08x}" != crc_s:
            bad.append(name)
            continue
        arr = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        kind, key = name.split(".", 1)
        if kind == "param":
            params[key] = Tensor(arr, requires_grad=not key.startswith("teacher."))
        elif kind == "adam_m":
            m_mom[key] = arr
        else:
            v_mom[key] = arr
    if bad:
        raise ValueError(f"checkpoint checksum failure for: {', '.join(bad)}")
    rng = np.random.default_rng()
    rng.bit_generator.state = rng_state
    return TrainState(params, m_mom, v_mom, step, rng, ecfg, rcfg, ccfg, tcfg)
