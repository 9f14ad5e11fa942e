"""Acceptance gate: one test per release criterion, each printing a single
PASS/FAIL line. Run with `pytest tests/test_acceptance.py -s` to see the
lines as they complete; the training-sanity criterion is the long one."""

import time

import numpy as np
import pytest

from maskcluster import attention as A
from maskcluster import gradcheck as G
from maskcluster import losses as L
from maskcluster.bench import bench_attention
from maskcluster.data import knn_probe, make_shapes
from maskcluster.masking import CorruptionPolicy, corrupt, sample_block_mask
from maskcluster.tensor import Tensor
from maskcluster.trainer import (
    TrainerConfig,
    checkpoint_load,
    checkpoint_save,
    default_configs,
    ema_update,
    init_train_state,
    pretrain,
    train_step,
)

from test_attention import masked_dense_oracle, random_partition, random_weights


def report(num: int, name: str, passed: bool, detail: str) -> bool:
    print(f"\n[criterion {num:2d}] {'PASS' if passed else 'FAIL'}  "
          f"{name}: {detail}")
    return passed


def test_criterion_1_attention_oracle_equivalence():
    t0 = time.time()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        heads = int(rng.choice([1, 2, 4]))
        n = int(rng.integers(2, 65))
        d = heads * int(rng.integers(2, 9))
        x = rng.normal(size=(int(rng.integers(1, 4)), n, d))
        part = random_partition(n, rng)
        weights = random_weights(d, rng)
        got = A.efficient_attention(Tensor(x), part, weights, heads).data
        worst = max(worst, np.abs(
            got - masked_dense_oracle(x, part, weights, heads)).max())
    elapsed = time.time() - t0
    ok = worst <= 1e-6 and elapsed < 10
    assert report(1, "attention oracle equivalence",
                  ok, f"max abs diff {worst:.3e} over 100 instances "
                      f"in {elapsed:.1f}s")


def test_criterion_2_degenerate_equality():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(20):
        heads = int(rng.choice([1, 2, 3]))
        n = int(rng.integers(2, 49))
        d = heads * int(rng.integers(2, 8))
        x = Tensor(rng.normal(size=(2, n, d)))
        weights = random_weights(d, rng)
        part = random_partition(n, rng, m=0)
        diff = np.abs(A.efficient_attention(x, part, weights, heads).data
                      - A.standard_attention(x, weights, heads).data).max()
        worst = max(worst, diff)
    assert report(2, "m=0 equals standard attention",
                  worst <= 1e-10, f"max abs diff {worst:.3e} over 20 instances")


def test_criterion_3_complexity_accountant():
    rng = np.random.default_rng(0)
    checked = []
    for n, m in [(197, 98), (197, 0), (197, 147), (65, 32), (17, 4)]:
        d, heads = 24, 2
        masked = np.zeros(n, dtype=bool)
        masked[rng.choice(np.arange(1, n), size=m, replace=False)] = True
        part = A.TokenPartition.from_token_mask(masked)
        A.efficient_attention(Tensor(rng.normal(size=(1, n, d))),
                              part, random_weights(d, rng), heads)
        split, dense = A.score_entry_count(n, m)
        checked.append(A.stats.last_entries_per_head == split == n * (n - m))
    headline = A.score_entry_count(197, 98) == (19503, 38809)
    ok = all(checked) and headline
    assert report(3, "score-entry accounting n*(n-m)",
                  ok, f"all configs exact; (197,98) -> "
                      f"{A.score_entry_count(197, 98)[0]} vs "
                      f"{A.score_entry_count(197, 98)[1]} dense")


def test_criterion_4_throughput_trend():
    t0 = time.time()
    reps = bench_attention(n_tokens=197, ratios=(0.0, 0.25, 0.5, 0.75),
                           repeats=25, warmup=3)
    elapsed = time.time() - t0
    ips = [r.images_per_second for r in reps.rows]
    nondecreasing = all(a <= b for a, b in zip(ips, ips[1:]))
    speedup = reps.rows[-1].speedup_vs_ratio0
    ok = nondecreasing and speedup >= 1.10 and elapsed < 120
    assert report(4, "masked-attention throughput trend", ok,
                  f"imgs/sec {['%.1f' % v for v in ips]}, "
                  f"0.75-ratio speedup {speedup:.2f}x in {elapsed:.0f}s")


def test_criterion_5_gradient_suite():
    t0 = time.time()
    results = G.run_all(seed=0, trials=20)
    elapsed = time.time() - t0
    bad = [r for r in results if not r.passed]
    worst = max(r.max_rel_err for r in results)
    ok = not bad and elapsed < 300
    assert report(5, "finite-difference gradient suite", ok,
                  f"{len(results) - len(bad)}/{len(results)} checks, "
                  f"worst rel err {worst:.3e} in {elapsed:.0f}s")


def test_criterion_6_loss_identities():
    rng = np.random.default_rng(5)

    def dist(shape):
        x = rng.uniform(0.1, 1.0, size=shape)
        return x / x.sum(-1, keepdims=True)

    p = dist((8, 16))
    ce_self = L.cross_entropy_sum(p, Tensor(p)).item()
    entropy = -(p * np.log(p)).sum()
    id_ok = abs(ce_self - entropy) <= 1e-9

    k, a1, a2 = 16, 1.0, 0.1
    mm_ok = True
    for _ in range(25):
        val = L.memax([Tensor(dist((6, k)))], [Tensor(dist((2, 5, k)))], a1, a2)
        mm_ok &= -(a1 + a2) * np.log(k) - 1e-9 <= val.item() <= 1e-12

    x = rng.uniform(size=(2, 3, 8, 8))
    empty = np.zeros((2, 8, 8), dtype=bool)
    full = np.ones((2, 8, 8), dtype=bool)
    lm_ok = (L.l_mask([x], [Tensor(rng.uniform(size=x.shape))], [empty]).item()
             == 0.0
             and L.l_mask([x], [Tensor(x.copy())], [full]).item() == 0.0)

    b, n, m = 3, 4, 2
    teacher = {g: dist((b, k)) for g in ("g1", "g2")}
    student = {g: dist((b, k)) for g in ("g1", "g2")}
    locs = [dist((b, k)) for _ in range(m)]
    ce = lambda t, s: -(t * np.log(s)).sum()
    want = (ce(teacher["g1"], student["g2"]) + ce(teacher["g2"], student["g1"])
            + sum(ce(teacher[g], l) for g in ("g1", "g2") for l in locs))
    want /= (m + 2) * b
    got = L.l_clust_class(teacher, {g: Tensor(student[g]) for g in student},
                          [Tensor(l) for l in locs]).item()
    cls_ok = abs(got - want) <= 1e-10
    t_p = {g: dist((b, n, k)) for g in ("g1", "g2")}
    s_p = {g: dist((b, n, k)) for g in ("g1", "g2")}
    want_p = (ce(t_p["g1"], s_p["g1"]) + ce(t_p["g2"], s_p["g2"])) / (2 * n * b)
    got_p = L.l_clust_patch(t_p, {g: Tensor(s_p[g]) for g in s_p}).item()
    ptc_ok = abs(got_p - want_p) <= 1e-10

    ok = id_ok and mm_ok and lm_ok and cls_ok and ptc_ok
    assert report(6, "loss identities and brute-force oracles", ok,
                  f"H(p,p) err {abs(ce_self - entropy):.2e}, memax bounded, "
                  f"l_mask zeros exact, class/patch oracle errs "
                  f"{abs(got - want):.2e}/{abs(got_p - want_p):.2e}")


def test_criterion_7_teacher_isolation_and_ema():
    tcfg = TrainerConfig(steps=4, batch_size=2, n_locals=1, global_size=8,
                         local_size=8, seed=0)
    from maskcluster.encoder import EncoderConfig
    ecfg = EncoderConfig(image_size=8, patch_size=4, embed_dim=8, depth=2,
                         heads=2, mlp_ratio=2)
    rcfg = L.ReconConfig(patch_size=4, layer_set=(1, 2), hidden=16,
                         decode_channels=6)
    ccfg = L.ClusterConfig(n_clusters=8, embed_dim=8, hidden=16)
    state = init_train_state(ecfg, rcfg, ccfg, tcfg)
    images = np.random.default_rng(1).uniform(size=(2, 3, 8, 8))
    train_step(state, images)
    leaks = [k for k, t in state.params.items()
             if k.startswith("teacher.")
             and t.grad is not None and np.any(t.grad != 0)]

    s = Tensor(np.array([0.0]), requires_grad=True)
    t = Tensor(np.array([1.0]))
    params = {"student.w": s, "teacher.w": t}
    lam, ref, exact = 0.97, 1.0, True
    for step in range(10):
        sval = float(step) * 0.3
        s.data = np.array([sval])
        ema_update(params, lam)
        ref = lam * ref + (1 - lam) * sval
        exact &= t.data[0] == ref
    ok = not leaks and exact
    assert report(7, "teacher isolation + EMA closed form", ok,
                  f"{len(leaks)} teacher grads leaked, "
                  f"10-step EMA {'exact' if exact else 'diverged'}")


@pytest.mark.slow
def test_criterion_8_training_sanity():
    results = []
    for seed in (0, 1, 2):
        tcfg = TrainerConfig(steps=2000, batch_size=16, seed=seed)
        ecfg, rcfg, ccfg = default_configs(tcfg)
        state = init_train_state(ecfg, rcfg, ccfg, tcfg)
        images, labels = make_shapes(512, 32, seed=seed)
        rows = pretrain(state, images, f"/tmp/maskcluster-sanity-{seed}")
        k = len(rows) // 10
        first = float(np.mean([r["total"] for r in rows[:k]]))
        last = float(np.mean([r["total"] for r in rows[-k:]]))
        min_ent = min(r["entropy_mean"] for r in rows)
        acc = knn_probe(state.params, ecfg, images[:400], labels[:400],
                        images[400:], labels[400:], k=5)
        passed = (last <= 0.70 * first
                  and min_ent >= 0.5 * np.log(ccfg.n_clusters)
                  and acc >= 0.20)
        results.append((seed, passed, last / first, min_ent, acc))
    n_pass = sum(p for _, p, *_ in results)
    detail = "; ".join(
        f"seed {s}: loss ratio {r:.2f}, min entropy {e:.2f}, knn {a:.2f}"
        f" ({'ok' if p else 'fail'})" for s, p, r, e, a in results)
    assert report(8, "desk-scale training sanity (2 of 3 seeds)",
                  n_pass >= 2, detail)


def test_criterion_9_masking_statistics():
    fracs = []
    clean = True
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        mask = sample_block_mask(14, 14, 0.5, rng)
        fracs.append(mask.masked_fraction)
        if seed < 100:  # corruption identity checked on a subsample
            img = rng.uniform(size=(3, 14, 14))
            out = corrupt(img, mask,
                          CorruptionPolicy(noise=0.5, zeros=0.5, alien=0.0),
                          rng=rng)
            keep = ~mask.pixel_mask
            clean &= out[:, keep].tobytes() == img[:, keep].tobytes()
    mean = float(np.mean(fracs))
    ok = 0.50 <= mean <= 0.55 and clean
    assert report(9, "masking statistics", ok,
                  f"mean masked fraction {mean:.4f} over 1000 seeds, "
                  f"unmasked pixels byte-identical: {clean}")


def test_criterion_10_reproducibility(tmp_path):
    from maskcluster.encoder import EncoderConfig
    tcfg = TrainerConfig(steps=6, batch_size=2, n_locals=1, global_size=8,
                         local_size=8, seed=11)
    ecfg = EncoderConfig(image_size=8, patch_size=4, embed_dim=8, depth=2,
                         heads=2, mlp_ratio=2)
    rcfg = L.ReconConfig(patch_size=4, layer_set=(1, 2), hidden=16,
                         decode_channels=6)
    ccfg = L.ClusterConfig(n_clusters=8, embed_dim=8, hidden=16)
    images = np.random.default_rng(2).uniform(size=(8, 3, 8, 8))

    state = init_train_state(ecfg, rcfg, ccfg, tcfg)
    train_step(state, images[:2])
    checkpoint_save(state, str(tmp_path / "ckpt"))
    resumed = checkpoint_load(str(tmp_path / "ckpt"))
    bitwise = all(train_step(state, images[2:4]) ==
                  train_step(resumed, images[2:4]) for _ in range(3))

    csvs = []
    for run in ("a", "b"):
        st = init_train_state(ecfg, rcfg, ccfg, tcfg)
        pretrain(st, images, str(tmp_path / run))
        csvs.append((tmp_path / run / "metrics.csv").read_bytes())
    same_csv = csvs[0] == csvs[1]
    ok = bitwise and same_csv
    assert report(10, "reproducibility", ok,
                  f"resume losses bit-identical: {bitwise}, "
                  f"same-seed metrics CSVs identical: {same_csv}")
