"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

The lines are printed in the pytest terminal summary (and directly when the
module is executed as a script).
"""

import sys
import time

import numpy as np
import pytest

import conftest
from gatn import config, global_net, local_net, ops, pipeline, retrieval, triplet
from gatn.data import synth
from gatn.tensor import Tape, Tensor, backward

from oracles import (
    average_precision_exhaustive,
    central_diff,
    enumerate_triplets,
    first_hit_scan,
    numeric_grad,
    rel_error,
)

BENCH_SEEDS = (1, 2, 3, 4, 5)


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# --- criterion 1 ------------------------------------------------------------------------


def _op_cases(rng):
    """name -> (fn(*tensors) -> scalar, input arrays) for one random instance."""
    pos = lambda *s: rng.uniform(0.1, 1.0, s)  # noqa: E731
    n = lambda *s: rng.normal(size=s)  # noqa: E731
    stride, pad = [(1, 0), (1, 1), (2, 3), (2, 1)][rng.integers(4)]
    conv_out = (2, 3, ops.conv_output_size(7, 3, stride, pad), ops.conv_output_size(6, 3, stride, pad))
    labels = rng.integers(0, 5, 4)
    rows = rng.integers(0, 4, 6)
    stats = ops.RunningStats(3, np.float64)
    stats.mean, stats.var = n(3), pos(3) + 0.5

    def weighted(f, shape):
        r = T(n(*shape))
        return lambda *ts: ops.sum(ops.mul(f(*ts), r))

    emb = n(9, 4)
    tri = triplet.mine_triplets(emb, np.repeat(np.arange(3), 3), triplet.MiningConfig(1.0, "all", 3, 3))
    return {
        "conv2d": (weighted(lambda x, k, b: ops.conv2d(x, k, b, stride, pad), conv_out), [n(2, 2, 7, 6), n(3, 2, 3, 3), n(3)]),
        "maxpool2d": (weighted(lambda x: ops.maxpool2d(x, 2), (2, 2, 3, 3)), [n(2, 2, 6, 7)]),
        "dense": (weighted(lambda x, w, b: ops.dense(x, w, b), (4, 3)), [n(4, 5), n(3, 5), n(3)]),
        "relu": (weighted(lambda x: ops.relu(x), (3, 4)), [n(3, 4)]),
        "softmax": (weighted(lambda x: ops.softmax(x), (3, 5)), [n(3, 5)]),
        "cross_entropy": (lambda p: ops.cross_entropy(p, labels), [pos(4, 5)]),
        "entropy": (weighted(lambda p: ops.entropy(p), (4,)), [pos(4, 5)]),
        "batchnorm_train_4d": (weighted(lambda x, g, b: ops.batchnorm(x, g, b, "train"), (4, 3, 2, 2)), [n(4, 3, 2, 2), n(3), n(3)]),
        "batchnorm_train_2d": (weighted(lambda x, g, b: ops.batchnorm(x, g, b, "train"), (5, 3)), [n(5, 3), n(3), n(3)]),
        "batchnorm_eval": (weighted(lambda x, g, b: ops.batchnorm(x, g, b, "eval", stats), (2, 3, 2, 2)), [n(2, 3, 2, 2), n(3), n(3)]),
        "global_avg_pool": (weighted(lambda x: ops.global_avg_pool(x), (2, 3)), [n(2, 3, 4, 5)]),
        "reshape": (weighted(lambda x: ops.reshape(x, (6, 4)), (6, 4)), [n(2, 3, 4)]),
        "transpose": (weighted(lambda x: ops.transpose(x, (2, 0, 1)), (4, 2, 3)), [n(2, 3, 4)]),
        "take_rows": (weighted(lambda x: ops.take_rows(x, rows), (6, 3)), [n(4, 3)]),
        "sum": (weighted(lambda x: ops.sum(x, axis=1), (2, 4)), [n(2, 3, 4)]),
        "mean": (weighted(lambda x: ops.mean(x, axis=2), (2, 3)), [n(2, 3, 4)]),
        "max": (weighted(lambda x: ops.max(x, axis=1), (2, 4)), [n(2, 3, 4)]),
        "mul": (weighted(lambda x, y: ops.mul(x, y), (3, 4)), [n(3, 4), n(3, 4)]),
        "add": (weighted(lambda x, y: ops.add(x, y), (3, 4)), [n(3, 4), n(3, 4)]),
        "scale": (weighted(lambda x: ops.scale(x, 1.7), (3, 4)), [n(3, 4)]),
        "l2_normalize": (weighted(lambda x: ops.l2_normalize(x), (3, 4)), [n(3, 4)]),
        "triplet_loss": (lambda e: triplet.triplet_loss(e, tri, 1.0), [emb]),
    }


def _op_error(fn, arrays):
    ts = [T(a, True) for a in arrays]
    with Tape() as tape:
        out = fn(*ts)
    backward(tape, out)
    worst = 0.0
    for arr, t in zip(arrays, ts):
        num = numeric_grad(lambda: fn(*[T(a) for a in arrays]).item(), arr)
        worst = max(worst, rel_error(t.grad, num))
    return worst


def _network_error(seed):
    """Max error over sampled parameters of both networks; bias gradients cancelled by train-mode BN must be zero."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    gp = global_net.init_global(3, 3, rng, "float64")
    x = rng.random((2, 3, 28, 14))
    labels = [0, 2]

    def g_loss():
        return ops.cross_entropy(global_net.global_forward(Tensor(x), gp, "train")[1], labels)

    lp = local_net.init_local(3, (4, 6, 5), rng=rng, dtype="float64")
    patches = rng.random((2, 3, 3, 8, 8))
    r = rng.normal(size=(2, 5))

    def l_loss():
        return ops.sum(ops.mul(local_net.embed_patch_batch(patches, lp, "train")[1], Tensor(r)))

    for params, loss_fn in ((gp, g_loss), (lp, l_loss)):
        params.zero_grad()
        with Tape() as tape:
            loss = loss_fn()
        backward(tape, loss)
        for name, t in params.tensors.items():
            if name.endswith(".b") and name.startswith("conv"):
                worst = max(worst, float(np.max(np.abs(t.grad))) * 1e5)  # exact zero expected
                continue
            for flat in rng.choice(t.size, size=min(3, t.size), replace=False):
                idx = np.unravel_index(flat, t.shape)
                num = central_diff(lambda: loss_fn().item(), t.data, idx)
                worst = max(worst, rel_error(t.grad[idx], num))
    return worst


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    errors: dict[str, float] = {}
    for seed in range(20):
        for name, (fn, arrays) in _op_cases(np.random.default_rng(seed)).items():
            errors[name] = max(errors.get(name, 0.0), _op_error(fn, arrays))
        errors["networks"] = max(errors.get("networks", 0.0), _network_error(seed))
    elapsed = time.perf_counter() - t0
    worst_name = max(errors, key=errors.get)
    ok = max(errors.values()) <= 1e-5 and elapsed <= 120
    record(1, ok, f"{len(errors)} cases x 20 instances, max rel err {errors[worst_name]:.2e} ({worst_name}), {elapsed:.1f}s")
    assert ok


# --- criterion 2 ------------------------------------------------------------------------


def _fd_attention(grid, params, h=1e-5):
    def H():
        _, probs = global_net.head(Tensor(grid), params)
        return float(ops.entropy(probs).data.sum())

    _, d, rows, cols = grid.shape
    out = np.zeros((rows, cols))
    for i in range(rows):
        for j in range(cols):
            out[i, j] = np.linalg.norm([central_diff(H, grid, (0, c, i, j), h) for c in range(d)])
    return out


def test_criterion_2_attention_oracle(monkeypatch):
    calls = []
    real = global_net.backward

    def counting(tape, loss):
        real(tape, loss)
        calls.append(tape.traversals)

    monkeypatch.setattr(global_net, "backward", counting)
    worst, single = 0.0, True
    for seed in range(20):
        rng = np.random.default_rng(seed)
        params = global_net.init_global(int(rng.integers(3, 9)), 3, rng, "float64")
        for s in params.stats.values():
            s.mean, s.var = rng.normal(0, 0.1, s.mean.shape), rng.uniform(0.5, 2, s.var.shape)
        img = rng.random((3, 112, 56))
        calls.clear()
        amap = global_net.attention_map(img, params)
        single &= calls == [1]
        grid = global_net.features(img, params, "eval").data.copy()
        worst = max(worst, rel_error(amap, _fd_attention(grid, params)))
    ok = worst <= 1e-4 and single
    record(2, ok, f"20 pairs, max rel err {worst:.2e}, one backward per map: {single}")
    assert ok


# --- criterion 3 ------------------------------------------------------------------------


def test_criterion_3_entropy_bounds():
    rng = np.random.default_rng(0)
    bounded = True
    for _ in range(1000):
        c = int(rng.integers(2, 60))
        p = rng.dirichlet(np.full(c, rng.choice([0.05, 0.5, 1.0, 5.0])))
        h = global_net.entropy(p)
        bounded &= -np.log(c) - 1e-12 <= h <= 0.0
    one_hot = all(global_net.entropy(np.eye(c)[int(rng.integers(c))]) == 0.0 for c in range(2, 30))
    params = global_net.init_global(6, 3, rng, "float64")
    img = rng.random((4, 3, 112, 56))
    invariant = np.array_equal(global_net.attention_map(img, params), global_net.attention_map(img, params, negate=True))
    ok = bounded and one_hot and invariant
    record(3, ok, f"1000 vectors bounded: {bounded}, one-hot H=0: {one_hot}, sign invariance: {invariant}")
    assert ok


# --- criterion 4 ------------------------------------------------------------------------


def test_criterion_4_mining_oracle():
    agree, disjoint, counts = True, True, {"hard": 0, "semi-hard": 0, "all": 0}
    for seed in range(50):
        rng = np.random.default_rng(seed)
        centres = rng.normal(size=(8, 8))
        emb = np.repeat(centres, 4, axis=0) + rng.uniform(0.3, 1.2) * rng.normal(size=(32, 8))
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        labels = np.repeat(rng.permutation(100)[:8], 4)
        alpha = float(rng.choice([0.02, 0.1, 0.3]))
        sets = {}
        for mode in counts:
            got = {tuple(int(v) for v in t) for t in triplet.mine_triplets(emb, labels, triplet.MiningConfig(alpha, mode, 8, 4))}
            agree &= got == enumerate_triplets(emb, labels, alpha, mode)
            counts[mode] += len(got)
            sets[mode] = got
        disjoint &= not sets["hard"] & sets["semi-hard"]
    ok = agree and disjoint and counts["semi-hard"] > 0 and counts["hard"] > 0
    record(4, ok, f"50 batches P=8 K=4, oracle agreement: {agree}, hard/semi-hard disjoint: {disjoint}, mined {counts}")
    assert ok


# --- criterion 5 ------------------------------------------------------------------------


def test_criterion_5_metric_oracles():
    worst, monotone = 0.0, True
    for seed in range(200):
        rng = np.random.default_rng(seed)
        nq, ng, ids = int(rng.integers(1, 8)), int(rng.integers(5, 25)), int(rng.integers(2, 6))
        gl = rng.integers(0, ids, ng)
        gl[:ids] = rng.permutation(ids)
        ql = rng.integers(0, ids, nq)
        dist = np.round(rng.random((nq, ng)), int(rng.integers(1, 4)))
        ranked = retrieval.rank_gallery(dist)
        curve = retrieval.cmc(ranked, ql, gl, max_rank=ng)
        first = [first_hit_scan(dist[i], ql[i], gl) for i in range(nq)]
        ref_curve = np.array([np.mean([f <= k for f in first]) for k in range(1, ng + 1)])
        ref_map = np.mean([average_precision_exhaustive(dist[i], ql[i], gl) for i in range(nq)])
        worst = max(worst, float(np.max(np.abs(curve - ref_curve))), abs(retrieval.mean_average_precision(ranked, ql, gl) - ref_map))
        monotone &= bool(np.all(np.diff(curve) >= 0))
    fig2 = retrieval.cmc(retrieval.rank_gallery(np.array([[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]])), [7], [1, 2, 3, 7, 4, 5], max_rank=6)
    fig2_ok = fig2[0] == 0.0 and fig2[3] == 1.0 and fig2[2] == 0.0
    ok = worst <= 1e-9 and monotone and fig2_ok
    record(5, ok, f"200 instances, max abs err {worst:.1e}, monotone: {monotone}, rank4 scenario: {fig2_ok}")
    assert ok


# --- criteria 6, 7, 9, 10 (shared end-to-end runs) -------------------------------------------


@pytest.fixture(scope="module")
def corpus():
    return synth.generate(synth.SynthConfig(ids=40, images_per_id=4, cameras=2, seed=42))


@pytest.fixture(scope="module")
def runs(corpus):
    ds, boxes = corpus
    return {s: pipeline.run_benchmark(ds, boxes, config.Config(seed=s)) for s in BENCH_SEEDS}


def _passes(run) -> bool:
    return run.train_accuracy >= 0.95 and run.report.rank(1) >= 0.90 and run.report.mAP >= 0.85 and run.seconds <= 900


def test_criterion_6_end_to_end(runs):
    parts = [
        f"seed {s}: acc {r.train_accuracy:.3f} rank1 {r.report.rank(1):.2f} mAP {r.report.mAP:.3f} "
        f"(global-only {r.global_report.rank(1):.2f}/{r.global_report.mAP:.3f}) "
        f"{r.seconds:.0f}s {'ok' if _passes(r) else 'miss'}"
        for s, r in runs.items()
    ]
    n_ok = sum(_passes(r) for r in runs.values())
    ok = n_ok >= 4
    record(6, ok, f"{n_ok}/5 seeds pass; " + "; ".join(parts))
    assert ok


def test_criterion_7_localization(runs):
    rates = {s: r.localization for s, r in runs.items()}
    ok = all(v >= 0.8 for v in rates.values())
    record(7, ok, "images with >=50% of 8 patches on the glyph: " + ", ".join(f"seed {s} {v:.3f}" for s, v in rates.items()))
    assert ok


def test_criterion_8_compute_saving():
    lp = local_net.init_local(rng=0)
    macs_patch = 8 * local_net.flops_estimate(lp, (14, 14))
    macs_full = local_net.flops_estimate(lp, (112, 56))
    ratio = macs_patch / macs_full
    rng = np.random.default_rng(0)
    images = rng.random((16, 3, 112, 56)).astype(np.float32)
    patches = rng.random((16 * 8, 3, 14, 14)).astype(np.float32)

    def best(fn, reps=5):
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return min(times)

    local_net.local_forward(patches[:8], lp)  # warm-up
    t_full = best(lambda: local_net.local_forward(images, lp))
    t_patch = best(lambda: local_net.local_forward(patches, lp))
    speedup = t_full / t_patch
    ok = abs(ratio - 0.25) <= 0.0025 and speedup > 1.5
    record(8, ok, f"MAC ratio {ratio:.4f}, wall-clock speedup {speedup:.2f}x (reference figure 2.5x, informational)")
    assert ok


def test_criterion_9_fusion_identity(runs):
    r = runs[BENCH_SEEDS[0]]
    test = r.test
    fused, _, _ = pipeline.evaluate_split(test, r.gparams, r.lparams, k=0)

    def pure_global(idx):
        grid = global_net.features(test.images(idx), r.gparams, "eval").data
        flat = grid.transpose(0, 2, 3, 1).reshape(len(idx), -1).astype(np.float64)
        return np.stack([v / np.linalg.norm(v) for v in flat])

    ql, gl = test.labels(test.query), test.labels(test.gallery)
    names = [test.samples[i].name for i in test.query]
    direct = retrieval.evaluate(pure_global(test.query), pure_global(test.gallery), ql, gl, names)
    ranked_a = retrieval.rank_gallery(retrieval.pairwise_distances(pure_global(test.query), pure_global(test.gallery)))
    same = (
        fused.text() == direct.text()
        and np.array_equal(fused.cmc, direct.cmc)
        and np.array_equal(fused.aps, direct.aps)
        and np.array_equal(fused.first_hits, np.array(retrieval.first_hit_ranks(ranked_a, ql, gl)))
    )
    record(9, same, f"k=0 fused vs pure global: rank1 {fused.rank(1):.2f}/{direct.rank(1):.2f}, mAP {fused.mAP:.6f}/{direct.mAP:.6f}")
    assert same


def test_criterion_10_determinism(corpus, runs):
    ds, boxes = corpus
    seed = BENCH_SEEDS[0]
    again = pipeline.run_benchmark(ds, boxes, config.Config(seed=seed))
    same = again.report.text() == runs[seed].report.text() and again.report.csv_rows() == runs[seed].report.csv_rows()
    record(10, same, f"seed {seed} rerun report identical: {same}")
    assert same


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
