"""Acceptance suite: one test per criterion, one PASS/FAIL line each.

The desk-scale pretraining run is shared across the criteria that need a
trained model; run with ``-s`` to watch the lines appear.
"""

import dataclasses
import json
import math
import time

import numpy as np
import pytest

from dgrlab.autodiff import Tensor, matmul, mean_over_axis, relu, squared_l2_distance
from dgrlab.config import TrainConfig
from dgrlab.distortions import default_specs, make_sample, patches_array
from dgrlab.graph import (DGR, build_dgr, edge_gcn, edge_pooling, node_pooling,
                          normalize_adjacency, self_loop_edges)
from dgrlab.heads import (HyperPredictor, TripletCodes, fpn_predict, level_loss,
                          regression_score, reparameterize, score_loss,
                          tdn_code, triplet_loss)
from dgrlab.metrics import clustering_metrics, kmeans, plcc, srcc
from dgrlab.nn import GcnStack, Mlp
from dgrlab.training import (HELDOUT_SEED_RANGE, ModelBundle, evaluate,
                             finetune, load_model, pretrain, save_model,
                             triplet_accuracy, _rng, _SALT_EVAL)

from conftest import numerical_gradient


def report(name: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# criterion 1: gradient suite
# ---------------------------------------------------------------------------


def _max_rel_err(analytic, numeric):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    return float(np.abs(analytic - numeric).max()
                 / max(1.0, np.abs(numeric).max()))


def _fd_check(build, x0, h=1e-5):
    """build(x_leaf) -> scalar Tensor; returns max rel err of d/dx."""
    leaf = Tensor(x0.copy(), requires_grad=True)
    build(leaf).backward()
    num = numerical_gradient(lambda v: build(Tensor(v)).item(), x0, h=h)
    return _max_rel_err(leaf.grad, num)


def _fd_check_weight(w: Tensor, forward, h=1e-5):
    """FD check of a module-owned parameter against its backward gradient."""
    w.grad = None
    forward().backward()
    analytic = w.grad.copy()
    original = w.data.copy()

    def f(v):
        w.data = v.copy()
        try:
            return forward().item()
        finally:
            w.data = original

    num = numerical_gradient(f, original, h=h)
    return _max_rel_err(analytic, num)


def test_criterion_gradient_suite():
    started = time.time()
    rng = np.random.default_rng(20240)
    worst: dict[str, float] = {}

    def track(op, err):
        worst[op] = max(worst.get(op, 0.0), err)

    for _ in range(20):
        m, k, n = rng.integers(2, 5, size=3)
        a0 = rng.uniform(-2, 2, (m, k))
        b0 = rng.uniform(-2, 2, (k, n))
        track("matmul", _fd_check(lambda t: (matmul(t, Tensor(b0)) ** 2.0).sum(), a0))
        track("matmul", _fd_check(lambda t: (matmul(Tensor(a0), t) ** 2.0).sum(), b0))

        x0 = rng.uniform(-2, 2, (4, 5))
        x0[np.abs(x0) < 1e-3] = 0.5  # keep clear of the ReLU kink
        mult = Tensor(rng.uniform(-1, 1, (4, 5)))
        track("relu", _fd_check(lambda t: (relu(t) * mult).sum(), x0))

        e0 = rng.uniform(-2, 2, (3, 3, 4))
        track("mean/pooling", _fd_check(lambda t: (mean_over_axis(t, 2) ** 2.0).sum(), e0))
        track("mean/pooling", _fd_check(lambda t: (node_pooling(t) ** 2.0).sum() * 0.5
                                        + (edge_pooling(t) ** 2.0).sum(), e0))
        track("mean/pooling", _fd_check(lambda t: (self_loop_edges(t) ** 2.0).sum(), e0))

        v0 = rng.uniform(-2, 2, 6)
        w0 = rng.uniform(-2, 2, 6)
        track("squared_l2", _fd_check(lambda t: squared_l2_distance(t, Tensor(w0)), v0))

        stack = GcnStack([4, 3, 2], np.random.default_rng(rng.integers(1 << 30)), "eb")
        edges0 = rng.uniform(-1, 1, (3, 3, 4))
        track("edge_gcn", _fd_check(
            lambda t: (edge_gcn(t, stack) ** 2.0).sum(), edges0))
        for w in stack.weights:
            track("edge_gcn", _fd_check_weight(
                w, lambda: (edge_gcn(Tensor(edges0), stack) ** 2.0).sum()))

        tdn = GcnStack([4, 3, 2], np.random.default_rng(rng.integers(1 << 30)), "tdn")
        vv0 = rng.uniform(-1, 1, (4, 4))
        ee0 = rng.uniform(-1, 1, (4, 4, 3))
        track("tdn_code", _fd_check(
            lambda t: (_toy_tdn(t, Tensor(ee0), tdn) ** 2.0).sum(), vv0))
        track("tdn_code", _fd_check(
            lambda t: (_toy_tdn(Tensor(vv0), t, tdn) ** 2.0).sum(), ee0))
        for w in tdn.weights:
            track("tdn_code", _fd_check_weight(
                w, lambda: (_toy_tdn(Tensor(vv0), Tensor(ee0), tdn) ** 2.0).sum()))

        hyper = HyperPredictor(4, 3, 5, np.random.default_rng(rng.integers(1 << 30)))
        eps = rng.normal(size=4)
        targets = rng.uniform(1, 5, 4)

        def fpn_loss(v_leaf, hyper=hyper, ee0=ee0, eps=eps, targets=targets):
            dgr = DGR(V=v_leaf, E=Tensor(ee0), A_V=node_pooling(Tensor(ee0)))
            pred = fpn_predict(dgr, hyper, np.random.default_rng(0), epsilon=eps)
            return level_loss(pred, targets)

        track("fpn_predict", _fd_check(fpn_loss, vv0))
        for w in hyper.parameters().values():
            track("fpn_predict", _fd_check_weight(w, lambda: fpn_loss(Tensor(vv0))))

        a0c = rng.uniform(-2, 2, 5)
        p0c = rng.uniform(-2, 2, 5)
        n0c = rng.uniform(-2, 2, 5)
        pre = ((a0c - p0c) ** 2).sum() - ((a0c - n0c) ** 2).sum() + 0.3
        if abs(pre) > 1e-2:  # keep clear of the hinge kink
            track("triplet_loss", _fd_check(
                lambda t: triplet_loss(TripletCodes(t, Tensor(p0c), Tensor(n0c)), 0.3), a0c))

        s0 = rng.uniform(-2, 2, 6)
        gt = rng.uniform(-2, 2, 6)
        track("score_loss", _fd_check(lambda t: score_loss(t, gt), s0))
        track("level_loss", _fd_check(
            lambda t: ((t - Tensor(gt)) * (t - Tensor(gt))).sum(), s0))
        track("normalize_adjacency", _fd_check(
            lambda t: (normalize_adjacency((t + t.T) * 0.5) ** 2.0).sum(),
            rng.uniform(0.1, 2, (3, 3))))

    elapsed = time.time() - started
    bad = {op: err for op, err in worst.items() if err >= 1e-4}
    report("gradient suite",
           not bad and elapsed < 120.0,
           f"max rel err per op {({k: f'{v:.2e}' for k, v in worst.items()})}, "
           f"{elapsed:.1f}s" + (f", failing: {bad}" if bad else ""))


def _toy_tdn(v: Tensor, e: Tensor, stack: GcnStack) -> Tensor:
    return tdn_code(DGR(V=v, E=e, A_V=node_pooling(e)), stack)


# ---------------------------------------------------------------------------
# criterion 2: algebraic oracles
# ---------------------------------------------------------------------------


def _brute_ranks(x):
    return np.array([1.0 + sum(1 for v in x if v < xi)
                     + (sum(1 for v in x if v == xi) - 1) / 2.0 for xi in x])


def _brute_pearson(a, b):
    n = len(a)
    ma = sum(a) / n
    mb = sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    return cov / math.sqrt(va * vb)


def _brute_clustering(classes, clusters):
    def entropy(groups):
        n = sum(groups.values())
        return -sum(c / n * math.log(c / n) for c in groups.values() if c)

    def count(seq):
        out = {}
        for v in seq:
            out[v] = out.get(v, 0) + 1
        return out

    n = len(classes)
    h_class = entropy(count(classes))
    h_cluster = entropy(count(clusters))
    h_cg, h_gc = 0.0, 0.0
    for k in set(clusters):
        members = [c for c, z in zip(classes, clusters) if z == k]
        h_cg += len(members) / n * entropy(count(members))
    for k in set(classes):
        members = [z for c, z in zip(classes, clusters) if c == k]
        h_gc += len(members) / n * entropy(count(members))
    h = 1.0 if h_class == 0 else 1.0 - h_cg / h_class
    c = 1.0 if h_cluster == 0 else 1.0 - h_gc / h_cluster
    v = 0.0 if h + c == 0 else 2 * h * c / (h + c)
    return h, c, v


def test_criterion_algebraic_oracles():
    rng = np.random.default_rng(4242)
    worst = 0.0
    for _ in range(100):
        k = int(rng.integers(4, 12))
        a = rng.normal(size=k)
        b = np.round(rng.normal(size=k), 1)  # coarse values force ties
        worst = max(worst, abs(srcc(a, b) - _brute_pearson(_brute_ranks(a), _brute_ranks(b))))
        worst = max(worst, abs(plcc(a, b) - _brute_pearson(list(a), list(b))))

        labels_a = [int(v) for v in rng.integers(0, 4, size=k + 6)]
        labels_b = [int(v) for v in rng.integers(0, 3, size=k + 6)]
        got = clustering_metrics(labels_a, labels_b)
        expected = _brute_clustering(labels_a, labels_b)
        worst = max(worst, max(abs(g - e) for g, e in zip(got, expected)))

        m = int(rng.integers(2, 7))
        adj = rng.random((m, m))
        adj = (adj + adj.T) / 2
        got_norm = normalize_adjacency(Tensor(adj)).data
        s = adj + np.eye(m)
        d = s.sum(axis=1)
        expected_norm = np.array([[s[i, j] / math.sqrt(d[i] * d[j])
                                   for j in range(m)] for i in range(m)])
        worst = max(worst, np.abs(got_norm - expected_norm).max())

        e = rng.normal(size=(m, m, 4))
        pooled = edge_pooling(Tensor(e)).data
        exp_pool = np.array([[sum(e[i, j, c] for j in range(m)) / m
                              for c in range(4)] for i in range(m)])
        worst = max(worst, np.abs(pooled - exp_pool).max())

        nodes = node_pooling(Tensor(e)).data
        mean_c = np.array([[sum(e[i, j, c] for c in range(4)) / 4
                            for j in range(m)] for i in range(m)])
        exp_nodes = np.abs((mean_c + mean_c.T) / 2)
        worst = max(worst, np.abs(nodes - exp_nodes).max())

    report("algebraic oracles", worst < 1e-10, f"max abs deviation {worst:.2e}")


# ---------------------------------------------------------------------------
# criterion 3: reparameterization statistics
# ---------------------------------------------------------------------------


def test_criterion_reparameterization_statistics():
    rng = np.random.default_rng(77)
    y = reparameterize(Tensor(np.full(100_000, 2.0)),
                       Tensor(np.full(100_000, 0.5)),
                       rng.standard_normal(100_000)).data
    mean, std = float(y.mean()), float(y.std())
    ok = abs(mean - 2.0) < 0.007 and 0.49 <= std <= 0.51
    report("reparameterization statistics", ok,
           f"mean {mean:.5f} (target 2 +- 0.007), std {std:.5f} (target [0.49, 0.51])")


# ---------------------------------------------------------------------------
# criterion 4: triplet properties
# ---------------------------------------------------------------------------


def test_criterion_triplet_properties():
    rng = np.random.default_rng(99)
    margin = 0.25
    zero_ok = translation_ok = 0
    for _ in range(1000):
        a, p, n, c = rng.integers(-2048, 2049, size=(4, 6)) / 1024.0

        base = triplet_loss(TripletCodes(Tensor(a), Tensor(p), Tensor(n)), margin)
        moved = triplet_loss(TripletCodes(Tensor(a + c), Tensor(p + c), Tensor(n + c)), margin)
        translation_ok += base.item() == moved.item()

        far = a + 8.0  # pushes d(a, n) beyond d(a, p) + margin
        ta = Tensor(a, requires_grad=True)
        tp = Tensor(p / 8.0 + a, requires_grad=True)
        tn = Tensor(far, requires_grad=True)
        loss = triplet_loss(TripletCodes(ta, tp, tn), margin)
        if loss.item() == 0.0:
            loss.backward()
            zero_ok += all(np.all(t.grad == 0) for t in (ta, tp, tn))

    ok = translation_ok == 1000 and zero_ok == 1000
    report("triplet properties", ok,
           f"translation exact {translation_ok}/1000, zero-region with zero grads {zero_ok}/1000")


# ---------------------------------------------------------------------------
# criteria 5-7: desk-scale training
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def deskscale(tmp_path_factory):
    cfg = TrainConfig()
    model = ModelBundle(cfg)
    started = time.time()
    pretrain(model, cfg)
    minutes = (time.time() - started) / 60.0
    ckpt = tmp_path_factory.mktemp("deskscale") / "pretrain.ckpt"
    save_model(model, ckpt, include_regressor=False)
    return {"cfg": cfg, "model": model, "minutes": minutes, "ckpt": ckpt}


def test_criterion_desk_scale_pretraining(deskscale):
    cfg, model = deskscale["cfg"], deskscale["model"]
    acc = triplet_accuracy(model, cfg, _rng(cfg.seed, _SALT_EVAL), 500)
    rep = evaluate(model, cfg, triplets=0)
    spearman_mean = float(np.mean([v for v in rep.level_spearman.values()]))
    strongest = [rep.clustering[t][2] for t in (0, 1, 6)]  # blur, noise, pixelate
    vmeasure_mean = float(np.mean(strongest))

    # level-1 noise vs level-5 noise must be further apart in feature space
    # than two level-1 noise patches
    spec = default_specs([1])[0]
    l1 = patches_array([make_sample(spec, 1, HELDOUT_SEED_RANGE[0] + 10_000 + i)
                        for i in range(20)])
    l5 = patches_array([make_sample(spec, 5, HELDOUT_SEED_RANGE[0] + 20_000 + i)
                        for i in range(20)])
    f1 = model.backbone.extract_features(l1).data
    f5 = model.backbone.extract_features(l5).data
    cross = np.mean([((x - y) ** 2).sum() for x in f1 for y in f5])
    within = np.mean([((f1[i] - f1[j]) ** 2).sum()
                      for i in range(20) for j in range(i + 1, 20)])

    ok = (acc >= 0.90 and spearman_mean >= 0.8 and vmeasure_mean >= 0.5
          and deskscale["minutes"] < 10.0 and cross > within)
    report("desk-scale pretraining", ok,
           f"triplet acc {acc:.3f} (>=0.90), level spearman {spearman_mean:.3f} (>=0.8), "
           f"v-measure(blur/noise/pixelate) {vmeasure_mean:.3f} (>=0.5), "
           f"{deskscale['minutes']:.1f} min (<10), feature dist L1-L5 {cross:.2f} "
           f"> within-L1 {within:.2f}")


@pytest.fixture(scope="module")
def finetune_arms(deskscale):
    cfg, ckpt = deskscale["cfg"], deskscale["ckpt"]
    arms = {"pretrained": {}, "random": {}}
    reports = {}
    for seed in range(5):
        cfg_s = dataclasses.replace(cfg, seed=seed)
        warm = load_model(ckpt, cfg_s)
        finetune(warm, cfg_s)
        rep = evaluate(warm, cfg_s, triplets=0)
        arms["pretrained"][seed] = rep.srcc
        reports[seed] = rep

        cold = ModelBundle(cfg_s)
        finetune(cold, cfg_s)
        arms["random"][seed] = evaluate(cold, cfg_s, triplets=0).srcc

    cfg_e = dataclasses.replace(cfg, finetune_inputs="edges")
    edges = load_model(ckpt, cfg_e)
    finetune(edges, cfg_e)
    arms["edges_only"] = evaluate(edges, cfg_e, triplets=0).srcc
    arms["seed0_report"] = reports[0]
    return arms


def test_criterion_ablation_direction(finetune_arms):
    warm = float(np.mean(list(finetune_arms["pretrained"].values())))
    cold = float(np.mean(list(finetune_arms["random"].values())))
    both = finetune_arms["pretrained"][0]
    edges_only = finetune_arms["edges_only"]
    ok = warm >= cold and both >= edges_only
    report("ablation direction", ok,
           f"pretrained mean srcc {warm:.3f} >= random {cold:.3f} (5 seeds); "
           f"nodes+edges {both:.3f} >= edges-only {edges_only:.3f}")


def test_criterion_end_to_end_finetune(finetune_arms):
    rep = finetune_arms["seed0_report"]
    ok = rep.srcc >= 0.85 and rep.plcc >= 0.85
    report("end-to-end finetune", ok,
           f"srcc {rep.srcc:.4f}, plcc {rep.plcc:.4f} on 200 held-out (>=0.85 each)")


# ---------------------------------------------------------------------------
# criterion 8: determinism
# ---------------------------------------------------------------------------


def test_criterion_determinism(tmp_path):
    outputs = []
    for run in range(2):
        cfg = TrainConfig(pretrain_steps=40, finetune_steps=20, heldout_size=40,
                          eval_samples_per_type=10, eval_triplets=5)
        model = ModelBundle(cfg)
        pretrain(model, cfg)
        pre_path = tmp_path / f"pre_{run}.ckpt"
        save_model(model, pre_path, include_regressor=False)
        tuned = load_model(pre_path, cfg)
        finetune(tuned, cfg)
        ft_path = tmp_path / f"ft_{run}.ckpt"
        save_model(tuned, ft_path, include_regressor=True)
        outputs.append({
            "report": evaluate(tuned, cfg).to_dict(),
            "pre": pre_path.read_bytes(),
            "ft": ft_path.read_bytes(),
        })

    r1, r2 = outputs[0]["report"], outputs[1]["report"]
    drift = _max_numeric_drift(r1, r2)
    ok = (drift <= 1e-10 and outputs[0]["pre"] == outputs[1]["pre"]
          and outputs[0]["ft"] == outputs[1]["ft"])
    report("determinism", ok,
           f"max report drift {drift:.1e} (<=1e-10), checkpoints byte-identical: "
           f"{outputs[0]['pre'] == outputs[1]['pre'] and outputs[0]['ft'] == outputs[1]['ft']}")


def _max_numeric_drift(a, b) -> float:
    if isinstance(a, dict):
        assert set(a) == set(b)
        return max((_max_numeric_drift(a[k], b[k]) for k in a), default=0.0)
    if isinstance(a, (int, float)) and isinstance(b, (int, float)):
        return abs(float(a) - float(b))
    assert a == b
    return 0.0
