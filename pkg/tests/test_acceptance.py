"""Acceptance criteria 1-11.

Each test records one PASS/FAIL line (plus a short measurement) that the
terminal summary prints in criterion order; see ``pytest_terminal_summary``
in conftest.py.
"""

import dataclasses
import os
import time
from pathlib import Path

import numpy as np
import pytest

from mfgraph import baselines, dgcnn, harness
from mfgraph.graph import build_graph, select_k
from mfgraph.metrics import Confusion, drift_table, evaluate_scores, roc_auc, scalar_metrics
from mfgraph.pe import ByteEntropyConfig, byte_entropy_histogram, count_windows
from mfgraph.records import SectionEntry, format_month, load_filtered, split_train_test
from mfgraph.synthetic import make_records
from mfgraph.training import TrainSettings, fit, malicious_scores

from conftest import random_graph
from gradcheck import check_graph, random_case

RESULTS = {}
EMBER_ENV = "MFGRAPH_EMBER_DIR"


def record(n, ok, detail):
    RESULTS[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    assert ok, RESULTS[n]


def thirteen_node_graph():
    rec = make_records(1, seed=11)[0]
    dll = next(iter(rec.imports))
    rec = dataclasses.replace(rec, imports={dll: rec.imports[dll]}, sections=rec.sections[:3])
    g = build_graph(rec)
    assert g.n == 13
    return g


# ---------------------------------------------------------------- 1

def test_c01_gradient_fidelity():
    g = thirteen_node_graph()
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(20):
        cfg, k, mask, label = random_case(rng)
        err, _ = check_graph(g, cfg, k, mask, label, rng, eps=1e-5)
        worst = max(worst, err)
    elapsed = time.perf_counter() - start
    record(1, worst < 1e-4 and elapsed < 120, f"max relative error {worst:.2e} over 20 configs, {elapsed:.1f}s")


# ---------------------------------------------------------------- 2

def _pair_count_auc(scores, truths):
    pos, neg = scores[truths == 1], scores[truths == 0]
    diff = pos[:, None] - neg[None, :]
    return (np.sum(diff > 0) + 0.5 * np.sum(diff == 0)) / (len(pos) * len(neg))


def test_c02_metric_oracles():
    rng = np.random.default_rng(7)
    worst = 0.0
    for i in range(1000):
        n = int(rng.integers(2, 200))
        truths = rng.integers(0, 2, n)
        truths[:2] = (0, 1)
        # half the sets draw from a coarse grid so ties are common
        scores = rng.integers(0, 10, n) / 10 if i % 2 else rng.random(n)
        worst = max(worst, abs(roc_auc(scores, truths) - _pair_count_auc(scores, truths)))
    exact = True
    for _ in range(1000):
        tp, tn, fp, fn = (int(v) for v in rng.integers(0, 30, 4))
        if tp + tn + fp + fn == 0:
            continue
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        want = ((tp + tn) / (tp + tn + fp + fn), prec, rec, 2 * prec * rec / (prec + rec) if prec + rec else 0.0)
        exact &= scalar_metrics(Confusion(tp, tn, fp, fn)) == want
    f1 = scalar_metrics(Confusion(tp=3, tn=4, fp=1, fn=2))[3]
    ok = worst <= 1e-9 and exact and abs(f1 - 0.6667) <= 1e-4
    record(2, ok, f"max AUC gap {worst:.1e} over 1000 sets, scalar metrics exact={exact}, hand F1 {f1:.4f}")


# ---------------------------------------------------------------- 3

def test_c03_permutation_invariance():
    rng = np.random.default_rng(3)
    cfg = dgcnn.DgcnnConfig(conv_channels=(8, 8, 4), mlp_hidden=(16,), input_width=16)
    worst, redrawn, done = 0.0, 0, 0
    while done < 100:
        g = random_graph(rng, int(rng.integers(9, 40)), width=16)
        params = dgcnn.init_params(cfg, int(rng.integers(5, 45)), rng)
        z = dgcnn.forward_conv_stack(g.x, g.edges, params, cfg)
        if len(np.unique(z[:, -1])) < g.n:
            # nodes sharing a closed neighbourhood get identical rows at every layer
            redrawn += 1
            continue
        done += 1
        pg = g.permuted(rng.permutation(g.n))
        worst = max(worst,
                    np.max(np.abs(dgcnn.embed_graph(g, params, cfg) - dgcnn.embed_graph(pg, params, cfg))),
                    np.max(np.abs(dgcnn.predict_proba([g], params, cfg) - dgcnn.predict_proba([pg], params, cfg))))
    record(3, worst <= 1e-9,
           f"max embedding/probability gap {worst:.1e} over 100 graphs ({redrawn} redrawn for tied sort keys)")


# ---------------------------------------------------------------- 4

def test_c04_propagation_rows():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        g = random_graph(rng, n, width=1, extra_edges=int(rng.integers(0, 3 * n + 1)))
        p = dgcnn.propagation_matrix(g.n, g.edges)
        worst = max(worst, float(np.max(np.abs(p.sum(axis=1) - 1.0))))
    record(4, worst <= 1e-12, f"max |row sum - 1| {worst:.1e} over 1000 graphs")


# ---------------------------------------------------------------- 5

def test_c05_construction_arithmetic():
    base = make_records(1, seed=5)[0]
    bad = []
    for n_dll in range(11):
        for n_sec in range(11):
            imports = {f"lib{i}.dll": [f"f{i}"] for i in range(n_dll)}
            sections = tuple(SectionEntry(f".s{i}", 4096, 5.0, 4096) for i in range(n_sec))
            rec = dataclasses.replace(base, imports=imports, sections=sections,
                                      entry=sections[0].name if sections else "")
            g = build_graph(rec)
            if g.n != 9 + n_dll + n_sec or len(g.edges) != 8 + n_dll + n_sec:
                bad.append((n_dll, n_sec))
    record(5, not bad, f"121 (#dlls, #sections) combinations, {len(bad)} mismatches")


# ---------------------------------------------------------------- 6

def test_c06_byte_entropy_windows():
    data = np.random.default_rng(6).integers(0, 256, 4096, dtype=np.uint8).tobytes()
    cfg = ByteEntropyConfig(window=1024, step=256)
    windows = count_windows(len(data), cfg)
    total = int(byte_entropy_histogram(data, cfg).sum())
    record(6, windows == 13 and total == 13 * 1024, f"{windows} windows, total count {total}")


# ---------------------------------------------------------------- 7

def test_c07_k_selection():
    rng = np.random.default_rng(8)
    mismatches = 0
    for _ in range(500):
        counts = rng.integers(9, int(rng.integers(10, 120)), size=int(rng.integers(1, 300)))
        rate = float(rng.choice([0.5, 0.6, 0.75, 0.9, 1.0, rng.uniform(0.01, 1.0)]))
        brute = max(k for k in range(1, int(counts.max()) + 1) if np.mean(counts >= k) >= rate)
        mismatches += select_k(counts.tolist(), rate) != brute
    record(7, mismatches == 0, f"500 distributions, {mismatches} mismatches against brute force")


# ---------------------------------------------------------------- 8

@pytest.mark.slow
def test_c08_synthetic_end_to_end():
    start = time.perf_counter()
    split = split_train_test(make_records(2000, seed=0), ratio=0.8, seed=0)
    train = [build_graph(r) for r in split.train]
    test = [build_graph(r) for r in split.test]
    params, _ = fit(train, dgcnn.DgcnnConfig(), TrainSettings(epochs=20, seed=0))
    auc = roc_auc(malicious_scores(test, params, dgcnn.DgcnnConfig()), [g.label for g in test])
    elapsed = time.perf_counter() - start
    record(8, auc >= 0.95 and elapsed < 600,
           f"held-out AUC {auc:.4f} ({len(train)} train / {len(test)} test), {elapsed:.0f}s")


# ---------------------------------------------------------------- 9

def _ember_jan_2018(root):
    paths = sorted(Path(root).glob("*.jsonl"))
    jan = [r for r in load_filtered(paths, year=2018) if r.appeared == (2018, 1)]
    rng = np.random.default_rng(0)
    picked = []
    for cls in (0, 1):
        idx = [i for i, r in enumerate(jan) if r.label == cls]
        picked.extend(rng.permutation(idx)[:5000].tolist())
    return split_train_test([jan[i] for i in sorted(picked)], ratio=0.8, seed=0)


@pytest.mark.slow
def test_c09_ember_subsample():
    root = os.environ.get(EMBER_ENV)
    if not root or not any(Path(root).glob("*.jsonl")):
        RESULTS[9] = f"criterion  9: SKIP  EMBER JSONL not found (set {EMBER_ENV} to the directory holding it)"
        pytest.skip(f"EMBER data absent; set {EMBER_ENV} to run criterion 9")
    split = _ember_jan_2018(root)
    cfg, settings = dgcnn.DgcnnConfig(), TrainSettings(epochs=20, seed=0)
    train = [build_graph(r) for r in split.train]
    test = [build_graph(r) for r in split.test]
    params, _ = fit(train, cfg, settings)
    truths = [g.label for g in test]
    graph_auc = evaluate_scores(malicious_scores(test, params, cfg), truths).auc
    x_train, y_train = baselines.flat_dataset(split.train)
    x_test, _ = baselines.flat_dataset(split.test)
    mlp = baselines.train_flat_mlp(x_train, y_train, hidden=cfg.mlp_hidden, dropout=cfg.dropout,
                                   epochs=settings.epochs, batch_size=settings.batch_size, lr=settings.lr,
                                   seed=settings.seed)
    flat_auc = roc_auc(mlp.predict_proba(x_test)[:, 1], truths)
    record(9, graph_auc >= 0.93 and graph_auc > flat_auc,
           f"{len(train)} train / {len(test)} test: graph AUC {graph_auc:.4f}, flat MLP AUC {flat_auc:.4f}")


# ---------------------------------------------------------------- 10

def test_c10_degrate_arithmetic():
    def rep(auc, tag):
        return dataclasses.replace(evaluate_scores([0.9, 0.1], [1, 0], tag), auc=auc)

    table = drift_table({"2018-01": rep(0.98756, "2018-01"), "2018-12": rep(0.92872, "2018-12")})
    value = table.degradation["auc"]
    record(10, value == 5.884, f"DegRate {value!r} percentage points")


# ---------------------------------------------------------------- 11

def test_c11_reproducibility(tmp_path):
    records = make_records(200, seed=13)
    split = split_train_test(records, ratio=0.8, seed=1)
    train = [build_graph(r) for r in split.train]
    test = [build_graph(r) for r in split.test]
    month = format_month(test[0].appeared)
    cfg = harness.ExperimentConfig(model=dgcnn.DgcnnConfig(conv_channels=(16, 16, 8), mlp_hidden=(32,)),
                                   train=TrainSettings(epochs=3, seed=5))
    outputs = []
    for run in ("a", "b"):
        out = tmp_path / run
        ckpt, _ = harness.train_model(cfg, out, graphs=train)
        harness.evaluate_model(ckpt, test, "test", out_dir=out)
        harness.run_drift(ckpt, {month: test[:20], "2018-02": test[20:]}, out_dir=out)
        outputs.append({p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.name != "manifest.json"})
    same = outputs[0] == outputs[1]
    record(11, same and len(outputs[0]) == 5,
           f"{len(outputs[0])} artifacts compared ({', '.join(outputs[0])}), byte-identical={same}")
