"""Acceptance gate for the whole laboratory.

Each criterion prints one PASS/FAIL verdict line straight to the
terminal (bypassing capture) before asserting, so a red run still
reports every verdict. The directional experiment builds one shared
12-run matrix at the frozen configuration and takes most of the
session's runtime.
"""

import time

import numpy as np
import pytest

from seglab.cli import main as cli_main
from seglab.dataio import (DatasetSpec, Sample, generate_dataset, partition,
                           save_dataset)
from seglab.grid import IGNORE, elementwise_mix, label_mix
from seglab.loss import dynamic_weight, sup_loss, unsup_loss
from seglab.network import SegNetwork, softmax_probs
from seglab.pseudo import (SOURCE_CONSERVATIVE, SOURCE_NONE,
                           SOURCE_PROGRESSIVE, PseudoLabels,
                           build_agreement_matrix, compose_union,
                           disagreement_indicator, label_agreement,
                           label_disagreement_cpcl)
from seglab.trainer import TrainConfig, run_experiment

SEEDS = (1, 2, 3)
EXPERIMENT_MODES = ("supervised-only", "cpcl", "intersection-only",
                    "union-only")
# Frozen directional-experiment configuration; every mode shares the
# same seeds, dataset and partition so only the coupling differs.
EXPERIMENT = dict(hidden=(8, 8), batch_labeled=8, batch_unlabeled=6,
                  gamma=3.0, max_iter=2000, eval_every=500, lr0=0.05,
                  fraction="1/8")


@pytest.fixture(scope="module")
def announce(request):
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def _line(text):
        if reporter is not None:
            reporter.write_line(text)
        else:
            print(text)
    return _line


def verdict(announce, num, name, ok, detail=""):
    suffix = f" ({detail})" if detail else ""
    announce(f"ACCEPTANCE {num} {name}: {'PASS' if ok else 'FAIL'}{suffix}")
    assert ok, f"criterion {num} {name} failed{suffix}"


# --- 1: agreement machinery vs brute force ---

def brute_matrix(y_c, y_p, c):
    m = np.zeros((c, c), dtype=np.int64)
    for a, b in zip(y_c.ravel().tolist(), y_p.ravel().tolist()):
        m[a, b] += 1
    return m


def brute_indicator(m):
    c = m.shape[0]
    out = np.zeros(c)
    for k in range(c):
        row = float(m[k].sum())
        col = float(m[:, k].sum())
        r1 = m[k, k] / row if row > 0 else 0.0
        r2 = m[k, k] / col if col > 0 else 0.0
        out[k] = 2.0 - r1 - r2
    return out


def brute_disagreement(y_c, y_p, ind):
    h, w = y_c.shape
    labels = np.full((h, w), IGNORE, dtype=np.int64)
    source = np.full((h, w), SOURCE_NONE, dtype=np.int64)
    for i in range(h):
        for j in range(w):
            a, b = int(y_c[i, j]), int(y_p[i, j])
            if a == b:
                continue
            if ind[b] > ind[a]:
                labels[i, j] = b
                source[i, j] = SOURCE_PROGRESSIVE
            else:
                labels[i, j] = a
                source[i, j] = SOURCE_CONSERVATIVE
    return labels, source


def brute_union(l_a, l_d):
    h, w = l_a.labels.shape
    labels = np.empty((h, w), dtype=np.int64)
    weights = np.empty((h, w))
    for i in range(h):
        for j in range(w):
            part = l_a if l_a.labels[i, j] != IGNORE else l_d
            labels[i, j] = part.labels[i, j]
            weights[i, j] = part.weights[i, j]
    return labels, weights


def test_criterion_1_agreement_oracles(announce):
    rng = np.random.default_rng(20240822)
    t0 = time.perf_counter()
    ok = True
    pairs = 1000
    for _ in range(pairs):
        c = int(rng.integers(2, 7))
        h = int(rng.integers(1, 17))
        w = int(rng.integers(1, 17))
        y_c = rng.integers(0, c, size=(h, w)).astype(np.int64)
        y_p = np.where(rng.random((h, w)) < 0.4, y_c,
                       rng.integers(0, c, size=(h, w))).astype(np.int64)

        m = build_agreement_matrix(y_c, y_p, c)
        ok &= np.array_equal(m, brute_matrix(y_c, y_p, c))

        ind = disagreement_indicator(m)
        ok &= np.abs(ind - brute_indicator(m)).max() <= 1e-12

        l_d = label_disagreement_cpcl(y_c, y_p, ind)
        want_lab, want_src = brute_disagreement(y_c, y_p, ind)
        ok &= np.array_equal(l_d.labels, want_lab)
        ok &= np.array_equal(l_d.source.astype(np.int64), want_src)

        l_a = label_agreement(y_c, y_p)
        l_a.weights[:] = rng.random((h, w))
        l_d.weights[:] = rng.random((h, w))
        union = compose_union(l_a, l_d)
        want_lab, want_wts = brute_union(l_a, l_d)
        ok &= np.array_equal(union.labels, want_lab)
        ok &= np.abs(union.weights - want_wts).max() <= 1e-12
        ok &= not (union.labels == IGNORE).any()
        if not ok:
            break
    elapsed = time.perf_counter() - t0
    ok = ok and elapsed < 10.0
    verdict(announce, 1, "agreement-oracles", ok,
            f"{pairs} pairs, {elapsed:.1f}s")


# --- 2: indicator hand case ---

def test_criterion_2_indicator_hand_case(announce):
    hand = disagreement_indicator(np.array([[3.0, 1.0], [2.0, 4.0]]))
    want = np.array([0.65, 8.0 / 15.0])
    ok = np.abs(hand - want).max() <= 1e-12

    rng = np.random.default_rng(3)
    for diag in ([5, 3], [4, 0, 2], list(rng.integers(0, 10, size=6))):
        m = np.diag(np.asarray(diag, dtype=np.float64))
        ind = disagreement_indicator(m)
        present = np.asarray(diag) > 0
        ok &= bool((np.abs(ind[present]) <= 1e-12).all())
    verdict(announce, 2, "indicator-hand-case", ok,
            f"I=({float(hand[0])}, {float(hand[1])}), "
            f"diagonals zero on present classes")


# --- 3: weight bounds and degenerate losses ---

def _random_probs(rng, c, h, w):
    return softmax_probs(rng.normal(size=(c, h, w)))


def test_criterion_3_weight_bounds_and_degenerate_losses(announce):
    rng = np.random.default_rng(11)
    ok = True
    for _ in range(50):
        c = int(rng.integers(2, 7))
        h = int(rng.integers(2, 13))
        w = int(rng.integers(2, 13))
        probs_c = _random_probs(rng, c, h, w)
        probs_p = _random_probs(rng, c, h, w)
        y_c = probs_c.argmax(axis=0).astype(np.int64)
        y_p = probs_p.argmax(axis=0).astype(np.int64)
        b_c = probs_c.max(axis=0)
        b_p = probs_p.max(axis=0)
        ind = disagreement_indicator(build_agreement_matrix(y_c, y_p, c))
        l_d = label_disagreement_cpcl(y_c, y_p, ind)
        wmap = dynamic_weight(y_c == y_p, b_c, b_p, l_d.source)
        ok &= bool((wmap >= 1.0 / c - 1e-12).all())
        ok &= bool((wmap <= 1.0 + 1e-12).all())

    for _ in range(10):
        c, h, w = 4, 8, 8
        y = rng.integers(0, c, size=(h, w)).astype(np.int64)
        onehot = np.zeros((c, h, w))
        onehot[y, np.arange(h)[:, None], np.arange(w)[None, :]] = 1.0
        full = PseudoLabels(labels=y.copy(), weights=np.ones((h, w)))
        v, _, _ = unsup_loss(full, full, onehot, onehot, np.ones((h, w)))
        ok &= v == 0.0

    worst = 0.0
    for _ in range(10):
        c, h, w = 4, 8, 8
        y = rng.integers(0, c, size=(h, w)).astype(np.int64)
        probs_cs = _random_probs(rng, c, h, w)
        probs_ps = _random_probs(rng, c, h, w)
        full = PseudoLabels(labels=y.copy(), weights=np.ones((h, w)))
        v, _, _ = unsup_loss(full, full, probs_cs, probs_ps,
                             np.ones((h, w)))
        rows = np.arange(h)[:, None]
        cols = np.arange(w)[None, :]
        want = (-np.log(probs_cs[y, rows, cols]).mean()
                - np.log(probs_ps[y, rows, cols]).mean())
        worst = max(worst, abs(v - want))
    ok &= worst <= 1e-12
    verdict(announce, 3, "weight-bounds-degenerate-losses", ok,
            f"unit-weight vs mean CE err {worst:.2e}")


# --- 4: gradient correctness ---

def numeric_grads(params, value_fn, h=1e-5):
    out = []
    for p in params:
        g = np.zeros_like(p)
        fp, fg = p.ravel(), g.ravel()
        for i in range(fp.size):
            keep = fp[i]
            fp[i] = keep + h
            hi = value_fn()
            fp[i] = keep - h
            lo = value_fn()
            fp[i] = keep
            fg[i] = (hi - lo) / (2.0 * h)
        out.append(g)
    return out


def max_rel_err(analytic, numeric):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


def test_criterion_4_gradient_check(announce):
    rng = np.random.default_rng(17)
    t0 = time.perf_counter()
    c, h, w = 3, 6, 6
    worst = 0.0

    for k in range(5):
        net = SegNetwork(c, hidden=(4,), init_seed=100 + k)
        assert net.num_parameters() <= 500
        x = rng.random((3, h, w))
        y = rng.integers(0, c, size=(h, w)).astype(np.int64)
        probs = softmax_probs(net.forward(x, train=True))
        _, g = sup_loss(y, probs)
        analytic = net.backward(g)

        def value():
            return sup_loss(y, softmax_probs(net.forward(x,
                                                         train=False)))[0]
        worst = max(worst, max_rel_err(analytic, numeric_grads(
            net.parameters(), value)))

    for k in range(5):
        net_c = SegNetwork(c, hidden=(4,), init_seed=200 + k)
        net_p = SegNetwork(c, hidden=(4,), init_seed=300 + k)
        x = rng.random((3, h, w))
        y_c = rng.integers(0, c, size=(h, w)).astype(np.int64)
        y_p = np.where(rng.random((h, w)) < 0.5, y_c,
                       rng.integers(0, c, size=(h, w))).astype(np.int64)
        ind = disagreement_indicator(build_agreement_matrix(y_c, y_p, c))
        l_a = label_agreement(y_c, y_p)
        l_d = label_disagreement_cpcl(y_c, y_p, ind)
        wmap = dynamic_weight(y_c == y_p,
                              rng.uniform(1.0 / c, 1.0, size=(h, w)),
                              rng.uniform(1.0 / c, 1.0, size=(h, w)),
                              l_d.source)
        l_a.weights[y_c == y_p] = wmap[y_c == y_p]
        l_d.weights[y_c != y_p] = wmap[y_c != y_p]
        l_union = compose_union(l_a, l_d)

        probs_cs = softmax_probs(net_c.forward(x, train=True))
        probs_ps = softmax_probs(net_p.forward(x, train=True))
        _, g_cs, g_ps = unsup_loss(l_a, l_union, probs_cs, probs_ps, wmap)
        analytic = net_c.backward(g_cs) + net_p.backward(g_ps)

        def value():
            pc = softmax_probs(net_c.forward(x, train=False))
            pp = softmax_probs(net_p.forward(x, train=False))
            return unsup_loss(l_a, l_union, pc, pp, wmap)[0]
        numeric = numeric_grads(net_c.parameters(), value) + \
            numeric_grads(net_p.parameters(), value)
        worst = max(worst, max_rel_err(analytic, numeric))

    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 60.0
    verdict(announce, 4, "gradient-check", ok,
            f"max rel err {worst:.2e}, {elapsed:.1f}s")


# --- 5: mix identities ---

def test_criterion_5_mix_identities(announce):
    rng = np.random.default_rng(23)
    ok = True
    for _ in range(100):
        c = int(rng.integers(2, 7))
        h = int(rng.integers(1, 13))
        w = int(rng.integers(1, 13))
        mask = (rng.random((h, w)) < 0.5).astype(np.float64)
        a = rng.random((3, h, w))
        b = rng.random((3, h, w))
        ok &= np.array_equal(elementwise_mix(a, a, mask), a)
        ok &= np.array_equal(elementwise_mix(a, b, np.zeros((h, w))), a)
        ok &= np.array_equal(elementwise_mix(a, b, np.ones((h, w))), b)

        la = rng.integers(0, c, size=(h, w)).astype(np.int64)
        lb = rng.integers(0, c, size=(h, w)).astype(np.int64)
        oh_a = np.zeros((c, h, w))
        oh_b = np.zeros((c, h, w))
        rows = np.arange(h)[:, None]
        cols = np.arange(w)[None, :]
        oh_a[la, rows, cols] = 1.0
        oh_b[lb, rows, cols] = 1.0
        mixed = elementwise_mix(oh_a, oh_b, mask).argmax(axis=0)
        ok &= np.array_equal(label_mix(la, lb, mask), mixed)
        if not ok:
            break
    verdict(announce, 5, "mix-identities", ok, "100 cases")


# --- 6: partition protocol ---

def test_criterion_6_partition_protocol(announce):
    samples = [Sample(image=np.zeros((3, 2, 2)),
                      label=np.zeros((2, 2), dtype=np.int64),
                      id=f"{i:05d}")
               for i in range(160)]
    lab, unl = partition(samples, "1/16", 123)
    lab_ids = [s.id for s in lab]
    unl_ids = [s.id for s in unl]
    ok = len(lab) == 10 and len(unl) == 150
    ok &= not set(lab_ids) & set(unl_ids)
    ok &= set(lab_ids) | set(unl_ids) == {s.id for s in samples}
    ok &= all(s.label is not None for s in lab)
    ok &= all(s.label is None for s in unl)

    lab2, unl2 = partition(samples, "1/16", 123)
    ok &= [s.id for s in lab2] == lab_ids
    ok &= [s.id for s in unl2] == unl_ids
    lab3, _ = partition(samples, "1/16", 124)
    ok &= [s.id for s in lab3] != lab_ids
    verdict(announce, 6, "partition-protocol", ok,
            f"{len(lab)} labeled / {len(unl)} unlabeled")


# --- 7, 8, 9: full experiment matrix ---

@pytest.fixture(scope="module")
def experiment_matrix(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept")
    train = str(root / "train")
    val = str(root / "val")
    t0 = time.perf_counter()
    train_spec = DatasetSpec(num_samples=160, height=32, width=32,
                             num_classes=4, noise_sigma=0.15, rng_seed=0)
    val_spec = DatasetSpec(num_samples=40, height=32, width=32,
                           num_classes=4, noise_sigma=0.15, rng_seed=1)
    save_dataset(generate_dataset(train_spec), train, train_spec)
    save_dataset(generate_dataset(val_spec), val, val_spec)
    results = {}
    for s in SEEDS:
        for mode in EXPERIMENT_MODES:
            cfg = TrainConfig(
                mode=mode, **EXPERIMENT,
                seed_net_c=10 * s + 1, seed_net_p=10 * s + 2,
                seed_data=10 * s + 3, seed_augment=10 * s + 4,
                dataset_dir=train, val_dir=val,
                out_dir=str(root / f"{mode}-s{s}"))
            results[(mode, s)] = run_experiment(cfg).final_miou
    return {"root": root, "train": train, "val": val, "results": results,
            "elapsed": time.perf_counter() - t0}


def test_criterion_7_directional_experiment(experiment_matrix, announce):
    r = experiment_matrix["results"]

    def mean(mode):
        return sum(r[(mode, s)] for s in SEEDS) / len(SEEDS)

    m_sup = mean("supervised-only")
    m_cpcl = mean("cpcl")
    m_inter = mean("intersection-only")
    m_union = mean("union-only")
    margin_sup = m_cpcl - m_sup
    margin_parts = m_cpcl - max(m_inter, m_union)
    elapsed = experiment_matrix["elapsed"]
    ok = margin_sup >= 0.02 and margin_parts >= -0.005 and elapsed < 900.0
    verdict(announce, 7, "directional-experiment", ok,
            f"cpcl={m_cpcl:.4f} sup={m_sup:.4f} inter={m_inter:.4f} "
            f"union={m_union:.4f} margin_sup={margin_sup:+.4f} "
            f"margin_parts={margin_parts:+.4f} {elapsed:.0f}s")


def test_criterion_8_strategy_flag_bit_exact(experiment_matrix, announce):
    root = experiment_matrix["root"]
    out = str(root / "strategy-explicit")
    rc = cli_main([
        "train", "--out", out,
        "--dataset", experiment_matrix["train"],
        "--val", experiment_matrix["val"],
        "--mode", "cpcl", "--strategy", "class-confusion-higher",
        "--gamma", "3.0", "--iters", "2000",
        "--seed-net-c", "11", "--seed-net-p", "12",
        "--seed-data", "13", "--seed-augment", "14",
        "--set", "net.hidden=[8,8]", "--set", "batch.unlabeled=6",
        "--set", "eval_every=500"])
    with open(str(root / "cpcl-s1" / "metrics.csv"), "rb") as f:
        default_bytes = f.read()
    with open(out + "/metrics.csv", "rb") as f:
        explicit_bytes = f.read()
    ok = rc == 0 and default_bytes == explicit_bytes
    verdict(announce, 8, "strategy-flag-bit-exact", ok,
            f"{len(default_bytes)} bytes compared")


def test_criterion_9_train_determinism(experiment_matrix, announce):
    root = experiment_matrix["root"]
    outs = []
    rcs = []
    for name in ("det-a", "det-b"):
        out = str(root / name)
        rcs.append(cli_main([
            "train", "--out", out,
            "--dataset", experiment_matrix["train"],
            "--val", experiment_matrix["val"],
            "--mode", "cpcl", "--gamma", "3.0", "--iters", "150",
            "--seed-net-c", "11", "--seed-net-p", "12",
            "--seed-data", "13", "--seed-augment", "14",
            "--set", "net.hidden=[8,8]", "--set", "batch.unlabeled=6",
            "--set", "eval_every=50"]))
        outs.append(out)
    with open(outs[0] + "/metrics.csv", "rb") as f:
        a = f.read()
    with open(outs[1] + "/metrics.csv", "rb") as f:
        b = f.read()
    ok = rcs == [0, 0] and a == b
    verdict(announce, 9, "train-determinism", ok,
            f"{len(a)} bytes compared")
