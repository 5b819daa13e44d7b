"""Acceptance gate. Each test prints one ``criterion N: PASS|FAIL`` line.

The desk experiments (criteria 6 to 10) share module-scoped fixtures so the
fifteen three-variant training runs happen once.
"""
import os
import statistics
import time

import numpy as np
import pytest

from conftest import random_dense_net
from maarcert import experiments as ex
from maarcert import zonotope as zt
from maarcert.attack import AttackConfig, input_pgd_batch, latent_pgd_batch
from maarcert.certify import certify_dataset, complete_verify
from maarcert.config import load_config
from maarcert.maar import StagePlan, TrainingConfig, batch_loss, train_step
from maarcert.nn import autodiff as ad
from maarcert.nn import init_network
from maarcert.nn.network import apply_layer
from maarcert.zonotope import region_at
from oracles import enumerate_bounds, exact_worst_margin, pattern_count

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DESK = os.path.join(ROOT, "configs", "desk.cfg")
SEEDS = range(5)
VARIANTS = ("maar", "colt", "mat")

pytestmark = pytest.mark.slow


@pytest.fixture
def line(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
        return ok

    return emit


# -- 1: zonotope soundness -------------------------------------------------------
def soundness_net(seed):
    r = np.random.default_rng(seed)
    if seed % 5 == 4:
        arch = [("conv", int(r.integers(2, 5)), 3, 1, 1), ("dense", int(r.integers(4, 17))), ("dense", 3)]
        return init_network(arch, (1, 4, 4), seed)
    depth = int(r.integers(1, 4))
    sizes = [int(r.integers(2, 9))] + [int(r.integers(2, 17)) for _ in range(depth - 1)] + [int(r.integers(2, 6))]
    return random_dense_net(seed, sizes)


def test_criterion_1_zonotope_soundness(line):
    start = time.perf_counter()
    violations = checked = 0
    for seed in range(50):
        net = soundness_net(seed)
        r = np.random.default_rng(1000 + seed)
        x = r.uniform(size=net.input_shape)
        Z = zt.input_region(x, float(r.uniform(0.01, 0.3)))
        E = r.uniform(-1, 1, size=(10_000, Z.num_generators))
        E[:100] = np.sign(E[:100])
        h = Z.center + np.tensordot(E, Z.generators, axes=1)
        current = Z
        for layer in net.layers:
            h = apply_layer(layer, h)
            current = zt.propagate(current, net, current.layer_tag + 1)
            b = zt.bounds(current)
            violations += int(np.sum((h < b.lower - 1e-9) | (h > b.upper + 1e-9)))
            checked += h.size
    elapsed = time.perf_counter() - start
    ok = violations == 0 and elapsed < 120
    line(1, ok, f"{violations} violations over {checked} neuron values, {elapsed:.1f}s")
    assert ok


# -- 2: bounds exactness ------------------------------------------------------------
def test_criterion_2_bounds_exact(line):
    r = np.random.default_rng(2)
    worst = 0.0
    for trial in range(300):
        m, n = trial % 13, int(r.integers(1, 9))
        c, A = r.normal(size=n) * 3, r.normal(size=(n, m)) * r.uniform(0.1, 5)
        b = zt.bounds(zt.from_arrays(c, A))
        lo, hi = enumerate_bounds(c, A)
        worst = max(worst, np.abs(b.lower - lo).max(), np.abs(b.upper - hi).max())
    ok = worst <= 1e-12
    line(2, ok, f"max deviation {worst:.2e} over 300 zonotopes with m in 0..12")
    assert ok


# -- 3: Cauchy estimator ------------------------------------------------------------
def test_criterion_3_cauchy(line):
    within = total = 0
    for seed in range(100):
        r = np.random.default_rng(seed)
        A = r.normal(size=(8, 20))
        est = zt.l1_rows_cauchy(zt.from_arrays(np.zeros(8), A), 1000, seed)
        exact = np.abs(A).sum(axis=1)
        within += int(np.sum(np.abs(est - exact) <= 0.1 * exact))
        total += 8
    frac = within / total
    ok = frac >= 0.95
    line(3, ok, f"{within}/{total} rows within 10% ({frac:.4f}), k=1000, seeds 0..99")
    assert ok


# -- 4: MAAR gradients ----------------------------------------------------------------
class Recorder:
    def step(self, params, grads, epoch):
        self.grads = {k: v.copy() for k, v in grads.items()}


def gradient_case(seed, h=1e-5):
    r = np.random.default_rng(seed)
    if seed % 2:
        net = init_network([("conv", 3, 3, 1, 0), ("dense", 8), ("dense", 3)], (1, 5, 5), seed)
    else:
        net = init_network([("dense", 10), ("dense", 10), ("dense", 3)], (4,), seed)
    for _, arr in net.named_parameters():
        arr += r.normal(scale=0.1, size=arr.shape)
    layer = seed % 3 if seed % 2 == 0 else seed % 2
    net.freeze_blocks(layer)
    X = r.uniform(size=(6,) + net.input_shape)
    Y = r.integers(0, 3, size=6)
    cfg = TrainingConfig(eps=0.1, lam=6.0, attack=AttackConfig(0.25, 5), stage_plan=[StagePlan(layer, 1)])
    rec = Recorder()
    train_step(net, layer, X, Y, cfg, rec, 0, np.random.default_rng(seed))
    rng = np.random.default_rng(seed)
    x_adv, _, _ = latent_pgd_batch(region_at(net, X, cfg.eps, layer), net, Y, cfg.attack, rng)

    def loss():
        p_nat = ad.softmax(net.graph_forward(X, 0))
        p_adv = ad.softmax(net.graph_forward(x_adv, layer))
        return float(batch_loss("maar", p_nat, p_adv, Y, 6.0)[0].value)

    worst = -np.inf
    for name, arr in net.named_parameters(trainable_only=True):
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = loss()
            arr[idx] = old - h
            dn = loss()
            arr[idx] = old
            fd = (up - dn) / (2 * h)
            worst = max(worst, abs(rec.grads[name][idx] - fd) - (1e-6 + 1e-4 * abs(fd)))
    return worst, net.parameter_count()


def test_criterion_4_maar_gradients(line):
    results = [gradient_case(seed) for seed in range(20)]
    worst = max(w for w, _ in results)
    biggest = max(c for _, c in results)
    ok = worst <= 0 and biggest <= 500
    line(4, ok, f"20 seeds, nets up to {biggest} params, worst excess over 1e-6 + 1e-4|fd|: {worst:.2e}")
    assert ok


# -- 5: complete verifier vs exhaustive region enumeration -----------------------------
def test_criterion_5_complete_oracle(line):
    start = time.perf_counter()
    r = np.random.default_rng(5)
    agree = falsified_ok = falsified = 0
    n = 0
    while n < 200:
        seed = int(r.integers(1 << 30))
        net = random_dense_net(seed, [2, 6, 6, 3])
        x = r.uniform(size=2)
        y = int(np.argmax(net.forward_from(x, 0)))
        eps = float(r.uniform(0.02, 0.3))
        worst, _ = exact_worst_margin(net, x, y, eps)
        if abs(worst) < 1e-6:
            continue
        n += 1
        res = complete_verify(net, x, y, eps, budget=100_000)
        expected = "verified" if worst < 0 else "falsified"
        agree += res.status == expected
        if res.status == "falsified":
            falsified += 1
            lo, hi = np.maximum(0, x - eps), np.minimum(1, x + eps)
            inside = np.all(res.x_adv >= lo - 1e-9) and np.all(res.x_adv <= hi + 1e-9)
            falsified_ok += bool(inside and np.argmax(net.forward_from(res.x_adv, 0)) != y)
    elapsed = time.perf_counter() - start
    ok = agree == 200 and falsified_ok == falsified and elapsed < 300 and pattern_count(net) <= 12
    line(5, ok, f"{agree}/200 agree, {falsified_ok}/{falsified} counterexamples checked, {elapsed:.1f}s")
    assert ok


# -- desk experiments -----------------------------------------------------------------
@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    base = load_config(DESK)
    root = tmp_path_factory.mktemp("desk")
    runs = {}
    start = time.perf_counter()
    for seed in SEEDS:
        for variant in VARIANTS:
            cfg = base.replace(seed=seed, loss_variant=variant, out_dir=str(root / f"{variant}_{seed}"))
            tr = ex.run_train(cfg)
            cert = ex.run_certify(cfg, os.path.join(tr["dir"], "stage_1.json"))
            runs[variant, seed] = {"cfg": cfg, "train": tr, "certify": cert}
    return {"runs": runs, "elapsed": time.perf_counter() - start}


@pytest.fixture(scope="module")
def desk_sweep(tmp_path_factory):
    cfg = load_config(DESK).replace(out_dir=str(tmp_path_factory.mktemp("sweep")))
    return ex.run_sweep_lambda(cfg, [2, 4, 6, 8, 10])


def test_criterion_6_pipeline_soundness(line, desk_runs):
    violations = reattacked = 0
    for (variant, seed), run in desk_runs["runs"].items():
        cfg, verdicts = run["cfg"], run["certify"]["verdicts"]
        _, te = ex.load_data(cfg)
        idx = np.array([i for i, v in enumerate(verdicts) if v.verified])
        base = cfg.certification().attack
        strong = AttackConfig(base.step_size, 10 * base.steps, 10 * base.restarts)
        _, broken = input_pgd_batch(run["certify"]["net"], te.X[idx], te.y[idx], cfg.certify_eps, strong, np.random.default_rng(seed + 99))
        violations += int(broken.sum())
        reattacked += idx.size
    ok = violations == 0
    line(6, ok, f"{violations} of {reattacked} verified examples broken by 10x-budget PGD")
    assert ok


def test_criterion_7_directional(line, desk_runs):
    runs = desk_runs["runs"]
    cr = {v: statistics.median(runs[v, s]["certify"]["metrics"].cr for s in SEEDS) for v in VARIANTS}
    acc = {v: statistics.median(runs[v, s]["certify"]["metrics"].acc for s in SEEDS) for v in VARIANTS}
    ve_drop = []
    for stage in range(2):
        first = statistics.median(runs["maar", s]["train"]["reports"][stage].epochs[0].verified_error for s in SEEDS)
        last = statistics.median(runs["maar", s]["train"]["reports"][stage].epochs[-1].verified_error for s in SEEDS)
        ve_drop.append((first, last))
    a = cr["maar"] >= cr["colt"]
    b = acc["mat"] < acc["colt"]
    c = all(last < first for first, last in ve_drop)
    fast = desk_runs["elapsed"] < 1800
    gap = 100 * (cr["maar"] - cr["colt"])
    detail = (
        f"(a) median CR maar {cr['maar']:.4f} vs colt {cr['colt']:.4f}, gap {gap:+.1f} pp; "
        f"(b) median acc mat {acc['mat']:.4f} vs colt {acc['colt']:.4f}; "
        f"(c) maar VE first->last " + ", ".join(f"stage {i}: {f:.3f}->{l:.3f}" for i, (f, l) in enumerate(ve_drop))
        + f"; {desk_runs['elapsed']:.0f}s"
    )
    ok = a and b and c and fast
    line(7, ok, detail)
    assert a, detail
    assert b, detail
    assert c, detail
    assert fast, detail


def test_criterion_8_lambda_sweep(line, desk_sweep):
    rows = desk_sweep["rows"]
    crs = [r["cr"] for r in rows]
    distinct = len(set(crs)) == len(crs)
    ok = [r["lambda"] for r in rows] == [2.0, 4.0, 6.0, 8.0, 10.0] and distinct
    pairs = ", ".join(f"lambda {r['lambda']:g}: acc {r['acc']:.4f} cr {r['cr']:.4f}" for r in rows)
    gaps = np.diff(sorted(crs))
    line(8, ok, f"{pairs}; smallest CR gap {gaps.min():.4f}")
    text = open(os.path.join(desk_sweep["dir"], "sweep.txt")).read()
    assert all(f"{r['cr']:.4f}" in text for r in rows)
    assert ok


def test_criterion_9_metric_identities(line, desk_runs, desk_sweep):
    bad = []
    for key, run in desk_runs["runs"].items():
        m = run["certify"]["metrics"]
        if m.cr > m.acc:
            bad.append(f"{key} cr>acc")
        cfg = run["cfg"].replace(cert_eps=0.0)
        _, te = ex.load_data(cfg)
        net = run["certify"]["net"]
        verdicts = certify_dataset(net, te.X, te.y, 0.0, cfg.certification())
        correct = np.argmax(net.forward_from(te.X, 0), axis=1) == te.y
        cr0 = sum(v.verified for v in verdicts) / len(verdicts)
        if cr0 != correct.mean():
            bad.append(f"{key} cr(0)={cr0} acc={correct.mean()}")
        _, broken = input_pgd_batch(net, te.X[correct], te.y[correct], 0.0, cfg.certification().attack, np.random.default_rng(0))
        if broken.any():
            bad.append(f"{key} ve(0)>0")
    for r in desk_sweep["rows"]:
        if r["cr"] > r["acc"]:
            bad.append(f"lambda {r['lambda']} cr>acc")
    ok = not bad
    line(9, ok, f"{len(desk_runs['runs']) + len(desk_sweep['rows'])} certify runs checked; " + ("; ".join(bad) or "no violations"))
    assert ok


def tree_bytes(root):
    out = {}
    for dirpath, dirs, files in os.walk(root):
        dirs[:] = [d for d in dirs if not d.startswith(".")]
        for f in files:
            if f != ".lock":
                p = os.path.join(dirpath, f)
                out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


def test_criterion_10_determinism(line, desk_runs, tmp_path):
    first = desk_runs["runs"]["maar", 0]
    cfg = first["cfg"].replace(out_dir=str(tmp_path / "again"))
    tr = ex.run_train(cfg)
    ex.run_certify(cfg, os.path.join(tr["dir"], "stage_1.json"))
    a, b = tree_bytes(first["cfg"].out_dir), tree_bytes(cfg.out_dir)
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    ok = not differing and len(a) == 7
    line(10, ok, f"{len(a)} artifacts compared, {len(differing)} differ" + (f": {differing}" if differing else ""))
    assert ok
