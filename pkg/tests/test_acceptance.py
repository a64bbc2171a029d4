"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the desk-scale
benchmark (criterion 5) takes most of the time.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from scalenc.autodiff import Tensor, functional as F
from scalenc.autodiff.gradcheck import check_gradients
from scalenc.backbone import SizeInjection
from scalenc.benchmark import BenchmarkConfig, load_data, run_benchmark
from scalenc.dataio import SyntheticSpec, synthetic_objects
from scalenc import config as cfgio
from scalenc import handcrafted as hc
from scalenc import selection as sel
from scalenc.evaluation import SoftmaxProbe, knn_accuracy, knn_predict
from scalenc.sdcl import compute_dilation, sdcl_forward, sdcl_inner
from scalenc.training import bt_loss, cross_correlation, moco_loss

from .conftest import naive_conv, t64
from .test_evaluation import brute_knn
from .test_handcrafted import disk_mask, ellipse_mask
from .test_sdcl import dilation_by_counting
from .test_selection import oracle_nll, planted, small_subsets


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return emit


# -- 1 -------------------------------------------------------------------------------------------

def _grad_cases(rng):
    x4 = lambda *s: t64(rng.normal(size=s))  # noqa: E731
    unit = lambda s: t64((lambda a: a / np.linalg.norm(a, axis=1, keepdims=True))(rng.normal(size=s)))  # noqa: E731
    stride, dil = int(rng.integers(1, 3)), (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
    sizes = rng.uniform(8, 120, size=(3, 2))
    inj = SizeInjection(4, rng=rng).to_dtype(np.float64)
    queue = unit((6, 5)).data
    lam = float(rng.uniform(0.001, 0.1))
    return {
        "conv2d": (lambda x, w, b: F.conv2d(x, w, b, stride=stride, dilation=dil), [x4(2, 2, 7, 7), x4(3, 2, 3, 3), x4(3)]),
        "sdcl": (lambda x, w, b: sdcl_forward(x, sizes, w, bias=b), [x4(3, 2, 6, 6), x4(2, 2, 3, 3), x4(2)]),
        "batch_norm": (lambda x, g, b: F.batch_norm(x, g, b, None, None, True), [x4(4, 3, 3, 3), x4(3), x4(3)]),
        "linear": (lambda v, w, b: F.linear(v, w, b), [x4(5, 4), x4(3, 4), x4(3)]),
        "max_pool": (lambda x: F.max_pool2d(x, 3, 3), [x4(2, 2, 6, 6)]),
        "avg_pool": (lambda x: F.global_avg_pool(x), [x4(2, 3, 4, 4)]),
        "upsample": (lambda x: F.upsample_nearest(x, 3), [x4(1, 2, 3, 3)]),
        "bt_loss": (lambda a, b: bt_loss(a, b, lam=lam), [x4(6, 4), x4(6, 4)]),
        "moco_loss": (lambda q, k: moco_loss(q, k, queue, 0.3), [unit((3, 5)), unit((3, 5))]),
        "size_injection": (lambda e, s: inj(e, s), [x4(4, 4), t64(rng.uniform(0.3, 3, size=(4, 2)))]),
    }


def test_criterion_1_gradient_suite(report):
    start = time.perf_counter()
    worst = {}
    for seed in range(10):
        for name, (fn, inputs) in _grad_cases(np.random.default_rng(seed)).items():
            worst[name] = max(worst.get(name, 0.0), check_gradients(fn, inputs, seed=seed))
    elapsed = time.perf_counter() - start
    bad = {k: v for k, v in worst.items() if not v < 1e-4}
    detail = f"{len(worst)} ops x 10 seeds, worst rel err {max(worst.values()):.2e}, {elapsed:.1f}s"
    report(1, not bad and elapsed < 300, detail + (f", failing {bad}" if bad else ""))


# -- 2 -------------------------------------------------------------------------------------------

def test_criterion_2_sdcl_exactness(report):
    mismatches = [(a, u) for u in (1, 2, 3) for a in range(1, 513) if compute_dilation(a, u) != dilation_by_counting(a, u)]

    rng = np.random.default_rng(0)
    x = Tensor(rng.uniform(size=(6, 3, 32, 32)))
    w = np.zeros((3, 3, 3, 3))
    w[np.arange(3), np.arange(3), 1, 1] = 1.0
    sizes = rng.uniform(4, 300, size=(6, 2))
    identity = np.array_equal(sdcl_forward(x, sizes, Tensor(w)).data, x.data)

    worst = 0.0
    for case in range(100):
        r = np.random.default_rng(1000 + case)
        n, c, o = int(r.integers(1, 4)), int(r.integers(1, 4)), int(r.integers(1, 4))
        h, wd = int(r.integers(3, 12)), int(r.integers(3, 12))
        xs, ws = r.normal(size=(n, c, h, wd)), r.normal(size=(o, c, 3, 3))
        dh, dw = r.integers(1, 6, n), r.integers(1, 6, n)
        out = sdcl_inner(Tensor(xs), Tensor(ws), dh, dw).data
        for b in range(n):
            ref = naive_conv(xs[b : b + 1], ws, 1, (int(dh[b]), int(dw[b])))
            worst = max(worst, float(np.abs(out[b : b + 1] - ref).max()))
    ok = not mismatches and identity and worst < 1e-5
    report(2, ok, f"sweep mismatches {len(mismatches)}/1536, identity exact {identity}, "
                  f"100 oracle cases max abs err {worst:.1e}")


# -- 3 -------------------------------------------------------------------------------------------

def test_criterion_3_loss_unit_values(report):
    z = lambda rows: Tensor(np.array(rows, dtype=np.float64), dtype=np.float64)  # noqa: E731
    lam = 0.005
    zero = bt_loss(z([[1, 1], [1, -1]]), z([[1, 1], [1, -1]]), lam).item()
    two_lam = bt_loss(z([[1, -1], [-1, 1]]), z([[1, -1], [-1, 1]]), lam).item()
    a = Tensor(np.random.default_rng(0).normal(size=(12, 7)), dtype=np.float64)
    diag = float(((1 - np.diag(cross_correlation(a, -a).data)) ** 2).sum())
    q = np.random.default_rng(1).normal(size=(1, 8))
    q /= np.linalg.norm(q)
    K = 31
    moco = moco_loss(Tensor(q, dtype=np.float64), Tensor(q, dtype=np.float64), np.repeat(q, K, axis=0), 0.07).item()
    errs = [abs(zero), abs(two_lam - 2 * lam), abs(diag - 4 * 7), abs(moco - np.log(K + 1))]
    report(3, max(errs) < 1e-6, "BT 0 / 2λ / 4d and MoCo ln(K+1) errors " + ", ".join(f"{e:.1e}" for e in errs))


# -- 4 -------------------------------------------------------------------------------------------

def test_criterion_4_handcrafted(report):
    const = hc.extract_features(np.full((40, 40, 3), 0.5), disk_mask((40, 40), 20, 20, 10))
    const_ok = (len(const) == len(hc.FEATURE_NAMES) == 68
                and all(const[n] == 0 for n in hc.FEATURE_NAMES if "_std_" in n or "_gran_" in n)
                and abs(const["nucleus_circularity"] - 1) < 0.1)
    rect = np.zeros((30, 50), bool)
    rect[10:20, 10:40] = True
    s = hc.shape_features(rect)
    rect_ok = s["width"] == 30 and s["height"] == 10 and abs(s["elongation"] - 3) < 1e-9
    m = ellipse_mask((41, 41), 13, 6, 0.4)
    img = np.random.default_rng(0).uniform(size=(41, 41, 3))
    f0, f1 = hc.extract_features(img, m), hc.extract_features(np.rot90(img), np.rot90(m))
    rot_ok = (f0["nucleus_width"], f0["nucleus_height"]) == (f1["nucleus_height"], f1["nucleus_width"]) and \
        abs(f0["nucleus_circularity"] - f1["nucleus_circularity"]) <= 0.05 * f0["nucleus_circularity"]

    # two classes differing only in size; probe on the area column alone
    spec = dict(size_ranges=((12, 20), (30, 45)), texture_cycles=(3.0, 3.0))
    train = synthetic_objects(SyntheticSpec(n_objects=300, seed=21, **spec))
    test = synthetic_objects(SyntheticSpec(n_objects=200, seed=22, **spec))
    area = hc.FEATURE_NAMES.index("nucleus_area")
    xa = hc.feature_matrix(train)[0][:, [area]]
    xb = hc.feature_matrix(test)[0][:, [area]]
    mu, sd = xa.mean(), xa.std()
    probe = SoftmaxProbe(2).fit((xa - mu) / sd, train.labels)
    acc = float(np.mean(probe.predict((xb - mu) / sd) == test.labels))
    ok = const_ok and rect_ok and rot_ok and acc >= 0.95
    report(4, ok, f"68 features, constant {const_ok}, rectangle {rect_ok}, rotation {rot_ok}, "
                  f"area-only probe {100 * acc:.1f}%")


# -- 5 -------------------------------------------------------------------------------------------

DESK = dict(
    methods=("supervised", "bt", "random"),
    variants=("plain", "sdcl", "sdcl+size"),
    seeds=(0, 1, 2, 3, 4),
    synth_train=2000,
    synth_test=500,
    block_widths=(8, 16, 32),
    block_depths=(1, 1, 1),
    supervised_epochs=5,
    ssl_epochs=25,
    batch_size=32,
    lr=2e-3,
    val_linear=False,
)
# cells the criterion reads; the rest of the grid is skipped to stay inside the time budget
DESK_CELLS = [("supervised", "plain"), ("supervised", "sdcl"), ("bt", "sdcl+size"), ("random", "sdcl+size")]


def test_criterion_5_desk_scale_trends(report, tmp_path):
    start = time.perf_counter()
    base = BenchmarkConfig(**DESK)
    data = load_data(base)
    rows = []
    for method, variant in DESK_CELLS:
        cfg = BenchmarkConfig(**{**DESK, "methods": (method,), "variants": (variant,)})
        cfg.out_dir = str(tmp_path / f"{method}_{variant}")
        manifest, _ = run_benchmark(cfg, data)
        rows.extend(manifest.rows)
    elapsed = time.perf_counter() - start

    def knn(method, variant):
        vals = [r["knn_acc"] for r in rows if (r["method"], r["variant"]) == (method, variant) and r["status"] == "ok"]
        return 100 * float(np.mean(vals)) if len(vals) == 5 else float("nan")

    sup_plain, sup_sdcl = knn("supervised", "plain"), knn("supervised", "sdcl")
    bt, rnd = knn("bt", "sdcl+size"), knn("random", "sdcl+size")
    chance = 100 / data.num_classes
    a = sup_sdcl >= sup_plain - 1
    b = bt >= chance + 30 and bt >= rnd + 15
    detail = (f"(a) supervised kNN sdcl {sup_sdcl:.1f} vs plain {sup_plain:.1f} -> {a}; "
              f"(b) BT+SD-CL+Size {bt:.1f} vs chance {chance:.1f}+30 and random {rnd:.1f}+15 -> {b}; "
              f"{elapsed / 60:.1f} min")
    report(5, a and b and elapsed < 3600, detail)


# -- 6 -------------------------------------------------------------------------------------------

def test_criterion_6_knn_oracle(report):
    agree = 0
    for seed in range(20):
        r = np.random.default_rng(500 + seed)
        n, m, d, k = int(r.integers(50, 800)), int(r.integers(10, 200)), int(r.integers(1, 16)), int(r.integers(1, 80))
        integer = seed % 2 == 1  # odd instances sit on a coarse grid so exact distance ties occur
        if integer:
            train, test = r.integers(-2, 3, (n, d)).astype(float), r.integers(-2, 3, (m, d)).astype(float)
        else:
            train, test = r.normal(size=(n, d)), r.normal(size=(m, d))
        y, yt = r.integers(0, 4, n), r.integers(0, 4, m)
        ref = brute_knn(train, y, test, k)
        same = np.array_equal(knn_predict(train, y, test, k), ref)
        same &= knn_accuracy(train, y, test, yt, k=k) == float(np.mean(ref == yt))
        agree += bool(same)
    report(6, agree == 20, f"{agree}/20 instances identical to the brute-force oracle")


# -- 7 -------------------------------------------------------------------------------------------

def test_criterion_7_stepwise_selection(report):
    first = 0
    ranking = 0
    for trial in range(20):
        X, y, split, strong, _ = planted(100 + trial)
        scorer = sel.Scorer(sel.prepare(X, y, split))
        path = sel._forward(scorer)
        first += bool(path.steps) and path.steps[0][0] == strong
        subsets = small_subsets(X.shape[1])
        ours = np.array([scorer.nll(s) for s in subsets])
        ref = np.array([oracle_nll(X, y, split, s) for s in subsets])
        ok = True
        for size in (1, 2):
            idx = [i for i, s in enumerate(subsets) if len(s) == size]
            ok &= subsets[idx[int(np.argmin(ours[idx]))]] == subsets[idx[int(np.argmin(ref[idx]))]]
        # pairwise order of every subset whose oracle NLLs differ by more than probe noise
        gap = ref[:, None] - ref[None, :]
        clear = np.abs(gap) > 0.01
        ok &= bool(np.all(np.sign(ours[:, None] - ours[None, :])[clear] == np.sign(gap)[clear]))
        ranking += ok
    report(7, first >= 19 and ranking == 20,
           f"planted feature first in {first}/20 trials; size<=2 oracle ranking matched in {ranking}/20")


# -- 8 -------------------------------------------------------------------------------------------

def test_criterion_8_full_reproduction_documented(report):
    path = Path(__file__).resolve().parents[1] / "configs" / "full_protocol.conf"
    cfg = cfgio.build(BenchmarkConfig, cfgio.parse_file(path))
    shaped = (cfg.epochs, cfg.batch_size, len(cfg.seeds), len(cfg.cells())) == (100, 128, 20, 20 * 17)
    report(8, shaped, "not gating: configs/full_protocol.conf encodes the full protocol (100 epochs, batch 128, "
                      "20 repeats, every method and variant) for `scalenc benchmark` on prepared public data")
