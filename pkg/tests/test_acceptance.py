"""Acceptance criteria, each reported as one PASS/FAIL line.

Criteria 1-4 and 9 are fast. Criteria 5-8 run the full desk reproduction
with the default configuration (twice, for the determinism check), which
is the bulk of the suite's runtime (see the ``reproduction`` fixtures in
conftest.py).
"""

import math
import time

import numpy as np

from hail.autodiff import (
    Tensor,
    add,
    backward,
    box_sum3d,
    channel_stats,
    check_gradients,
    conv3d,
    div,
    maxpool3d,
    mean,
    mul,
    neg,
    power,
    relu,
    reshape,
    sqrt,
    square,
    sub,
    tabs,
    tsum,
    upsample_nearest3d,
)
from hail.losses import consistency_loss, content_loss, l1_loss, reconstruction_loss, ssim_loss, style_loss
from hail.metrics import DEFAULT_BINS, GM, WM, Histogram, histogram, nwd, ravd, wasserstein_1d
from hail.model import HailModel, ModelCheckpoint, ModelConfig, adain, decode_checkpoint, encode_checkpoint
from hail.phantom import DEFAULT_PROFILES, LabelMap, apply_site_profile, generate_anatomy
from hail.pipeline import block_means, format_ablation_table
from hail.volume import NormalizationRecord, Volume, decode_volume, encode_volume, minmax_normalize

from oracles import channel_stats_two_pass, conv3d_naive, maxpool3d_naive, upsample_naive

N_SHAPES = 20
PROBES = 24


def rand(rng, shape, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, shape).astype(np.float32)


def small_shape(rng, ndim=None):
    ndim = int(rng.integers(1, 5)) if ndim is None else ndim
    return tuple(int(n) for n in rng.integers(1, 5, ndim))


def vol5(rng, lo=1, hi=5, even=False):
    spatial = rng.integers(lo, hi, 3)
    if even:
        spatial = 2 * rng.integers(1, 3, 3)
    return (int(rng.integers(1, 3)), int(rng.integers(1, 4))) + tuple(int(n) for n in spatial)


def weighted(rng, shape):
    """Random linear read-out so every output element reaches the loss with its own weight."""
    w = Tensor(rand(rng, shape))
    return lambda out: tsum(out * w)


# -- criterion 1 ---------------------------------------------------------------------------------------------
# each case builds (f, x) for one random shape; f maps a tensor to a scalar
def _binary(op, lo=-1.0, hi=1.0, other_lo=-1.0, other_hi=1.0, side=0):
    def build(rng):
        shape = small_shape(rng)
        # broadcast the fixed operand over a random subset of axes
        oshape = tuple(1 if rng.random() < 0.3 else n for n in shape)
        other = Tensor(rand(rng, oshape, other_lo, other_hi))
        read = weighted(rng, shape)
        x = rand(rng, shape, lo, hi)
        if side == 0:
            return (lambda t: read(op(t, other))), x
        return (lambda t: read(op(other, t))), x

    return build


def _unary(op, lo=-1.0, hi=1.0):
    def build(rng):
        shape = small_shape(rng)
        read = weighted(rng, shape)
        return (lambda t: read(op(t))), rand(rng, shape, lo, hi)

    return build


def _reduction(op):
    def build(rng):
        shape = small_shape(rng, int(rng.integers(2, 5)))
        axis = int(rng.integers(len(shape)))
        keep = bool(rng.integers(2))
        out_shape = np.sum(np.zeros(shape), axis=axis, keepdims=keep).shape
        read = weighted(rng, out_shape)
        return (lambda t: read(op(t, axis=axis, keepdims=keep))), rand(rng, shape)

    return build


def _full_reduction(op):
    def build(rng):
        shape = small_shape(rng)
        return (lambda t: square(op(t))), rand(rng, shape)

    return build


def _reshape(rng):
    shape = small_shape(rng)
    target = tuple(reversed(shape)) + (1,)
    read = weighted(rng, target)
    return (lambda t: read(reshape(t, target))), rand(rng, shape)


def _conv(which):
    def build(rng):
        shape = vol5(rng)
        cout = int(rng.integers(1, 4))
        x, w, b = rand(rng, shape), rand(rng, (cout, shape[1], 3, 3, 3)), rand(rng, (cout,))
        read = weighted(rng, (shape[0], cout) + shape[2:])
        if which == "input":
            return (lambda t: read(conv3d(t, Tensor(w), Tensor(b)))), x
        if which == "weight":
            return (lambda t: read(conv3d(Tensor(x), t, Tensor(b)))), w
        return (lambda t: read(conv3d(Tensor(x), Tensor(w), t))), b

    return build


def _maxpool(rng):
    shape = vol5(rng, even=True)
    read = weighted(rng, shape[:2] + tuple(n // 2 for n in shape[2:]))
    return (lambda t: read(maxpool3d(t))), rand(rng, shape)


def _upsample(rng):
    shape = vol5(rng, 1, 3)
    read = weighted(rng, shape[:2] + tuple(2 * n for n in shape[2:]))
    return (lambda t: read(upsample_nearest3d(t))), rand(rng, shape)


def _stats(k):
    def build(rng):
        shape = vol5(rng, 2, 4)
        read = weighted(rng, shape[:2])
        return (lambda t: read(channel_stats(t)[k])), rand(rng, shape)

    return build


def _box(rng):
    shape = vol5(rng, 2, 6)
    size = int(rng.integers(1, min(shape[2:]) + 1))
    read = weighted(rng, shape[:2] + tuple(n - size + 1 for n in shape[2:]))
    return (lambda t: read(box_sum3d(t, size))), rand(rng, shape)


def _pair_loss(loss, lo=7, hi=10):
    def build(rng):
        shape = (int(rng.integers(1, 3)), 1) + tuple(int(n) for n in rng.integers(lo, hi, 3))
        x = rand(rng, shape, 0.0, 1.0)
        # keep |x - other| well above the step so no probe straddles the L1 kink
        gap = rng.uniform(0.01, 0.2, shape) * rng.choice([-1.0, 1.0], shape)
        other = Tensor((x + gap).astype(np.float32))
        return (lambda t: loss(t, other)), x

    return build


def _feature_loss(kind):
    def build(rng):
        nb = int(rng.integers(1, 3))
        shapes = [(nb, int(rng.integers(1, 4))) + (s,) * 3 for s in (4, 2)]
        fixed = [Tensor(rand(rng, s, 0.0, 1.0)) for s in shapes]
        x = rand(rng, shapes[1], 0.0, 1.0)
        if kind == "style":
            target = [Tensor(rand(rng, shapes[0])), fixed[1]]
            return (lambda t: style_loss([fixed[0], t], target)), x
        return (lambda t: content_loss([fixed[0], t], fixed[1])), x

    return build


def _adain(which):
    def build(rng):
        shape = vol5(rng, 2, 4)
        other = Tensor(rand(rng, shape, -2.0, 2.0))
        read = weighted(rng, shape)
        x = rand(rng, shape, -2.0, 2.0)
        if which == "content":
            return (lambda t: read(adain(t, other))), x
        return (lambda t: read(adain(other, t))), x

    return build


GRADIENT_CASES = {
    "add": _binary(add),
    "add (rhs)": _binary(add, side=1),
    "sub": _binary(sub),
    "sub (rhs)": _binary(sub, side=1),
    "mul": _binary(mul),
    "mul (rhs)": _binary(mul, side=1),
    "div": _binary(div, other_lo=0.5, other_hi=2.0),
    "div (denominator)": _binary(div, 0.5, 2.0, side=1),
    "neg": _unary(neg),
    "power": _unary(lambda t: power(t, 1.7), 0.2, 2.0),
    "sqrt": _unary(sqrt, 0.2, 2.0),
    "square": _unary(square),
    "abs": _unary(tabs),
    "relu": _unary(relu),
    "sum (axis)": _reduction(tsum),
    "mean (axis)": _reduction(mean),
    "sum (all)": _full_reduction(tsum),
    "mean (all)": _full_reduction(mean),
    "reshape": _reshape,
    "conv3d (input)": _conv("input"),
    "conv3d (weight)": _conv("weight"),
    "conv3d (bias)": _conv("bias"),
    "maxpool3d": _maxpool,
    "upsample3d": _upsample,
    "channel mean": _stats(0),
    "channel std": _stats(1),
    "box sum": _box,
    "adain (content)": _adain("content"),
    "adain (style)": _adain("style"),
    "l1 loss": _pair_loss(l1_loss, 2, 5),
    "ssim loss": _pair_loss(ssim_loss),
    "reconstruction loss": _pair_loss(reconstruction_loss),
    "consistency loss": _pair_loss(consistency_loss),
    "style loss": _feature_loss("style"),
    "content loss": _feature_loss("content"),
}


def test_criterion_1_gradient_checks(verdict):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst, failures = {}, []
    for name, build in GRADIENT_CASES.items():
        for k in range(N_SHAPES):
            f, x = build(rng)
            err = check_gradients(f, x, max_probes=PROBES, seed=k)
            worst[name] = max(worst.get(name, 0.0), err)
            if not err < 1e-2:
                failures.append(f"{name} #{k} {tuple(x.shape)}: {err:.2e}")
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 60.0
    top = max(worst, key=worst.get)
    verdict(
        1,
        ok,
        f"{len(GRADIENT_CASES)} ops/losses x {N_SHAPES} shapes, worst rel. error {worst[top]:.1e} ({top}), "
        f"{elapsed:.1f}s",
    )
    assert not failures, failures[:5]
    assert elapsed < 60.0


# -- criterion 2 ---------------------------------------------------------------------------------------------
def test_criterion_2_kernels_match_naive_oracles(verdict):
    rng = np.random.default_rng(99)
    conv_err, pool_bad, up_bad = 0.0, 0, 0
    for _ in range(50):
        shape = vol5(rng)
        cout = int(rng.integers(1, 4))
        x, w, b = rand(rng, shape), rand(rng, (cout, shape[1], 3, 3, 3)), rand(rng, (cout,))
        got = conv3d(Tensor(x), Tensor(w), Tensor(b)).numpy()
        conv_err = max(conv_err, float(np.max(np.abs(got - conv3d_naive(x, w, b)))))

        # integer values force ties in the pool
        xp = rng.integers(0, 4, vol5(rng, even=True)).astype(np.float32)
        t = Tensor(xp, requires_grad=True)
        out = maxpool3d(t)
        backward(tsum(out))
        ref, mask = maxpool3d_naive(xp)
        pool_bad += not (np.array_equal(out.numpy(), ref) and np.array_equal(t.grad, mask.astype(np.float32)))

        xu = rand(rng, vol5(rng, 1, 4))
        up_bad += not np.array_equal(upsample_nearest3d(Tensor(xu)).numpy(), upsample_naive(xu))
    ok = conv_err < 1e-5 and pool_bad == 0 and up_bad == 0
    verdict(2, ok, f"50 cases: conv max abs error {conv_err:.1e}, pool mismatches {pool_bad}, upsample mismatches {up_bad}")
    assert conv_err < 1e-5
    assert pool_bad == 0 and up_bad == 0


# -- criterion 3 ---------------------------------------------------------------------------------------------
def test_criterion_3_adain(verdict):
    rng = np.random.default_rng(3)
    stat_err, self_err = 0.0, 0.0
    for _ in range(20):
        shape = vol5(rng, 2, 6)
        c = rand(rng, shape) * float(rng.uniform(0.5, 3)) + float(rng.uniform(-2, 2))
        s = rand(rng, shape) * float(rng.uniform(0.5, 3)) + float(rng.uniform(-2, 2))
        out = adain(Tensor(c), Tensor(s)).numpy()
        mo, so = channel_stats_two_pass(out)
        ms, ss = channel_stats_two_pass(s)
        stat_err = max(stat_err, float(np.max(np.abs(mo - ms))), float(np.max(np.abs(so - ss))))
        self_err = max(self_err, float(np.max(np.abs(adain(Tensor(c), Tensor(c)).numpy() - c))))
    ok = stat_err < 1e-4 and self_err < 1e-5
    verdict(3, ok, f"20 cases: stats error {stat_err:.1e} (< 1e-4), adain(x, x) error {self_err:.1e} (< 1e-5)")
    assert stat_err < 1e-4
    assert self_err < 1e-5


# -- criterion 4 ---------------------------------------------------------------------------------------------
def test_criterion_4_metric_closed_forms(verdict):
    rng = np.random.default_rng(4)
    width = 1.0 / DEFAULT_BINS
    wd_err = 0.0
    for a, b in rng.random((50, 2)):
        h1 = histogram(Volume(np.full((1, 1, 3), a)))
        h2 = histogram(Volume(np.full((1, 1, 3), b)))
        wd_err = max(wd_err, abs(wasserstein_1d(h1, h2) - abs(a - b)))

    canonical, _ = generate_anatomy(5, 32)
    i = minmax_normalize(apply_site_profile(canonical, DEFAULT_PROFILES[0], 5))
    t = minmax_normalize(apply_site_profile(canonical, DEFAULT_PROFILES[1], 5))
    trivial = nwd(i, t, i) == (0.0, 100.0) and nwd(i, t, t) == (100.0, 0.0)

    flat_i = np.zeros(1000, np.int8)
    flat_i[:100], flat_i[100:300] = GM, WM
    flat_p = flat_i.copy()
    flat_p[300:310] = GM
    r = ravd(LabelMap(flat_i.reshape(10, 10, 10)), LabelMap(flat_p.reshape(10, 10, 10)), GM)
    ok = wd_err <= width and trivial and r == 10.0
    verdict(4, ok, f"point-mass WD error {wd_err:.4f} (bin {width:.4f}), nWD trivial cases {trivial}, rAVD {r}")
    assert wd_err <= width
    assert trivial
    assert r == 10.0
    assert wasserstein_1d(Histogram(np.ones(4), 4), Histogram(np.ones(4), 4)) == 0.0


# -- criterion 9 ---------------------------------------------------------------------------------------------
def _random_volume(rng):
    dims = tuple(int(n) for n in rng.integers(1, 9, 3))
    spacing = tuple(float(s) for s in rng.uniform(0.2, 4.0, 3))
    site = "".join(rng.choice(list("ABCxyz"), size=int(rng.integers(0, 6))))
    if rng.integers(2):
        lo = float(rng.uniform(-500, 500))
        return Volume(rng.random(dims), spacing, site, NormalizationRecord(lo, lo + float(rng.uniform(0.5, 900))))
    return Volume(rng.normal(0, 300, dims), spacing, site)


def _random_checkpoint(rng):
    cfg = ModelConfig(
        int(rng.integers(1, 4)), 8 * int(rng.integers(1, 4)), *(float(v) for v in rng.uniform(0, 500, 3))
    )
    model = HailModel(cfg, seed=int(rng.integers(10_000)))
    params = {}
    for name, arr in model.state().items():
        params[name] = rng.normal(0, 1, arr.shape).astype(np.float32)
    return ModelCheckpoint(int(rng.integers(1, 3)), cfg, params)


def test_criterion_9_format_roundtrips(verdict):
    rng = np.random.default_rng(9)
    vol_bad = ckpt_bad = 0
    for _ in range(100):
        v = _random_volume(rng)
        buf = encode_volume(v)
        back = decode_volume(buf)
        vol_bad += not (back == v and back.data.tobytes() == v.data.tobytes() and encode_volume(back) == buf)

        ck = _random_checkpoint(rng)
        cbuf = encode_checkpoint(ck)
        cback = decode_checkpoint(cbuf)
        same = cback.phase == ck.phase and cback.config == ck.config and list(cback.params) == list(ck.params)
        same = same and all(cback.params[k].tobytes() == ck.params[k].tobytes() for k in ck.params)
        ckpt_bad += not (same and encode_checkpoint(cback) == cbuf)
    verdict(9, vol_bad == 0 and ckpt_bad == 0, f"100 HVOL + 100 HCKP round-trips, {vol_bad + ckpt_bad} mismatches")
    assert vol_bad == 0 and ckpt_bad == 0


# -- criteria 5-8: the desk reproduction ------------------------------------------------------------------
def _fmt(d):
    return ", ".join(f"{k} {v:.1f}" for k, v in d.items())


def test_criterion_5_seen_sites(verdict, reproduction):
    r = reproduction
    m = block_means(r.report, r.seen)
    budget = sum(r.timings[k] for k in ("phase1", "phase2", "evaluate"))
    checks = {
        "nWD(i,p) > 70": m["nwd_ip_pct"] > 70,
        "nWD(t,p) < 30": m["nwd_tp_pct"] < 30,
        "rAVD GM < 20": m["ravd_gm_pct"] < 20,
        "rAVD WM < 20": m["ravd_wm_pct"] < 20,
        "train+eval < 1 h": budget < 3600,
    }
    failed = [k for k, v in checks.items() if not v]
    tables = (r.out_dir / "tables.txt").read_text(encoding="utf-8")
    verdict(
        5,
        not failed,
        f"seen means: {_fmt(m)}; {budget:.0f}s" + (f"; missed {', '.join(failed)}" if failed else ""),
        tables,
    )
    assert not failed, failed


def test_criterion_6_unseen_site(verdict, reproduction):
    r = reproduction
    m = block_means(r.report, r.unseen)
    per_dir = {d: (r.report.mean("nwd_ip_pct", d), r.report.mean("nwd_tp_pct", d)) for d in r.unseen}
    ordered = all(ip > tp for ip, tp in per_dir.values())
    checks = {
        "nWD(i,p) > nWD(t,p) in every direction": ordered,
        "rAVD GM < 25": m["ravd_gm_pct"] < 25,
        "rAVD WM < 25": m["ravd_wm_pct"] < 25,
    }
    failed = [k for k, v in checks.items() if not v]
    dirs = ", ".join(f"{d} {ip:.1f}/{tp:.1f}" for d, (ip, tp) in per_dir.items())
    verdict(
        6,
        not failed,
        f"nWD(i,p)/nWD(t,p) {dirs}; rAVD GM {m['ravd_gm_pct']:.1f}, WM {m['ravd_wm_pct']:.1f}"
        + (f"; missed {', '.join(failed)}" if failed else ""),
    )
    assert not failed, failed


def test_criterion_7_consistency_ablation(verdict, reproduction):
    r = reproduction
    with_c = block_means(r.report, r.unseen)
    without = block_means(r.ablation_report, r.unseen)

    def ravd_mean(m):
        return 0.5 * (m["ravd_gm_pct"] + m["ravd_wm_pct"])

    checks = {
        "higher rAVD without consistency": ravd_mean(without) > ravd_mean(with_c),
        "higher nWD(t,p) without consistency": without["nwd_tp_pct"] > with_c["nwd_tp_pct"],
    }
    failed = [k for k, v in checks.items() if not v]
    verdict(
        7,
        not failed,
        f"unseen rAVD {ravd_mean(with_c):.1f} -> {ravd_mean(without):.1f}, "
        f"nWD(t,p) {with_c['nwd_tp_pct']:.1f} -> {without['nwd_tp_pct']:.1f} (with -> without)"
        + (f"; missed {', '.join(failed)}" if failed else ""),
        format_ablation_table(r.report, r.ablation_report, r.unseen),
    )
    assert not failed, failed


def test_criterion_8_reproducible(verdict, reproduction, reproduction_again):
    a, b = reproduction.means(), reproduction_again.means()
    same_keys = a.keys() == b.keys()
    differ = [k for k in a if not (a[k] == b.get(k) or (math.isnan(a[k]) and math.isnan(b.get(k, 0.0))))]
    ok = same_keys and not differ
    verdict(8, ok, f"{len(a)} metric means compared across two seeded runs, {len(differ)} differ")
    assert same_keys
    assert not differ, differ[:5]
