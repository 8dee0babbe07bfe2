"""Acceptance criteria 1-8, each recorded as one PASS/FAIL line in the terminal summary.

Tolerances are pinned here; the long-running criteria (6, 7) use fixed seeds
and settings documented in the README.
"""
import time

import numpy as np
from scipy import stats

import conftest
from afenet import cli, data, metrics, network, spectral, training
from afenet import tensor as T
from afenet.afsim import CrossAttention, cross_attention
from afenet.sfm import Sfm, sfm_fuse
from afenet.tensor import Tensor
from compcases import COMPOSITIONS
from gradcases import CASES, run_case
from oracles import (ce_oracle, confusion_oracle, dice_oracle, hand_cross_attention, hand_sfm,
                     loop_conv2d, metrics_oracle, naive_dft2)

PARAM_TOL, FLOP_TOL = 0.10, 0.15
PRIMITIVE_TOL, COMPOSITION_TOL = 1e-4, 1e-3
ORACLE_TOL = 1e-5
TRIALS = 100


def record(key, ok, detail):
    conftest.ACCEPTANCE[key] = (bool(ok), detail)
    print(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# --- 1 ---------------------------------------------------------------------------------------

def test_criterion_1_param_and_flop_counts():
    t = time.perf_counter()
    cfg = network.full_config()
    p = network.count_params(cfg)
    f = network.count_flops(cfg, (1, 3, 512, 512))
    dt = time.perf_counter() - t
    dp, df = (p - cli.REF_PARAMS) / cli.REF_PARAMS, (f - cli.REF_FLOPS) / cli.REF_FLOPS
    record(1, abs(dp) <= PARAM_TOL and abs(df) <= FLOP_TOL and dt < 1.0,
           f"params={p} ({dp:+.2%}, tol {PARAM_TOL:.0%})  flops={f} ({df:+.2%}, tol {FLOP_TOL:.0%})  "
           f"time={dt:.3f}s")


# --- 2 ---------------------------------------------------------------------------------------

def test_criterion_2_compress_dim():
    got = [spectral.compress_dim(c) for c in (512, 256, 128)]
    record(2, got == [56, 32, 18], f"compress_dim(512,256,128)={got} expected [56, 32, 18]")


# --- 3 ---------------------------------------------------------------------------------------

def test_criterion_3_spectral_suite():
    t = time.perf_counter()
    rng = np.random.default_rng(3)
    rt = pars = dft = recon = 0.0
    comp_exact = True
    for _ in range(50):
        h, w = rng.integers(2, 17, 2)
        x = rng.normal(size=(2, 3, h, w))
        s = spectral.fft2d(Tensor(x))
        rt = max(rt, float(np.max(np.abs(spectral.ifft2d(s).data - x))))
        e = np.sum(x ** 2)
        pars = max(pars, abs(e - np.sum(s.real.data ** 2 + s.imag.data ** 2) / (h * w)) / e)
        r = tuple(rng.uniform(0.02, 0.98, 2))
        m = spectral.build_masks(h, w, r, "hard")
        comp_exact &= bool(np.all(m.low.data + m.high.data == 1.0))
        for mode in ("hard", "soft"):
            hi, lo, _ = spectral.separate_bands(Tensor(x), r, mode)
            recon = max(recon, float(np.max(np.abs(hi.data + lo.data - x))))
    for n in (4, 6, 8, 12):
        x = rng.normal(size=(n, n))
        s = spectral.fft2d(Tensor(x[None, None]))
        ref = naive_dft2(x)
        dft = max(dft, float(np.max(np.abs(s.real.data[0, 0] - ref.real))),
                  float(np.max(np.abs(s.imag.data[0, 0] - ref.imag))))
    dt = time.perf_counter() - t
    ok = rt < 1e-6 and pars < 1e-4 and dft < 1e-5 and comp_exact and recon < 1e-5 and dt < 10
    record(3, ok, f"roundtrip={rt:.1e} parseval={pars:.1e} naive_dft={dft:.1e} "
                  f"complementary={comp_exact} band_recon={recon:.1e} time={dt:.2f}s")


# --- 4 ---------------------------------------------------------------------------------------

def test_criterion_4_gradient_suite():
    t = time.perf_counter()
    prim = {name: run_case(name) for name in CASES}
    comp = {name: fn(seed=0) for name, fn in COMPOSITIONS.items()}
    dt = time.perf_counter() - t
    worst_p = max(prim, key=prim.get)
    ok = max(prim.values()) < PRIMITIVE_TOL and max(comp.values()) < COMPOSITION_TOL and dt < 120
    comp_txt = " ".join(f"{k}={v:.1e}" for k, v in comp.items())
    record(4, ok, f"{len(prim)} primitives max={prim[worst_p]:.1e} ({worst_p})  {comp_txt}  time={dt:.1f}s")


# --- 5 ---------------------------------------------------------------------------------------

def _conv_trials(rng):
    worst = 0.0
    for _ in range(TRIALS):
        groups = int(rng.choice([1, 2]))
        cin, cout = 2 * groups, 2 * groups
        k = int(rng.choice([1, 3]))
        stride = int(rng.choice([1, 2]))
        x = rng.normal(size=(1, cin, 5, 6))
        w = rng.normal(size=(cout, cin // groups, k, k))
        b = rng.normal(size=cout)
        got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=k // 2, groups=groups).data
        worst = max(worst, float(np.max(np.abs(got - loop_conv2d(x, w, b, stride, k // 2, groups)))))
    return worst


def _attention_trials(rng):
    worst = 0.0
    for _ in range(TRIALS):
        c, heads = 4, int(rng.choice([1, 2, 4]))
        m = CrossAttention(c, heads, rng).astype(np.float64)
        f_fre, f_spa = rng.normal(size=(2, 1, c, 3, 3))

        def conv(mod, x):
            return loop_conv2d(x, mod.weight.data, mod.bias.data, padding=mod.k // 2, groups=mod.groups)
        q = conv(m.q_dw, conv(m.q_proj, f_fre))
        kv = conv(m.kv_dw, conv(m.kv_proj, f_spa))
        ref = conv(m.out_proj, hand_cross_attention(q, kv[:, :c], kv[:, c:], heads))
        got = cross_attention(Tensor(f_fre), Tensor(f_spa), m).data
        worst = max(worst, float(np.max(np.abs(got - ref))))
    return worst


def _sfm_trials(rng):
    worst = 0.0
    for _ in range(TRIALS):
        m = Sfm(3, rng).astype(np.float64)
        f_h, f_l, x_in = rng.normal(size=(3, 1, 3, 4, 4))
        ref = hand_sfm(f_h, f_l, x_in, m.gate_conv.weight.data, m.gate_conv.bias.data,
                       m.out_proj.weight.data, m.out_proj.bias.data)
        got = sfm_fuse(Tensor(f_h), Tensor(f_l), Tensor(x_in), m).data
        worst = max(worst, float(np.max(np.abs(got - ref))))
    return worst


def _loss_trials(rng):
    worst = 0.0
    for _ in range(TRIALS):
        k = int(rng.integers(2, 6))
        logits = rng.normal(size=(2, k, 3, 3)) * 2
        labels = rng.integers(0, k, (2, 3, 3))
        worst = max(worst, abs(training.ce_loss(Tensor(logits), labels).item() - ce_oracle(logits, labels)),
                    abs(training.dice_loss(Tensor(logits), labels).item() - dice_oracle(logits, labels)))
    return worst


def _metric_trials(rng):
    counts_exact, worst = True, 0.0
    for _ in range(TRIALS):
        k = int(rng.integers(2, 7))
        pred, lab = rng.integers(0, k, (2, 6, 7))
        ignore = int(rng.integers(0, k)) if rng.random() < 0.3 else None
        cm = metrics.ConfusionMatrix(k).accumulate(pred, lab, ignore)
        ref = confusion_oracle(pred, lab, k, ignore)
        counts_exact &= bool(np.array_equal(cm.counts, ref))
        if ref.sum() == 0:
            continue
        f1, iou, _, oa = metrics_oracle(ref)
        worst = max(worst, float(np.max(np.abs(metrics.f1(cm) - f1))),
                    float(np.max(np.abs(metrics.iou(cm) - iou))), abs(metrics.overall_accuracy(cm) - oa))
    return counts_exact, worst


def test_criterion_5_oracle_equivalence():
    t = time.perf_counter()
    rng = np.random.default_rng(5)
    errs = {"conv": _conv_trials(rng), "attention": _attention_trials(rng), "sfm": _sfm_trials(rng),
            "losses": _loss_trials(rng)}
    counts_exact, errs["metrics"] = _metric_trials(rng)
    dt = time.perf_counter() - t
    ok = counts_exact and max(errs.values()) < ORACLE_TOL and dt < 60
    txt = " ".join(f"{k}={v:.1e}" for k, v in errs.items())
    record(5, ok, f"{TRIALS} trials each: {txt} confusion_exact={counts_exact} time={dt:.1f}s")


# --- 6 ---------------------------------------------------------------------------------------

OVERFIT = dict(steps=200, batch_size=2, learning_rate=2e-3, augment_scale=False, augment_flip=False, seed=0)
SMOOTH_WINDOW = 5


def overfit_pair():
    return [data.synth_kind("urban", 1, seed=0)[0], data.synth_kind("rural", 1, seed=0)[0]]


def train_miou(model, pair, mode):
    cm = metrics.ConfusionMatrix(model.config.num_classes)
    pred = training.predict(model, np.stack([s.image for s in pair]), mode=mode)
    for p, s in zip(pred, pair):
        cm.accumulate(p, s.label)
    return metrics.mean_iou(cm)


def test_criterion_6_overfit():
    t = time.perf_counter()
    pair = overfit_pair()
    model = network.build_model(network.desk_config(seed=0))
    hist = training.train(model, pair, training.TrainConfig(**OVERFIT))
    dt = time.perf_counter() - t
    losses = np.array([h.loss_total for h in hist[:50]])
    smooth = np.convolve(losses, np.ones(SMOOTH_WINDOW) / SMOOTH_WINDOW, mode="valid")
    monotone = bool(np.all(np.diff(smooth) < 0))
    soft, hard = train_miou(model, pair, "soft"), train_miou(model, pair, "hard")
    ok = soft > 0.90 and monotone and dt < 300
    record(6, ok, f"mIoU(train mode, soft)={soft:.4f} > 0.90  mIoU(hard)={hard:.4f}  "
                  f"smoothed loss strictly decreasing over first 50 steps (window {SMOOTH_WINDOW})={monotone}  "
                  f"loss {losses[0]:.3f}->{hist[-1].loss_total:.3f}  time={dt:.0f}s")


# --- 7 ---------------------------------------------------------------------------------------

ADAPT = dict(steps=500, batch_size=4, learning_rate=6e-4, seed=0)
VAL_SEED = 1000


def level0_areas(model, samples):
    training.infer(model, np.stack([s.image for s in samples]), "soft")
    r = model.window_ratios()[0]
    return r[:, 0] * r[:, 1]


def adaptivity_p(model):
    urban = level0_areas(model, data.synth_kind("urban", 16, VAL_SEED))
    rural = level0_areas(model, data.synth_kind("rural", 16, VAL_SEED))
    return urban.mean(), rural.mean(), stats.ttest_ind(urban, rural).pvalue


def test_criterion_7_adaptivity():
    t = time.perf_counter()
    cfg = network.desk_config(mask_mode="soft", seed=0)
    untrained = adaptivity_p(network.build_model(cfg))
    model = network.build_model(cfg)
    training.train(model, data.synth_dataset(data.SynthSpec(seed=0, count=64)), training.TrainConfig(**ADAPT))
    urban, rural, p = adaptivity_p(model)
    dt = time.perf_counter() - t
    record(7, p < 0.05 and dt < 900,
           f"level-0 window area urban={urban:.4f} rural={rural:.4f} p={p:.2e} < 0.05 after 500 steps  "
           f"(untrained baseline: {untrained[0]:.4f} vs {untrained[1]:.4f}, p={untrained[2]:.2e})  time={dt:.0f}s")


# --- 8 ---------------------------------------------------------------------------------------

def test_criterion_8_determinism(tmp_path):
    t = time.perf_counter()
    assert cli.main(["synth", "--out", str(tmp_path / "ds"), "--count", "6", "--seed", "8"]) == 0
    for run in ("a", "b"):
        assert cli.main(["train", "--data", str(tmp_path / "ds"), "--out", str(tmp_path / f"{run}.ckpt"),
                         "--steps", "10", "--batch-size", "2", "--seed", "8"]) == 0
        assert cli.main(["eval", "--ckpt", str(tmp_path / f"{run}.ckpt"), "--data", str(tmp_path / "ds"),
                         "--report", str(tmp_path / f"{run}_report")]) == 0
    same = {ext: (tmp_path / f"a{ext}").read_bytes() == (tmp_path / f"b{ext}").read_bytes()
            for ext in (".ckpt", ".ckpt.history.csv")}
    same.update({ext: (tmp_path / f"a_report{ext}").read_bytes() == (tmp_path / f"b_report{ext}").read_bytes()
                 for ext in (".txt", ".csv", ".png")})
    dt = time.perf_counter() - t
    record(8, all(same.values()), "byte-identical: " + " ".join(f"{k}={v}" for k, v in same.items())
           + f"  time={dt:.1f}s")

