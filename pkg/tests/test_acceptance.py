"""Acceptance suite: one test per criterion, each recording a pass/fail line.

Run with ``pytest tests/test_acceptance.py`` (the summary block lists every
criterion) or directly as ``python3 tests/test_acceptance.py``.
"""
import json
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import ACCEPTANCE_RESULTS, check_grad
from stormseg import cli
from stormseg import tensor as T
from stormseg.checkpoint import load_checkpoint, save_checkpoint
from stormseg.climate_data import tensorfile as tf
from stormseg.climate_data.dataset import Dataset, split_arrays, write_dataset
from stormseg.climate_data.sample import BASELINE_CHANNELS, GridGeometry
from stormseg.climate_data.synthetic import SyntheticConfig, gen_synthetic_dataset
from stormseg.features import WindComponents, relative_vorticity
from stormseg.losses import ClassWeights, LossSpec, TverskyParams, compute_loss, one_hot
from stormseg.metrics import (
    confusion_matrix,
    default_thresholds,
    merge_all,
    metrics_from_cm,
    pr_roc_curves,
    report_csv,
)
from stormseg.model import FULL_CONFIG, TINY_CONFIG, forward, init_model, parameter_count
from stormseg.tensor import backward
from stormseg.training import TrainConfig, TrainData, evaluate, train, train_pixel_accuracy
from test_losses import all_specs, random_case
from test_metrics import exact, loop_counts, loop_scores, random_grids
from test_tensor_core import CONV_CASES, STRUCTURAL, _elementwise_cases

INSTANCES = 20
FD_TOL = 1e-4


def record(k, ok, detail):
    ACCEPTANCE_RESULTS[k] = (bool(ok), detail)
    print(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def synthetic_dataset(root, cfg):
    samples, splits = gen_synthetic_dataset(cfg)
    write_dataset(root, samples, splits)
    return Dataset(root)


# ----------------------------------------------------------------------------

def _primitive_errors():
    errors = {}
    for case in CONV_CASES:
        c_in, c_out, k, s, d, g, p, has_b = case
        worst = 0.0
        for seed in range(INSTANCES):
            r = np.random.default_rng(seed)
            arrays = [r.normal(size=(1, c_in, 5, 6)), r.normal(size=(c_out, c_in // g, k, k))]
            if has_b:
                arrays.append(r.normal(size=c_out))
            bias = (lambda ts: ts[2]) if has_b else (lambda ts: None)
            proj = r.normal(size=T.conv2d(arrays[0], arrays[1], None, s, d, g, p).shape)
            worst = max(worst, check_grad(
                lambda ts: T.tsum(T.mul(T.conv2d(ts[0], ts[1], bias(ts), s, d, g, p), proj)), arrays))
        errors[f"conv{case[:7]}"] = worst
    for name, (fn, makers) in _elementwise_cases().items():
        worst = 0.0
        for seed in range(INSTANCES):
            r = np.random.default_rng(seed)
            arrays = [m(r, (2, 3, 2, 2)) for m in makers]
            if name == "clip":
                arrays[0] = np.where(np.abs(np.abs(arrays[0]) - 0.5) < 0.02, 0.2, arrays[0])
            proj = r.normal(size=(2, 3, 2, 2))
            worst = max(worst, check_grad(lambda ts: T.tsum(T.mul(fn(ts), proj)), arrays))
        errors[name] = worst
    for name, (fn, shape) in STRUCTURAL.items():
        worst = 0.0
        for seed in range(INSTANCES):
            r = np.random.default_rng(seed)
            x = r.normal(size=shape)
            proj = r.normal(size=fn([T.Tensor(x)]).shape)
            worst = max(worst, check_grad(lambda ts: T.tsum(T.mul(fn(ts), proj)), [x]))
        errors[name] = worst
    for training in (True, False):
        worst = 0.0
        for seed in range(INSTANCES):
            r = np.random.default_rng(seed)
            x = r.normal(size=(3, 2, 3, 3)) * 2 + 1
            sc, sh = r.normal(size=2), r.normal(size=2)
            rm, rv = r.normal(size=2), r.uniform(0.5, 2, size=2)
            proj = r.normal(size=x.shape)
            worst = max(worst, check_grad(lambda ts: T.tsum(T.mul(
                T.batchnorm2d(ts[0], ts[1], ts[2], rm.copy(), rv.copy(), training), proj)), [x, sc, sh]))
        errors[f"batchnorm(train={training})"] = worst
    worst = 0.0
    for seed in range(INSTANCES):
        r = np.random.default_rng(seed)
        x = r.choice([-1, 1], size=(2, 3, 3, 3)) * r.uniform(0.05, 2.0, size=(2, 3, 3, 3))
        proj = r.normal(size=x.shape)
        worst = max(worst, check_grad(lambda ts: T.tsum(T.mul(T.prelu(ts[0], ts[1]), proj)),
                                      [x, r.uniform(0.05, 0.5, size=3)]))
    errors["prelu"] = worst
    for spec in all_specs():
        worst = 0.0
        for seed in range(INSTANCES):
            logits, y = random_case(seed, n=1, h=3, w=4)
            worst = max(worst, check_grad(lambda ts: compute_loss(T.softmax_channels(ts[0]), y, spec), [logits]))
        errors[f"loss:{spec.variant}"] = worst
    return errors


def _network_errors(cfg, shape, seed, h=1e-5):
    """Directional FD check per parameter tensor.

    The error is scaled by |g|*|d|, the same norm-wise measure the primitive
    checks use. Scaling by the directional derivative itself is also returned;
    it blows up for tensors the loss barely depends on (a BN scale feeding
    another BN), where cancellation in f(x+hd)-f(x-hd) dominates.
    """
    mp = init_model(cfg)
    r = np.random.default_rng(seed)
    x = r.normal(size=shape)
    y = one_hot(r.integers(0, 3, size=(shape[0],) + shape[2:]))
    spec = LossSpec("cross_entropy")
    f = lambda: compute_loss(forward(x, mp, cfg, "train"), y, spec)
    g = backward(f(), mp.params)
    normwise, pointwise = {}, {}
    for name, p in mp.params.items():
        d = r.normal(size=p.data.shape)
        p.data += h * d
        fp = f().item()
        p.data -= 2 * h * d
        fm = f().item()
        p.data += h * d
        num, ana = (fp - fm) / (2 * h), float((g[name] * d).sum())
        normwise[name] = abs(num - ana) / max(np.linalg.norm(g[name]) * np.linalg.norm(d), 1e-12)
        pointwise[name] = abs(num - ana) / max(abs(num), abs(ana), 1e-12)
    return normwise, pointwise


def test_criterion_1_gradient_integrity():
    t0 = time.perf_counter()
    errors = _primitive_errors()
    net, pointwise = _network_errors(TINY_CONFIG, (2, 4, 16, 16), seed=11)
    errors["tiny network"] = max(net.values())
    elapsed = time.perf_counter() - t0
    name, worst = max(errors.items(), key=lambda kv: kv[1])
    ok = worst < FD_TOL and elapsed < 60
    record(1, ok, f"{len(errors) - 1} primitive/loss checks x {INSTANCES} instances + {len(net)} tiny-network "
                  f"tensors, worst norm-wise rel err {worst:.2e} ({name}), worst pointwise directional "
                  f"{max(pointwise.values()):.1e}, {elapsed:.1f}s")


def test_criterion_2_metric_oracle():
    t0 = time.perf_counter()
    probs, truths = random_grids(0, count=100, size=16)
    preds = [np.argmax(p, axis=0) for p in probs]
    cm = merge_all(confusion_matrix(p, t) for p, t in zip(preds, truths))
    counts_ok = all([int(cm.tp[c]), int(cm.fp[c]), int(cm.fn[c]), int(cm.tn[c])]
                    == [sum(x) for x in zip(*(loop_counts(p, t, c) for p, t in zip(preds, truths)))]
                    for c in range(3))
    scores_ok = metrics_from_cm(cm).scores == loop_scores(preds, truths)
    thr = default_thresholds(11)
    curves_ok = True
    for c in (1, 2):
        pr, roc = pr_roc_curves(probs, truths, c, thr)
        want_pr, want_roc = [], []
        for t in thr:
            tp = fp = fn = tn = 0
            for p, y in zip(probs, truths):
                for v, lab in zip(p[c].ravel(), y.ravel()):
                    pos = v >= t
                    tp += pos and lab == c
                    fp += pos and lab != c
                    fn += (not pos) and lab == c
                    tn += (not pos) and lab != c
            rec, prec, fpr = exact(tp, tp + fn), exact(tp, tp + fp), exact(fp, fp + tn)
            if rec is not None and prec is not None:
                want_pr.append((float(t), rec, prec))
            if rec is not None and fpr is not None:
                want_roc.append((float(t), fpr, rec))
        curves_ok &= pr.points == want_pr and roc.points == want_roc
    elapsed = time.perf_counter() - t0
    ok = counts_ok and scores_ok and curves_ok and elapsed < 10
    record(2, ok, f"counts={counts_ok} scores={scores_ok} curves={curves_ok} on 100 16x16 grids, {elapsed:.1f}s")


def test_criterion_3_loss_identities():
    t0 = time.perf_counter()
    ce_gap = jac_gap = dice_gap = 0.0
    for seed in range(10):
        logits, y = random_case(seed)
        p = T.softmax_channels(logits)
        ce = compute_loss(p, y, LossSpec("cross_entropy")).item()
        wce = compute_loss(p, y, LossSpec("weighted_cross_entropy", weights=ClassWeights((2.0, 2.0, 2.0)))).item()
        ce_gap = max(ce_gap, abs(ce - wce))
        jac = compute_loss(p, y, LossSpec("jaccard")).item()
        for norm in ("convex", "mean_one", "none"):
            wj = compute_loss(p, y, LossSpec("weighted_jaccard", weights=ClassWeights((5.0, 5.0, 5.0), norm))).item()
            jac_gap = max(jac_gap, abs(jac - wj))
        ftl = compute_loss(p, y, LossSpec("focal_tversky", tversky=TverskyParams(0.5, 1.0), smoothing=0.0)).item()
        dice = compute_loss(p, y, LossSpec("dice", smoothing=0.0)).item()
        dice_gap = max(dice_gap, abs(ftl - dice))
    y = one_hot(np.random.default_rng(0).integers(0, 3, size=(2, 6, 6)))
    vanish = max(abs(compute_loss(y.copy(), y, s).item()) for s in all_specs())
    elapsed = time.perf_counter() - t0
    ok = ce_gap < 1e-12 and jac_gap < 1e-12 and dice_gap < 1e-10 and vanish < 1e-6 and elapsed < 10
    record(3, ok, f"wCE-CE {ce_gap:.1e}, wJ-J {jac_gap:.1e}, FTL-Dice {dice_gap:.1e}, "
                  f"one-hot max {vanish:.1e}, {elapsed:.2f}s")


def test_criterion_4_vorticity():
    t0 = time.perf_counter()
    errs = []
    for width in (16, 32, 64):
        geom = GridGeometry.regular(16, width, 60.0)
        lam = np.deg2rad(geom.lon)[None, :] * np.ones((16, 1))
        zeta = relative_vorticity(WindComponents(np.sin(lam), np.zeros_like(lam)), geom)
        errs.append(np.abs(zeta - np.cos(lam)).max())
    orders = [math.log2(errs[0] / errs[1]), math.log2(errs[1] / errs[2])]
    geom = GridGeometry.regular(24, 32, 80.0)
    phi = np.deg2rad(geom.lat)[:, None] * np.ones((1, 32))
    v = 1.0 / np.cos(phi)
    interior = np.abs(relative_vorticity(WindComponents(np.zeros_like(v), v), geom)[1:-1]).max()
    elapsed = time.perf_counter() - t0
    ok = min(orders) >= 1.9 and interior < 1e-10 and elapsed < 10
    record(4, ok, f"orders {orders[0]:.3f}, {orders[1]:.3f}; unit transport interior max {interior:.1e}")


def test_criterion_5_overfit(tmp_path):
    t0 = time.perf_counter()
    n_params = parameter_count(TINY_CONFIG)
    ds = synthetic_dataset(tmp_path / "d", SyntheticConfig(counts={"train": 32}, height=32, width=64, seed=0))
    data = TrainData.from_dataset(ds, BASELINE_CHANNELS)
    cfg = TrainConfig(epochs=100, lr=1e-3, loss={"variant": "cross_entropy"}, lr_schedule=False)
    params, hist, _ = train(TINY_CONFIG, data, cfg)
    acc, cm = train_pixel_accuracy(params, TINY_CONFIG, data.x_train, data.y_train)
    tc_iou = metrics_from_cm(cm).get(1, "iou") or 0.0
    elapsed = time.perf_counter() - t0
    ok = n_params <= 50_000 and acc >= 0.95 and tc_iou >= 0.5 and len(hist) <= 100 and elapsed < 600
    record(5, ok, f"{n_params} params, {len(hist)} epochs, train acc {acc:.4f}, TC IoU {tc_iou:.4f}, "
                  f"{elapsed:.0f}s")


IMBALANCED = SyntheticConfig(counts={"train": 32, "val": 8, "test": 16}, tc_per_sample=(1, 1),
                             tc_radius=(2.5, 3.5), seed=1)
PAIRS = (("weighted_cross_entropy", "cross_entropy"), ("weighted_jaccard", "jaccard"))


def test_criterion_6_weighting_improves_recall(tmp_path):
    t0 = time.perf_counter()
    ds = synthetic_dataset(tmp_path / "d", IMBALANCED)
    data = TrainData.from_dataset(ds, BASELINE_CHANNELS)
    x_test, y_test, _ = split_arrays(ds, "test", BASELINE_CHANNELS, data.stats)
    tc_frac = float((data.y_train == 1).mean())

    def recall(variant, seed):
        loss = {"variant": variant}
        if variant.startswith("weighted"):
            loss["weights"] = "inverse"
        params, _, _ = train(TINY_CONFIG, data, TrainConfig(epochs=15, seed=seed, loss=loss))
        rep, _ = evaluate(params, TINY_CONFIG, x_test, y_test)
        return rep.get(1, "recall") or 0.0

    wins, parts = [], []
    for weighted, plain in PAIRS:
        pairs = [(recall(weighted, s), recall(plain, s)) for s in range(5)]
        w = sum(a > b for a, b in pairs)
        wins.append(w)
        parts.append(f"{weighted} beats {plain} {w}/5 "
                     f"[{', '.join(f'{a:.3f}>{b:.3f}' if a > b else f'{a:.3f}<={b:.3f}' for a, b in pairs)}]")
    elapsed = time.perf_counter() - t0
    ok = tc_frac <= 0.02 and all(w >= 4 for w in wins) and elapsed < 1800
    record(6, ok, f"TC fraction {tc_frac:.4f}; " + "; ".join(parts) + f"; {elapsed:.0f}s")


GOLDEN_1X1 = bytes.fromhex("43 47 54 31 01 02 01 00 00 00 01 00 00 00 00 00 80 3F")


def test_criterion_7_format_round_trips(tmp_path):
    golden_ok = tf.encode_tensor(np.array([[1.0]], np.float32)) == GOLDEN_1X1
    (tmp_path / "g.cgt").write_bytes(GOLDEN_1X1)
    tf.write_tensor_file(tf.read_tensor_file(tmp_path / "g.cgt"), tmp_path / "g2.cgt")
    golden_ok &= (tmp_path / "g2.cgt").read_bytes() == GOLDEN_1X1
    r = np.random.default_rng(4)
    arrays = [r.normal(size=(3, 5)).astype(np.float32), r.normal(size=(2, 3, 4)),
              r.integers(0, 256, size=(7,)).astype(np.uint8), np.array(np.float64(np.pi)),
              np.array([np.nan, -0.0, np.inf], np.float32)]
    rt_ok = all(tf.decode_tensor(tf.encode_tensor(a)).tobytes() == a.tobytes()
                and tf.encode_tensor(tf.decode_tensor(tf.encode_tensor(a))) == tf.encode_tensor(a)
                for a in arrays)

    ds = synthetic_dataset(tmp_path / "d", SyntheticConfig(counts={"train": 8, "val": 4}, seed=5))
    data = TrainData.from_dataset(ds, BASELINE_CHANNELS)
    params, _, _ = train(TINY_CONFIG, data, TrainConfig(epochs=2, seed=2))
    save_checkpoint(tmp_path / "ck", params, TINY_CONFIG, {"channels": list(BASELINE_CHANNELS)})
    params2, cfg2, _ = load_checkpoint(tmp_path / "ck")
    rep_a, cm_a = evaluate(params, TINY_CONFIG, data.x_val, data.y_val)
    rep_b, cm_b = evaluate(params2, cfg2, data.x_val, data.y_val)
    ck_ok = cm_a == cm_b and report_csv({"val": rep_a}) == report_csv({"val": rep_b})
    ok = golden_ok and rt_ok and ck_ok
    record(7, ok, f"golden 1x1={golden_ok}, random round-trips={rt_ok}, checkpoint metrics bitwise={ck_ok}")


def test_criterion_8_deterministic_cli(tmp_path):
    synth = tmp_path / "s.json"
    synth.write_text(json.dumps({"counts": {"train": 8, "val": 4}, "seed": 3}))
    assert cli.main(["gen-synthetic", "--config", str(synth), "--out", str(tmp_path / "d")]) == 0
    doc = json.loads(cli.preset_path("weighted_jaccard").read_text())
    doc["train"]["epochs"] = 3
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps(doc))
    blobs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        code = cli.main(["train", "--config", str(conf), "--dataset", str(tmp_path / "d"),
                         "--out", str(out), "--seed", "3", "--deterministic"])
        assert code == 0
        blobs.append((out / "history.csv").read_bytes())
    ok = blobs[0] == blobs[1] and len(blobs[0]) > 0
    record(8, ok, f"history.csv identical across two runs ({len(blobs[0])} bytes)")


def test_criterion_9_parameter_count():
    n = parameter_count(FULL_CONFIG)
    record(9, 4.5e5 <= n <= 5.5e5, f"full config has {n} parameters")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
