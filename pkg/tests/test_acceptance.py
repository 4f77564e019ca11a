"""Acceptance criteria, one test each, at their stated tolerances.

Run alone with ``pytest tests/test_acceptance.py -v``; a PASS/FAIL line per
criterion is printed inline and again in the terminal summary.
"""

import math
import time

import numpy as np
import pytest

from egdnet import functional as F
from egdnet.attention import linear_attention
from egdnet.blocks import InvertedResidual, IrbConfig
from egdnet.checkpoint import load_checkpoint, save_checkpoint
from egdnet.cli import main
from egdnet.data import synth_generate
from egdnet.gradsuite import CASES, run_case, summarize
from egdnet.losses import LossWeights, depth_loss, edge_loss, total_loss
from egdnet.metrics import metrics
from egdnet.model import EGDNet, ModelConfig
from egdnet.nn import BatchNorm2d, ConvBnRelu, Linear, count_params
from egdnet.tensor import Tensor, no_grad
from egdnet.train import TrainConfig, evaluate, poly_lr, train

from test_attention import quadratic_attention
from test_model import SHAPE_TABLE, expected_shapes
from test_train import loop_metrics

PUBLISHED_PARAMS = 2.21e6
OVERFIT_DATA_SEED = 0
OVERFIT = TrainConfig(init_lr=0.01, max_epoch=500, batch_size=8, augment=False, checkpoint_every=0, seed=0)


def rel_err(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)))


def test_c01_gradient_suite(criterion):
    t0 = time.perf_counter()
    reports = {name: summarize(name, run_case(name, instances=10)) for name in sorted(CASES)}
    elapsed = time.perf_counter() - t0
    failed = [str(r) for r in reports.values() if not r.passed]
    worst_ops = max(r.max_rel_error for n, r in reports.items() if not n.startswith("model"))
    worst_model = max(r.max_rel_error for n, r in reports.items() if n.startswith("model"))
    detail = (f"{len(reports) - len(failed)}/{len(reports)} cases x 10 instances, worst ops/blocks "
              f"{worst_ops:.2e} (tol 1e-5), worst model {worst_model:.2e} (tol 1e-4), {elapsed:.0f}s (< 300s)")
    if failed:
        detail += "; failures: " + "; ".join(failed)
    criterion(1, "finite-difference gradient suite", not failed and elapsed < 300, detail)


def test_c02_linear_attention_oracle(criterion):
    worst, cases = 0.0, 0
    for length in (1, 4, 16, 32):
        for heads in (1, 4):
            rng = np.random.default_rng([2, length, heads])
            for _ in range(7):
                n, d, dv = int(rng.integers(1, 3)), int(rng.integers(1, 17)), int(rng.integers(1, 17))
                lk = length if rng.random() < 0.5 else int(rng.integers(1, 33))
                q = rng.standard_normal((n, heads, length, d)) * rng.uniform(0.2, 3.0)
                k = rng.standard_normal((n, heads, lk, d)) * rng.uniform(0.2, 3.0)
                v = rng.standard_normal((n, heads, lk, dv))
                got = linear_attention(Tensor(q), Tensor(k), Tensor(v), 1e-6).data
                worst = max(worst, rel_err(got, quadratic_attention(q, k, v, 1e-6)))
                cases += 1
    criterion(2, "linear attention vs quadratic oracle", cases >= 50 and worst < 1e-6,
              f"{cases} cases, max rel err {worst:.2e} (tol 1e-6)")


def test_c03_conv_oracle(criterion):
    rng = np.random.default_rng(3)
    grid = [(s, d, g) for s in (1, 2) for d in (1, 2, 3) for g in ("one", "depthwise")]
    worst = 0.0
    for i in range(100):
        stride, dilation, groups_kind = grid[i % len(grid)]
        c = int(rng.integers(1, 5))
        groups = 1 if groups_kind == "one" else c
        cout = c * int(rng.integers(1, 3)) if groups > 1 else int(rng.integers(1, 5))
        k = int(rng.choice([1, 3]))
        padding = int(rng.integers(0, 3))
        span = dilation * (k - 1) + 1
        h = int(rng.integers(max(1, span - 2 * padding), 10))
        w = int(rng.integers(max(1, span - 2 * padding), 10))
        x = rng.standard_normal((int(rng.integers(1, 3)), c, h, w))
        wt = rng.standard_normal((cout, c // groups, k, k))
        b = rng.standard_normal(cout)
        fast = F.conv2d(Tensor(x), Tensor(wt), Tensor(b), stride, padding, dilation, groups).data
        worst = max(worst, rel_err(fast, F.conv2d_naive(x, wt, b, stride, padding, dilation, groups)))
    criterion(3, "fast conv2d vs naive loop", worst < 1e-6,
              f"100 configs over stride {{1,2}} x dilation {{1,2,3}} x groups {{1,C}}, max rel err {worst:.2e}")


def test_c04_shape_contract(criterion):
    mismatches = []
    for w, h in ((64, 48), (160, 128), (320, 240)):
        model = EGDNet(ModelConfig(h, w))
        model.eval()
        with no_grad():
            feats = model.forward_features(Tensor(np.zeros((1, 3, h, w), np.float32)))
        want = expected_shapes(1, h, w)
        mismatches += [f"{w}x{h} {k}: {feats[k].shape} != {want[k]}" for k in SHAPE_TABLE if feats[k].shape != want[k]]
    criterion(4, "stride/width shape table", not mismatches,
              "all of " + ", ".join(SHAPE_TABLE) + " match at 64x48, 160x128, 320x240" if not mismatches
              else "; ".join(mismatches))


@pytest.mark.slow
def test_c05_desk_scale_overfit(criterion):
    data = synth_generate(OVERFIT_DATA_SEED, 8, (48, 64))
    t0 = time.perf_counter()
    ckpt = train(ModelConfig(48, 64), OVERFIT, data, deterministic=True)
    elapsed = time.perf_counter() - t0
    r = evaluate(ckpt, data)
    ok = r.delta1 > 0.95 and r.rmse < 0.15 and elapsed < 900 and ckpt.step <= 500
    criterion(5, "desk-scale overfit", ok,
              f"{ckpt.step} steps in {elapsed:.0f}s (< 900s), delta1 {r.delta1:.4f} (> 0.95), "
              f"RMSE {r.rmse:.4f} m (< 0.15)")


def test_c06_metric_oracle(criterion):
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        shape = (int(rng.integers(1, 4)), 1, int(rng.integers(1, 8)), int(rng.integers(1, 8)))
        g = rng.uniform(0.5, 8, shape)
        d = np.clip(g * rng.uniform(0.6, 1.6, shape), 0.1, 10)
        m = rng.random(shape) > 0.2
        m.flat[0] = True
        r = metrics(d, g, m)
        rmse, rel, deltas, n = loop_metrics(d, g, m)
        assert r.n_valid_pixels == n
        got, ref = np.array([r.rmse, r.rel, r.delta1, r.delta2, r.delta3]), np.array([rmse, rel, *deltas])
        worst = max(worst, float(np.max(np.abs(got - ref))))
    example = metrics(np.array([1.0, 2.0, 4.0]), np.array([1.0, 2.0, 5.0]))
    ok = worst < 1e-10 and example.delta1 == 2 / 3 and example.delta2 == 1.0
    criterion(6, "metrics vs scalar-loop oracle", ok,
              f"100 instances, max abs diff {worst:.1e} (tol 1e-10); worked example delta1 = {example.delta1!r}")


def test_c07_loss_constants(criterion):
    rng = np.random.default_rng(7)
    target = (rng.random((2, 1, 6, 8)) > 0.5).astype(np.float64)
    bce = edge_loss(Tensor(np.zeros(target.shape)), target).item()
    d, g = Tensor(rng.uniform(1, 5, (2, 1, 12, 16))), rng.uniform(1, 5, (2, 1, 12, 16))
    mask = rng.random(g.shape) > 0.1
    logits = Tensor(rng.standard_normal(target.shape))
    total, _ = total_loss(d, g, logits, target, mask)
    expect = depth_loss(d, g, mask).item() + 20.0 * edge_loss(logits, target).item()
    ok = abs(bce - math.log(2)) < 1e-9 and abs(total.item() - expect) < 1e-9 and LossWeights() == LossWeights(1.0, 20.0)
    criterion(7, "loss constants", ok,
              f"BCE(0) - ln 2 = {bce - math.log(2):.1e}, total - (depth + 20 edge) = {total.item() - expect:.1e}")


def test_c08_schedule(criterion):
    cfg = TrainConfig()
    values = (poly_lr(0, cfg), poly_lr(25, cfg), poly_lr(5, cfg))
    ok = abs(values[0] - 0.01) < 1e-12 and values[1] == 0.0 and abs(values[2] - 0.008181) < 1e-6
    criterion(8, "poly learning rate", ok, "poly_lr(0, 25, 5) = " + ", ".join(f"{v:.6f}" for v in values))


def test_c09_determinism(criterion, tmp_path):
    data_dir = tmp_path / "data"
    assert main(["synth-gen", "--seed", "9", "--count", "8", "--size", "64x48", "--out", str(data_dir)]) == 0
    cfg = tmp_path / "run.cfg"
    cfg.write_text("input_height = 48\ninput_width = 64\nmax_epoch = 2\nseed = 5\naugment = true\n")
    for run in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--data", str(data_dir), "--out", str(tmp_path / run),
                     "--deterministic"]) == 0
    a, b = (tmp_path / "a/final.egdc").read_bytes(), (tmp_path / "b/final.egdc").read_bytes()
    save_checkpoint(load_checkpoint(tmp_path / "a/final.egdc"), tmp_path / "resaved.egdc")
    resaved = (tmp_path / "resaved.egdc").read_bytes()
    criterion(9, "deterministic training and checkpoint round trip", a == b and a == resaved,
              f"two augmented runs -> identical {len(a)}-byte checkpoints: {a == b}; "
              f"save/load/save byte-identical: {a == resaved}")


def test_c10_parameter_accounting(criterion):
    hand = {
        "ConvBnRelu(2->4, 3x3)": (count_params(ConvBnRelu(2, 4, 3)), 2 * 4 * 9 + 2 * 4),
        "BatchNorm2d(32)": (count_params(BatchNorm2d(32)), 64),
        "Linear(128->128, no bias)": (count_params(Linear(128, 128)), 128 * 128),
        "IRB(8->8, t=4)": (count_params(InvertedResidual(IrbConfig(8, 8, 4), np.random.default_rng(0))),
                           8 * 32 + 64 + 32 * 9 + 64 + 32 * 8 + 16),
    }
    exact = all(got == want for got, want in hand.values())
    total = EGDNet(ModelConfig()).num_params()
    criterion(10, "parameter accounting", exact,
              f"unit fixtures exact: {exact}; default model {total:,} vs published {PUBLISHED_PARAMS / 1e6:.2f}M "
              f"({total / PUBLISHED_PARAMS:.1%}; widths the published count depends on are unstated)")
