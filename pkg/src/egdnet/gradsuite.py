"""Named finite-difference gradient cases for primitives, blocks and the full model.

Each case draws a random float64 instance and returns the tensors to perturb
together with a scalar-valued closure. The scalar is ``<out, r>`` for a fixed
random unit vector ``r`` rather than ``sum(out)``, which would hide errors in
directions that sum to zero (softmax-like or normalized outputs). Unit norm
keeps the root O(1) however many outputs there are, so finite-difference
round-off stays below the 1e-8 floor of the relative error even where the
true gradient is exactly zero (dead ReLU channels).

Every case uses epsilon 1e-6 and re-measures a failing element with the
other step sizes in ``FALLBACK_EPSILONS``. Composite roots sum many O(1)
terms, so round-off in ``f(x+e) - f(x-e)`` swamps near-zero gradients at small
steps, while with thousands of ReLU inputs some pre-activation often sits
within a step of its kink. No single step size avoids both; a wrong gradient
rule is wrong at all of them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import functional as F
from . import tensor as T
from .attention import TRFA, AttentionConfig, LinearTransformerEncoder, linear_attention
from .blocks import CAFF, DecoderBlock, EdgeCompact, EdgeHead, InvertedResidual, IrbConfig
from .gradcheck import GradCheckReport, grad_check
from .losses import total_loss
from .model import EGDNet, ModelConfig
from .tensor import Tensor

F64 = np.float64
MODEL_TENSORS_PER_INSTANCE = 16
FALLBACK_EPSILONS = (1e-7, 1e-5, 1e-4, 1e-3)

# The first block's output feeds only the next block's 1x1 expand conv and its
# batch norm, which cancels a per-channel shift exactly. The gradient of this
# shift is identically zero; relative error against pure round-off is
# meaningless, so the model cases skip it (tests check it is ~0 absolutely).
STRUCTURALLY_ZERO = ("backbone.0.project.bn.beta",)
Instance = tuple[list[Tensor], Callable[[], Tensor]]

# width-reduced model used for whole-network checks on 32x32 inputs
TINY_MODEL = ModelConfig(
    input_height=32,
    input_width=32,
    stem_width=4,
    backbone_stages=((1, 4, 1, 1), (2, 4, 1, 2), (2, 8, 1, 2), (2, 8, 1, 2)),
    extension_dilations=(1, 2, 3, 1, 2, 3),
    extension_width=8,
    extension_expansion=2,
    fc_width=4,
    edge_head_width=4,
    decoder_widths=(8, 8, 4, 4),
    attention_heads=2,
    caff_reduction=2,
)


@dataclass(frozen=True)
class GradCase:
    name: str
    kind: str  # "op", "block" or "model"
    build: Callable[[np.random.Generator], Instance]
    tol: float = 1e-5
    epsilon: float = 1e-6
    max_elements: int | None = None
    fallback_epsilons: tuple[float, ...] = ()


def projected(out: Tensor, rng: np.random.Generator) -> Tensor:
    r = rng.standard_normal(out.shape)
    return (out * Tensor((r / np.linalg.norm(r)).astype(out.dtype))).sum()


def _t(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=F64)


def _positive(rng, *shape) -> Tensor:
    return Tensor(np.abs(rng.standard_normal(shape)) + 0.5, requires_grad=True, dtype=F64)


def _off_kink(rng, *shape) -> Tensor:
    x = rng.standard_normal(shape)
    return Tensor(np.where(np.abs(x) < 0.05, 0.3, x), requires_grad=True, dtype=F64)


def _shape(rng, rank=None) -> tuple[int, ...]:
    rank = rank or int(rng.integers(1, 4))
    return tuple(int(v) for v in rng.integers(1, 5, size=rank))


def _projector(out_fn, rng) -> Callable[[], Tensor]:
    # draw R once so every re-evaluation sees the same direction
    seed = int(rng.integers(2**31))
    return lambda: projected(out_fn(), np.random.default_rng(seed))


# ---------------------------------------------------------------- primitives
def _binary(fn, positive_rhs=False):
    def build(rng):
        shape = _shape(rng)
        a = _t(rng, *shape)
        b = _positive(rng, *shape) if positive_rhs else _t(rng, *shape)
        return [a, b], _projector(lambda: fn(a, b), rng)
    return build


def _unary(fn, make=_t):
    def build(rng):
        x = make(rng, *_shape(rng))
        return [x], _projector(lambda: fn(x), rng)
    return build


def _matmul(rng):
    batch = tuple(int(v) for v in rng.integers(1, 3, size=int(rng.integers(0, 3))))
    m, k, n = (int(v) for v in rng.integers(1, 5, size=3))
    a, b = _t(rng, *batch, m, k), _t(rng, *batch, k, n)
    return [a, b], _projector(lambda: T.matmul(a, b), rng)


def _sum(rng):
    x = _t(rng, *_shape(rng, rank=3))
    axis, keep = int(rng.integers(0, 3)), bool(rng.integers(0, 2))
    return [x], _projector(lambda: x.sum(axis=axis, keepdims=keep) * 1.0, rng)


def _mean(rng):
    x = _t(rng, 2, 3, int(rng.integers(1, 5)))
    return [x], _projector(lambda: x.mean(axis=(0, 2), keepdims=True), rng)


def _reshape_transpose(rng):
    x = _t(rng, 2, 3, int(rng.integers(1, 5)))
    return [x], _projector(lambda: x.transpose(2, 0, 1).reshape(x.shape[2], 6), rng)


def _expand(rng):
    x = _t(rng, 2, 1, int(rng.integers(1, 4)))
    return [x], _projector(lambda: x.expand(2, 5, x.shape[2]), rng)


def _getitem(rng):
    x = _t(rng, 3, 5, int(rng.integers(3, 6)))
    return [x], _projector(lambda: x[1:, ::2, 1:3], rng)


def _concat(rng):
    a = _t(rng, 2, int(rng.integers(1, 4)), 3)
    b = _t(rng, 2, int(rng.integers(1, 4)), 3)
    return [a, b], _projector(lambda: T.concat([a, b], axis=1), rng)


def _split(rng):
    x = _t(rng, 2, 5, 3)
    return [x], _projector(lambda: T.split(x, [2, 3], axis=1)[1] * 2.0 + T.split(x, [3, 2], axis=1)[0][:, :3], rng)


def _gap(rng):
    x = _t(rng, 2, 3, int(rng.integers(1, 5)), int(rng.integers(1, 5)))
    return [x], _projector(lambda: T.global_avg_pool(x), rng)


def _scalar_ops(rng):
    x = _t(rng, *_shape(rng))
    return [x], _projector(lambda: 2.5 - (x * 3.0 + 1.0) / 4.0, rng)


def _conv(rng):
    groups = int(rng.choice([1, 2]))
    cin, cout = groups * int(rng.integers(1, 3)), groups * int(rng.integers(1, 3))
    k = int(rng.choice([1, 3]))
    stride, dilation, padding = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(0, 3))
    size = dilation * (k - 1) + 1 + int(rng.integers(2, 5))
    x = _t(rng, 2, cin, size, size - 1)
    w = _t(rng, cout, cin // groups, k, k)
    b = _t(rng, cout)
    return [x, w, b], _projector(lambda: F.conv2d(x, w, b, stride, padding, dilation, groups), rng)


def _bn(training):
    def build(rng):
        c = int(rng.integers(1, 4))
        x = _t(rng, 2, c, 3, 4)
        g = Tensor(rng.uniform(0.5, 1.5, c), requires_grad=True, dtype=F64)
        b = _t(rng, c)
        state = F.BatchNormState(c, F64)
        state.running_mean[:] = rng.standard_normal(c)
        state.running_var[:] = rng.uniform(0.5, 2.0, c)
        return [x, g, b], _projector(lambda: F.batch_norm(x, g, b, state, training), rng)
    return build


def _resize(rng):
    x = _t(rng, 1, 2, int(rng.integers(2, 6)), int(rng.integers(2, 6)))
    size = (int(rng.integers(1, 10)), int(rng.integers(1, 10)))
    return [x], _projector(lambda: F.bilinear_resize(x, size), rng)


def _layer_norm(rng):
    # width 2 is degenerate: a normalized pair is +-1 and its x-gradient vanishes
    d = int(rng.integers(3, 7))
    x, g, b = _t(rng, 2, 3, d), _t(rng, d), _t(rng, d)
    return [x, g, b], _projector(lambda: F.layer_norm(x, g, b), rng)


def _linear(rng):
    x, w, b = _t(rng, 2, 3, 4), _t(rng, 4, 5), _t(rng, 5)
    return [x, w, b], _projector(lambda: F.linear(x, w, b), rng)


def _bce(rng):
    x = _t(rng, 1, 1, 3, 4, scale=1.5)
    target = (rng.random((1, 1, 3, 4)) < 0.3).astype(F64)
    return [x], lambda: F.bce_with_logits(x, target) * 1.0


def _linear_attention(rng):
    # a single key makes the output v * S / (S + eps): query gradients are O(eps) noise
    lq, lk = int(rng.integers(1, 6)), int(rng.integers(2, 6))
    q, k, v = _t(rng, 1, 2, lq, 3), _t(rng, 1, 2, lk, 3), _t(rng, 1, 2, lk, 2)
    return [q, k, v], _projector(lambda: linear_attention(q, k, v), rng)


# ---------------------------------------------------------------- composites
def _randomize_norms(module, rng) -> None:
    """Draw norm affine params away from the (1, 0) init.

    With beta = 0, relu(gamma * xhat) = gamma * relu(xhat), and a following
    depthwise conv plus batch norm cancels gamma exactly: its true gradient
    is O(bn eps) and no finite difference can resolve it.
    """
    for name, p in module.named_parameters():
        if name.endswith("gamma"):
            p.data[...] = rng.uniform(0.5, 1.5, p.shape)
        elif name.endswith("beta"):
            p.data[...] = rng.normal(0.0, 0.5, p.shape)


def _module_case(make_module, make_inputs, call):
    def build(rng):
        module = make_module(rng)
        _randomize_norms(module, rng)
        inputs = make_inputs(rng)
        return inputs + module.parameters(), _projector(lambda: call(module, inputs), rng)
    return build


def _irb(rng):
    c = int(rng.integers(2, 4))
    cfg = IrbConfig(c, c, int(rng.integers(1, 3)), 1, int(rng.integers(1, 4)))
    return _module_case(lambda r: InvertedResidual(cfg, r, F64),
                        lambda r: [_t(r, 2, c, 5, 5)], lambda m, xs: m(xs[0]))(rng)


def _irb_strided(rng):
    cfg = IrbConfig(2, 3, 2, 2, 1)
    return _module_case(lambda r: InvertedResidual(cfg, r, F64),
                        lambda r: [_t(r, 2, 2, 6, 6)], lambda m, xs: m(xs[0]))(rng)


def _caff(rng):
    c = int(rng.choice([2, 4]))
    return _module_case(lambda r: CAFF(c, 2, r, F64),
                        lambda r: [_t(r, 2, c, 3, 3), _t(r, 2, c, 3, 3)], lambda m, xs: m(*xs))(rng)


def _edge_compact(rng):
    return _module_case(lambda r: EdgeCompact(3, rng=r, dtype=F64),
                        lambda r: [_t(r, 2, 2, 6, 6)], lambda m, xs: m(xs[0]))(rng)


def _edge_head(rng):
    return _module_case(lambda r: EdgeHead(3, 4, r, F64),
                        lambda r: [_t(r, 2, 3, 4, 4)], lambda m, xs: m(xs[0]))(rng)


def _decoder(rng):
    return _module_case(lambda r: DecoderBlock(4, 3, r, F64),
                        lambda r: [_t(r, 2, 2, 3, 3), _t(r, 2, 2, 3, 3)], lambda m, xs: m(xs[0], [xs[1]]))(rng)


def _ltr(rng):
    cfg = AttentionConfig(8, int(rng.choice([1, 2])))
    lq, ls = int(rng.integers(1, 6)), int(rng.integers(2, 6))
    return _module_case(lambda r: LinearTransformerEncoder(cfg, r, F64),
                        lambda r: [_t(r, 1, lq, 8), _t(r, 1, ls, 8)], lambda m, xs: m(*xs))(rng)


def _ltr_self(rng):
    cfg = AttentionConfig(8, 2)
    return _module_case(lambda r: LinearTransformerEncoder(cfg, r, F64),
                        lambda r: [_t(r, 1, 4, 8)], lambda m, xs: m(xs[0], xs[0]))(rng)


def _trfa(rng):
    cfg = AttentionConfig(8, 2)
    return _module_case(lambda r: TRFA(cfg, r, F64),
                        lambda r: [_t(r, 2, 8, 2, 2), _t(r, 2, 8, 2, 2)], lambda m, xs: m(*xs))(rng)


def _depth_batch(rng, shape):
    target = rng.uniform(0.5, 8.0, shape)
    mask = rng.random(shape) < 0.8
    edges = (rng.random((shape[0], 1, shape[2] // 2, shape[3] // 2)) < 0.3).astype(F64)
    return target, mask, edges


def _total_loss(rng):
    shape = (2, 1, 4, 6)
    d = Tensor(rng.uniform(0.5, 8.0, shape), requires_grad=True, dtype=F64)
    logits = _t(rng, 2, 1, 2, 3)
    target, mask, edges = _depth_batch(rng, shape)
    return [d, logits], lambda: total_loss(d, target, logits, edges, mask)[0]


def _tiny_model_inputs(rng):
    model = EGDNet(TINY_MODEL, rng=rng, dtype=F64)
    _randomize_norms(model, rng)
    rgb = Tensor(rng.uniform(0.0, 1.0, (2, 3, 32, 32)), requires_grad=True, dtype=F64)
    grads = _t(rng, 2, 2, 32, 32, scale=0.5)
    return model, rgb, grads


def _param_subset(model, rng, count=MODEL_TENSORS_PER_INSTANCE) -> list[Tensor]:
    # a full sweep costs two forwards per scalar; sample tensors, one element each
    params = [p for n, p in model.named_parameters() if n not in STRUCTURALLY_ZERO]
    picks = rng.choice(len(params), size=min(count, len(params)), replace=False)
    return [params[i] for i in sorted(picks)]


def _model(rng):
    model, rgb, grads = _tiny_model_inputs(rng)

    def out():
        depth, edge = model(rgb, grads)
        return T.concat([T.reshape(depth, (-1,)), T.reshape(edge, (-1,))], axis=0)

    return [rgb, grads] + _param_subset(model, rng), _projector(out, rng)


def _model_loss(rng):
    model, rgb, grads = _tiny_model_inputs(rng)
    _, mask, edges = _depth_batch(rng, (2, 1, 32, 32))
    # L1 terms kink where a residual or a residual difference is zero; this
    # offset pattern keeps residuals >= 0.2 and neighbour differences >= 0.2
    with T.no_grad():
        start = model(rgb, grads)[0].data
    ys, xs = np.mgrid[0:32, 0:32]
    target = start - 0.2 * (1 + (xs + 2 * ys) % 3)

    def loss():
        depth, edge = model(rgb, grads)
        return total_loss(depth, target, edge, edges, mask)[0]

    return _param_subset(model, rng), loss


def _cases() -> dict[str, GradCase]:
    ops = {
        "add": _binary(T.add),
        "sub": _binary(T.sub),
        "mul": _binary(T.mul),
        "div": _binary(T.div, positive_rhs=True),
        "scalar_ops": _scalar_ops,
        "relu": _unary(T.relu, _off_kink),
        "sigmoid": _unary(T.sigmoid),
        "elu": _unary(T.elu, _off_kink),
        "exp": _unary(T.exp),
        "log": _unary(T.log, _positive),
        "abs": _unary(T.abs_, _off_kink),
        "pow": _unary(lambda x: x ** -0.5, _positive),
        "matmul": _matmul,
        "sum": _sum,
        "mean": _mean,
        "reshape_transpose": _reshape_transpose,
        "expand": _expand,
        "getitem": _getitem,
        "concat": _concat,
        "split": _split,
        "global_avg_pool": _gap,
        "conv2d": _conv,
        "batch_norm_train": _bn(True),
        "batch_norm_eval": _bn(False),
        "bilinear_resize": _resize,
        "layer_norm": _layer_norm,
        "linear": _linear,
        "bce_with_logits": _bce,
        "linear_attention": _linear_attention,
    }
    blocks = {
        "irb": _irb,
        "irb_strided": _irb_strided,
        "caff": _caff,
        "edge_compact": _edge_compact,
        "edge_head": _edge_head,
        "decoder_block": _decoder,
        "ltr_encoder": _ltr,
        "ltr_encoder_self": _ltr_self,
        "trfa": _trfa,
        "total_loss": _total_loss,
    }
    out = {n: GradCase(n, "op", b, fallback_epsilons=FALLBACK_EPSILONS) for n, b in ops.items()}
    out.update({n: GradCase(n, "block", b, max_elements=12, fallback_epsilons=FALLBACK_EPSILONS)
                for n, b in blocks.items()})
    for name, build in (("model", _model), ("model_total_loss", _model_loss)):
        out[name] = GradCase(name, "model", build, tol=1e-4, max_elements=1, fallback_epsilons=FALLBACK_EPSILONS)
    return out


CASES = _cases()


def run_case(name: str, instances: int = 10, seed: int = 0) -> list[GradCheckReport]:
    """Check ``instances`` independent random draws of one case."""
    try:
        case = CASES[name]
    except KeyError:
        raise ValueError(f"unknown gradient case '{name}'; known: {', '.join(sorted(CASES))}") from None
    reports = []
    for i in range(instances):
        rng = np.random.default_rng([seed, i, len(name)])
        inputs, fn = case.build(rng)
        reports.append(grad_check(fn, inputs, case.epsilon, case.tol, f"{name}#{i}", case.max_elements,
                                  np.random.default_rng([seed, i]), case.fallback_epsilons))
    return reports


def summarize(name: str, reports: list[GradCheckReport]) -> GradCheckReport:
    """Fold per-instance reports into one (worst error, all must pass)."""
    worst = max(r.max_rel_error for r in reports)
    notes = "; ".join(r.message for r in reports if r.message)
    return GradCheckReport(name, worst, [r.max_rel_error for r in reports], all(r.passed for r in reports),
                           reports[0].tolerance, notes)
