"""Central finite-difference checks for every differentiable op and both losses.

Each check draws random float64 inputs away from the non-differentiable points
of relu, max and the hinge, reduces the op's output to a scalar through a fixed
random projection, and compares backward() against (f(x+h) - f(x-h)) / 2h.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .encoders import ObjectEncoderParams, TextEncoderParams, encode_objects, encode_texts
from .losses import ContrastBatch, batch_margin_loss, info_nce, margin_loss
from .tensor import Tensor
from .training import TrainBatch, TrainConfig, joint_objective

STEP = 1e-3
TOLERANCE = 1e-4
# gradients smaller than this are compared in absolute terms
GRAD_FLOOR = 1e-6
KINK_MARGIN = 1e-2
COORDS_PER_INPUT = 24


@dataclass
class GradCheckResult:
    name: str
    trials: int
    max_rel_error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise ||a - n|| / max(||a||, ||n||), compared absolutely for tiny gradients."""
    analytic, numeric = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), GRAD_FLOOR)
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(fn: Callable[..., Tensor], inputs: list[np.ndarray], rng: np.random.Generator,
                    step: float = STEP, coords_per_input: int | None = COORDS_PER_INPUT) -> float:
    """Worst per-input relative error over (a sample of) each input's coordinates."""
    leaves = [Tensor(x, requires_grad=True) for x in inputs]
    T.backward(fn(*leaves))
    worst = 0.0
    for k, leaf in enumerate(leaves):
        grad = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = np.arange(leaf.data.size)
        if coords_per_input is not None and flat.size > coords_per_input:
            flat = rng.choice(flat, size=coords_per_input, replace=False)
        analytic, numeric = [], []
        for i in flat:
            idx = np.unravel_index(i, leaf.data.shape)

            def f(delta):
                args = [x.copy() for x in inputs]
                args[k][idx] += delta
                with T.no_grad():
                    return fn(*[Tensor(a) for a in args]).item()

            analytic.append(grad[idx])
            numeric.append((f(step) - f(-step)) / (2 * step))
        worst = max(worst, relative_error(np.array(analytic), np.array(numeric)))
    return worst


def _away_from_zero(rng, shape, low=0.1, high=1.0):
    return rng.uniform(low, high, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng, shape, gap=0.1):
    """Entries pairwise at least ``gap`` apart, so max has a clear winner."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) * gap + rng.uniform(0, gap / 4, size=n)) / max(n * gap, 1.0)
    return vals.reshape(shape) - 0.5


def _project(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalarize ``out`` by a fixed random linear functional."""
    if out.shape == ():
        return out * float(weights.reshape(-1)[0])
    return T.sum_(T.mul(out, Tensor(weights.reshape(out.shape))))


def _unary(op, make_input):
    def build(rng):
        x = make_input(rng)
        with T.no_grad():
            shape = op(Tensor(x)).shape
        w = rng.normal(size=shape)
        return (lambda a: _project(op(a), w)), [x]
    return build


def _binary(op, make_a, make_b):
    def build(rng):
        a, b = make_a(rng), make_b(rng)
        with T.no_grad():
            shape = op(Tensor(a), Tensor(b)).shape
        w = rng.normal(size=shape)
        return (lambda x, y: _project(op(x, y), w)), [a, b]
    return build


def _normal(*shape):
    return lambda rng: rng.normal(size=shape)


def _build_stack(rng):
    xs = [rng.normal(size=(3,)) for _ in range(4)]
    w = rng.normal(size=(4, 3))
    return (lambda *ts: _project(T.stack(ts), w)), xs


def _build_concat(rng):
    xs = [rng.normal(size=(k, 3)) for k in (1, 2, 3)]
    w = rng.normal(size=(6, 3))
    return (lambda *ts: _project(T.concat(ts), w)), xs


def _build_logsumexp_list(rng):
    xs = [np.asarray(rng.normal()) for _ in range(5)]
    return (lambda *ts: T.logsumexp(list(ts)) * 1.7), xs


def _build_info_nce(rng):
    m = int(rng.integers(2, 7))
    tau = float(rng.uniform(0.1, 1.0))
    z = rng.normal(size=(2 * m, 5))
    return (lambda a: info_nce(ContrastBatch.adjacent(T.l2_normalize(a)), tau)), [z]


def _build_margin(rng):
    s_m, s_r = rng.uniform(-1, 1, size=2)
    gamma = float(rng.uniform(0.05, 0.5))
    if abs(s_r - s_m + gamma) < 0.1:
        s_r = s_m - gamma + 0.3
    return (lambda a, b: margin_loss(a, b, gamma)), [np.asarray(s_m), np.asarray(s_r)]


def _build_batch_margin(rng):
    segments, lo = [], 0
    for _ in range(3):
        k = int(rng.integers(1, 4))
        segments.append((lo, lo + k))
        lo += k
    gamma = 0.2
    while True:
        z = _distinct(rng, (lo, 4)) + rng.normal(scale=0.5, size=(lo, 4))
        cm, cr = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        if _hinge_margin(z, segments, cm, cr, gamma) > KINK_MARGIN:
            break
    return (lambda a, b, c: batch_margin_loss(a, segments, b, c, gamma)), [z, cm, cr]


def _hinge_margin(z, segments, cm, cr, gamma) -> float:
    """Distance to the nearest kink of the max-over-objects hinge."""
    worst = np.inf
    for k, (lo, hi) in enumerate(segments):
        sm, sr = z[lo:hi] @ cm[k], z[lo:hi] @ cr[k]
        for s in (sm, sr):
            if s.size > 1:
                top = np.sort(s)[-2:]
                worst = min(worst, top[1] - top[0])
        worst = min(worst, abs(sr.max() - sm.max() + gamma))
    return float(worst)


# small encoder geometry for the composite checks
_P_IN, _HIDDEN, _DIM, _CAP = 12, 6, 5, 10


def _encoder_problem(rng):
    """Random encoders, crops, views and captions far from every kink."""
    segments, lo = [], 0
    for _ in range(3):
        k = int(rng.integers(1, 4))
        segments.append((lo, lo + k))
        lo += k
    while True:
        # weights at the scale the trainer initializes them
        obj = ObjectEncoderParams(rng.normal(size=(_HIDDEN, _P_IN)) / np.sqrt(_P_IN),
                                  rng.normal(size=_HIDDEN) / np.sqrt(_P_IN),
                                  rng.normal(size=(_DIM, _HIDDEN)) / np.sqrt(_HIDDEN),
                                  rng.normal(size=_DIM) / np.sqrt(_HIDDEN))
        text = TextEncoderParams(rng.normal(size=(_DIM, _CAP)) / np.sqrt(_CAP), rng.normal(size=_DIM) / np.sqrt(_CAP))
        crops = rng.uniform(0, 1, size=(lo, _P_IN))
        views = rng.uniform(0, 1, size=(2 * lo, _P_IN))
        cm = np.abs(rng.normal(size=(3, _CAP))) * (rng.uniform(size=(3, _CAP)) < 0.5)
        cr = np.abs(rng.normal(size=(3, _CAP))) * (rng.uniform(size=(3, _CAP)) < 0.5)
        batch = TrainBatch(views=views, pair_index=np.arange(2 * lo) ^ 1, provenance=[],
                           crops=crops, segments=segments, caption_m=cm, caption_r=cr, sample_ids=[])
        pre = np.concatenate([crops, views]) @ obj.W1.T + obj.b1
        with T.no_grad():
            z = encode_objects(obj, crops).data
            em, er = encode_texts(text, cm).data, encode_texts(text, cr).data
        if min(np.abs(pre).min(), _hinge_margin(z, segments, em, er, 0.2)) > KINK_MARGIN:
            return obj, text, batch


def _param_list(obj, text):
    return [obj.W1, obj.b1, obj.W2, obj.b2, text.W, text.b]


def _leaves_fn(loss):
    def fn(W1, b1, W2, b2, W, b):
        return loss(ObjectEncoderParams(W1, b1, W2, b2), TextEncoderParams(W, b))
    return fn


def _build_contrastive_encoders(rng):
    obj, text, batch = _encoder_problem(rng)
    return _leaves_fn(lambda o, t: info_nce(ContrastBatch.adjacent(encode_objects(o, batch.views)), 0.1)), \
        _param_list(obj, text)


def _build_match_encoders(rng):
    obj, text, batch = _encoder_problem(rng)

    def loss(o, t):
        z = encode_objects(o, batch.crops)
        return batch_margin_loss(z, batch.segments, encode_texts(t, batch.caption_m),
                                 encode_texts(t, batch.caption_r), 0.2)

    return _leaves_fn(loss), _param_list(obj, text)


def _build_joint_encoders(rng):
    obj, text, batch = _encoder_problem(rng)
    config = TrainConfig(schedule="joint")
    normalizer = float(rng.uniform(0.5, 3.0))
    return _leaves_fn(lambda o, t: joint_objective(o, t, batch, config, normalizer)[0]), _param_list(obj, text)


OP_CHECKS: dict[str, Callable] = {
    "add": _binary(T.add, _normal(3, 4), _normal(3, 4)),
    "add_row_bias": _binary(T.add, _normal(3, 4), _normal(4)),
    "add_scalar": _binary(T.add, _normal(3, 4), _normal()),
    "sub": _binary(T.sub, _normal(3, 4), _normal(3, 4)),
    "sub_row_bias": _binary(T.sub, _normal(3, 4), _normal(4)),
    "mul": _binary(T.mul, _normal(3, 4), _normal(3, 4)),
    "mul_scalar": _binary(T.mul, _normal(3, 4), _normal()),
    "div_scalar": _unary(lambda a: a / 2.5, _normal(3, 4)),
    "neg": _unary(lambda a: -a, _normal(3, 4)),
    "matmul": _binary(T.matmul, _normal(3, 4), _normal(4, 2)),
    "matvec": _binary(T.matmul, _normal(3, 4), _normal(4)),
    "transpose": _unary(T.transpose, _normal(3, 4)),
    "relu": _unary(T.relu, lambda rng: _away_from_zero(rng, (3, 4))),
    "dot": _binary(T.dot, _normal(5), _normal(5)),
    "l2_normalize": _unary(T.l2_normalize, _normal(5)),
    "l2_normalize_rows": _unary(T.l2_normalize, _normal(3, 5)),
    "logsumexp": _unary(lambda a: T.logsumexp(a, axis=1), _normal(3, 5)),
    "logsumexp_list": _build_logsumexp_list,
    "sum": _unary(T.sum_, _normal(3, 4)),
    "sum_axis": _unary(lambda a: T.sum_(a, axis=0), _normal(3, 4)),
    "mean": _unary(T.mean, _normal(3, 4)),
    "max": _unary(T.max_, lambda rng: _distinct(rng, (3, 4))),
    "max_axis": _unary(lambda a: T.max_(a, axis=1), lambda rng: _distinct(rng, (3, 4))),
    "take": _unary(lambda a: T.take(a, (np.array([0, 2, 2]), np.array([1, 0, 0]))), _normal(3, 4)),
    "getitem": _unary(lambda a: a[1:], _normal(3, 4)),
    "stack": _build_stack,
    "concat": _build_concat,
    "info_nce": _build_info_nce,
    "margin_loss": _build_margin,
    "batch_margin_loss": _build_batch_margin,
    "contrastive_through_encoders": _build_contrastive_encoders,
    "match_through_encoders": _build_match_encoders,
    "joint_through_encoders": _build_joint_encoders,
}


def run_check(name: str, seeds=range(10), step: float = STEP) -> GradCheckResult:
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng([seed, len(name)])
        fn, inputs = OP_CHECKS[name](rng)
        worst = max(worst, check_gradients(fn, inputs, rng, step=step))
    return GradCheckResult(name, len(list(seeds)), worst)


def run_all(seeds=range(10), step: float = STEP) -> list[GradCheckResult]:
    return [run_check(name, seeds, step) for name in OP_CHECKS]


def format_table(results: list[GradCheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'op':<{width}}  trials  max_rel_error  status"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.trials:>6}  {r.max_rel_error:>13.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
