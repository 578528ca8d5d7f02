"""Finite-difference checks for every differentiable op, block and network.

Each case builds small fp64 inputs from a seeded generator and returns the
function, its inputs and any module parameters to check.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from fpconv.blocks import BlockSpec, PointMLPConv, ResidualBlock
from fpconv.flatten import FPConv, ProjWeights, normalize_dense, normalize_sparse, project_to_grid
from fpconv.nn import functional as F
from fpconv.nn.gradcheck import GradCheckReport, grad_check
from fpconv.nn.tensor import Tensor


def _t(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _away_from_zero(rng, *shape) -> Tensor:
    # keeps kinks of piecewise-linear ops out of the finite-difference stencil
    x = rng.standard_normal(shape)
    return Tensor(np.where(np.abs(x) < 0.05, 0.5, x), requires_grad=True)


def _distinct(rng, *shape) -> Tensor:
    # well-separated values so arg-max choices stay fixed under perturbation
    n = int(np.prod(shape))
    return Tensor((rng.permutation(n) * 0.1 + rng.uniform(0, 0.01, n)).reshape(shape), requires_grad=True)


def _case_matmul(rng):
    return (lambda a, b: F.matmul(a, b)), [_t(rng, 4, 3), _t(rng, 3, 2)], None


def _case_matmul_batched(rng):
    return (lambda a, b: F.matmul(a, b)), [_t(rng, 2, 4, 3), _t(rng, 2, 3, 5)], None


def _case_linear(rng):
    return (lambda x, w, b: F.linear(x, w, b)), [_t(rng, 5, 3), _t(rng, 3, 4), _t(rng, 4)], None


def _case_conv2d(rng):
    return (lambda x, k, b: F.conv2d(x, k, 1, b)), [_t(rng, 5, 5, 2), _t(rng, 3, 3, 2, 3), _t(rng, 3)], None


def _case_conv2d_batched(rng):
    return (lambda x, k: F.conv2d(x, k, 0)), [_t(rng, 2, 4, 4, 2), _t(rng, 4, 4, 2, 3)], None


def _case_leaky_relu(rng):
    return (lambda x: F.leaky_relu(x)), [_away_from_zero(rng, 4, 5)], None


def _case_batch_norm_train(rng):
    stats = F.RunningStats(3)
    return (lambda x, g, b: F.batch_norm(x, g, b, True, stats)), [_t(rng, 6, 3), _t(rng, 3), _t(rng, 3)], None


def _case_batch_norm_eval(rng):
    stats = F.RunningStats(3)
    stats.mean, stats.var = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
    return (lambda x, g, b: F.batch_norm(x, g, b, False, stats)), [_t(rng, 6, 3), _t(rng, 3), _t(rng, 3)], None


def _case_softmax(rng):
    return (lambda x: F.softmax(x, axis=-2)), [_t(rng, 2, 5, 3)], None


def _case_max_reduce(rng):
    return (lambda x: F.max_reduce(x, axis=1)[0]), [_distinct(rng, 3, 4, 2)], None


def _case_segment_max(rng):
    return (lambda x: F.segment_max(x, [0, 3, 7])[0]), [_distinct(rng, 7, 3)], None


def _case_cross_entropy(rng):
    labels = rng.integers(0, 4, 6)
    return (lambda x: F.cross_entropy(x, labels)), [_t(rng, 6, 4)], None


def _case_gather(rng):
    idx = rng.integers(0, 5, (4, 3))
    return (lambda x: F.gather(x, idx)), [_t(rng, 5, 2)], None


def _case_weighted_gather(rng):
    idx = rng.integers(0, 5, (4, 3))
    w = rng.random((4, 3))
    return (lambda x: F.weighted_gather(x, idx, w)), [_t(rng, 5, 2)], None


def _case_elementwise(rng):
    def fn(a, b, c):
        return F.sub(F.mul(F.add(a, b), F.concat([c, c], axis=-1)), F.transpose(F.swap_last(a), (0, 2, 1)))

    return fn, [_t(rng, 2, 3, 4), _t(rng, 4), _t(rng, 2, 3, 2)], None


def _case_normalize_dense(rng):
    return (lambda w: normalize_dense(ProjWeights(w, (2, 3))).matrix), [_t(rng, 2, 5, 6)], None


def _case_normalize_sparse(rng):
    # scale so that some columns exceed unit norm and some do not
    return (lambda w: normalize_sparse(ProjWeights(w, (2, 3))).matrix), [_t(rng, 2, 5, 6, scale=0.7)], None


def _case_project(rng):
    def fn(w, f):
        return project_to_grid(ProjWeights(w, (2, 2), "dense"), f).tensor

    return fn, [_t(rng, 3, 5, 4), _t(rng, 3, 5, 2)], None


def _fpconv_case(norm):
    def case(rng):
        conv = FPConv(3, 4, rng, plane=3, normalization=norm, dist_widths=(6, 6), predictor_hidden=6)
        return (lambda rel, f: conv(rel, f)), [_t(rng, 2, 6, 3, scale=0.3), _t(rng, 2, 6, 3)], conv.parameters()

    return case


def _case_pointmlp(rng):
    conv = PointMLPConv(3, 4, rng, hidden=5)
    return (lambda rel, f: conv(rel, f)), [_t(rng, 3, 5, 3, scale=0.3), _t(rng, 3, 5, 3)], conv.parameters()


def _block_case(conv):
    def case(rng):
        pts = rng.uniform(0, 1, (16, 3))
        spec = BlockSpec(3, 4, 5, 0.6, n_max=4, downsample=True, conv=conv, plane=3, dist_widths=(4, 4), predictor_hidden=4)
        block = ResidualBlock(spec, rng)
        grouping = block.group(pts)
        return (lambda f: block.forward_grouped(f, grouping)), [_t(rng, 16, 3)], block.parameters()

    return case


CASES: Dict[str, Callable] = {
    "matmul": _case_matmul,
    "matmul_batched": _case_matmul_batched,
    "linear": _case_linear,
    "conv2d": _case_conv2d,
    "conv2d_batched": _case_conv2d_batched,
    "leaky_relu": _case_leaky_relu,
    "batch_norm_train": _case_batch_norm_train,
    "batch_norm_eval": _case_batch_norm_eval,
    "softmax": _case_softmax,
    "max_reduce": _case_max_reduce,
    "segment_max": _case_segment_max,
    "cross_entropy": _case_cross_entropy,
    "gather": _case_gather,
    "weighted_gather": _case_weighted_gather,
    "elementwise": _case_elementwise,
    "normalize_dense": _case_normalize_dense,
    "normalize_sparse": _case_normalize_sparse,
    "project_to_grid": _case_project,
    "fpconv_none": _fpconv_case("none"),
    "fpconv_dense": _fpconv_case("dense"),
    "fpconv_sparse": _fpconv_case("sparse"),
    "pointmlp_conv": _case_pointmlp,
    "residual_block": _block_case("fpconv"),
    "parallel_block": _block_case("parallel"),
}


@dataclass
class SuiteResult:
    name: str
    report: GradCheckReport


def run_case(name: str, tolerance: float = 1e-4, h: float = 1e-5, seed: int = 0) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    fn, inputs, params = CASES[name](rng)
    return grad_check(fn, inputs, tolerance=tolerance, h=h, params=params, rng=rng)


def run_suite(names: Optional[Sequence[str]] = None, tolerance: float = 1e-4, h: float = 1e-5, seed: int = 0) -> List[SuiteResult]:
    names = list(CASES) if names is None else list(names)
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise KeyError(f"unknown op {unknown[0]!r}; known: {', '.join(CASES)}")
    return [SuiteResult(n, run_case(n, tolerance, h, seed)) for n in names]


def format_report(results: Sequence[SuiteResult]) -> str:
    lines = [f"{'op':<18} {'max_rel_err':>12} {'max_abs_err':>12} {'checked':>8}  status"]
    for r in results:
        rep = r.report
        status = "ok" if rep.passed else "FAIL"
        lines.append(f"{r.name:<18} {rep.max_rel_err:>12.3e} {rep.max_abs_err:>12.3e} {rep.n_checked:>8}  {status}")
    return "\n".join(lines)
