"""Timing of fused kernels against their loop-based definitions.

The two paths are checked for agreement (1e-9, fp64) before any timing.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from fpconv.errors import FPConvError
from fpconv.flatten import FPConv, ProjWeights, fpconv_reference, normalize_sparse, project_to_grid
from fpconv.nn.tensor import Tensor

AGREEMENT_TOL = 1e-9


@dataclass
class BenchResult:
    kernel: str
    n_points: int
    plane: int
    iters: int
    fused_ns: float
    naive_ns: float
    max_abs_diff: float

    def format(self) -> str:
        return "\n".join(
            [
                f"kernel      {self.kernel}  (N={self.n_points}, plane={self.plane}x{self.plane}, iters={self.iters})",
                f"agreement   max |fused - naive| = {self.max_abs_diff:.3e}",
                f"fused       {self.fused_ns:,.0f} ns/op",
                f"naive       {self.naive_ns:,.0f} ns/op",
                f"speedup     {self.naive_ns / max(self.fused_ns, 1e-9):.1f}x",
            ]
        )


def naive_projection(W: np.ndarray, feats: np.ndarray) -> np.ndarray:
    N, L = W.shape
    S = np.zeros((L, feats.shape[1]))
    for j in range(L):
        for i in range(N):
            S[j] += W[i, j] * feats[i]
    return S


def naive_sparse(W: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    W = W.copy()
    for i in range(W.shape[0]):
        W[i] /= np.sqrt(sum(v * v for v in W[i])) + eps
    for j in range(W.shape[1]):
        W[:, j] /= max(np.sqrt(sum(v * v for v in W[:, j])), 1.0)
    return W


def _time(fn, iters: int) -> float:
    start = time.perf_counter_ns()
    for _ in range(iters):
        fn()
    return (time.perf_counter_ns() - start) / iters


class AgreementError(FPConvError, AssertionError):
    pass


def run_bench(kernel: str, n_points: int, plane: int, iters: int, channels: int = 16, seed: int = 0) -> BenchResult:
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    L = plane * plane
    rel = rng.uniform(-0.1, 0.1, (n_points, 3))
    feats = rng.standard_normal((n_points, channels))
    if kernel == "project":
        W = np.abs(rng.standard_normal((n_points, L)))
        W /= W.sum(axis=0)
        pw = ProjWeights(Tensor(W), (plane, plane), "dense")

        def fused():
            return project_to_grid(pw, feats).tensor.data.reshape(L, channels)

        def naive():
            return naive_projection(W, feats)

    elif kernel == "normalize":
        W = rng.standard_normal((n_points, L))

        def fused():
            return normalize_sparse(ProjWeights(Tensor(W), (plane, plane))).matrix.data

        def naive():
            return naive_sparse(W)

    elif kernel == "fpconv":
        conv = FPConv(channels, channels, rng, plane=plane).eval()

        def fused():
            return conv(rel, feats).data

        def naive():
            return fpconv_reference(rel, feats, conv)

    else:
        raise ValueError(f"unknown kernel {kernel!r}")
    diff = float(np.max(np.abs(fused() - naive())))
    if not diff <= AGREEMENT_TOL:
        raise AgreementError(f"fused and naive {kernel} disagree by {diff:.3e}")
    return BenchResult(kernel, n_points, plane, iters, _time(fused, iters), _time(naive, iters), diff)
