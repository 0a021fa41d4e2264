"""Drift decomposition and gradient-noise diagnostics.

The full-data gradient on a noisy dataset splits exactly into a part from
correctly labeled samples and a part from corrupted ones::

    g_total = (N_c / N) * mean_grad(correct) + (N_w / N) * mean_grad(wrong)

The second term is the bias that pulls SGD towards memorizing wrong labels.
The same split applies to a single minibatch with weights ``B_c / B`` and
``B_w / B``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import nn
from .data import LabeledDataset


@dataclass
class DriftDecomposition:
    g_total: np.ndarray
    g_correct: np.ndarray
    g_wrong: np.ndarray
    cos_tc: Optional[float]
    cos_tw: Optional[float]
    cos_cw: Optional[float]
    norm_correct: float
    norm_wrong: float
    tau_effective: float

    @property
    def norm_gap(self) -> float:
        """``|g_wrong| - |g_correct|``."""
        return self.norm_wrong - self.norm_correct


@dataclass
class DiffusionEstimate:
    trace_sigma: float
    trace_d: float
    batch_size: int
    learning_rate: float
    num_samples_used: int


def cosine(a, b) -> Optional[float]:
    """Cosine similarity, or ``None`` when either vector is zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return None
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _summed_grad(net, params, X, y, loss, mode, chunk, dropout_seed=None):
    """Sum (not mean) of per-sample loss gradients, in fixed chunk order."""
    total = np.zeros(params.total_dim)
    for start in range(0, len(y), chunk):
        yc = y[start:start + chunk]
        _, g = nn.loss_and_grad(net, params, X[start:start + chunk], yc, loss, mode, dropout_seed)
        total += g * len(yc)
    return total


def _assemble(g_c, g_w, n_c, n_w) -> DriftDecomposition:
    g_t = g_c + g_w
    return DriftDecomposition(
        g_total=g_t, g_correct=g_c, g_wrong=g_w,
        cos_tc=cosine(g_t, g_c), cos_tw=cosine(g_t, g_w), cos_cw=cosine(g_c, g_w),
        norm_correct=float(np.linalg.norm(g_c)), norm_wrong=float(np.linalg.norm(g_w)),
        tau_effective=n_w / (n_c + n_w))


def decompose_dataset_gradient(net: nn.NetworkSpec, params: nn.ParamSet, ds: LabeledDataset,
                               loss: str = nn.CROSS_ENTROPY, mode: str = "eval",
                               chunk: int = 1024) -> DriftDecomposition:
    """Split the full-data gradient (noisy labels) into correct and wrong parts.

    ``mode="eval"`` probes the drift with running batch-norm statistics,
    summed in chunks. ``mode="train"`` runs the whole dataset as one batch
    (batch statistics over all samples) and splits the backward pass, so
    the parts stay exactly additive in both modes.
    """
    mask = ds.corrupted
    n_w = int(mask.sum())
    if mode == "train":
        g_c, g_w = nn.group_grads(net, params, ds.features, ds.noisy_labels, (~mask, mask), loss, mode)
        return _assemble(g_c, g_w, len(ds) - n_w, n_w)
    n = len(ds)
    parts = []
    for sel in (~mask, mask):
        idx = np.flatnonzero(sel)
        if idx.size == 0:
            parts.append(np.zeros(params.total_dim))
            continue
        parts.append(_summed_grad(net, params, ds.features[idx], ds.noisy_labels[idx],
                                  loss, mode, chunk) / n)
    return _assemble(parts[0], parts[1], n - n_w, n_w)


def decompose_minibatch_gradient(net: nn.NetworkSpec, params: nn.ParamSet, X, y, corrupted,
                                 loss: str = nn.CROSS_ENTROPY, mode: str = "eval",
                                 dropout_seed=None) -> DriftDecomposition:
    """Minibatch version: weights ``B_c / B`` and ``B_w / B``.

    Built from per-sample gradients of one shared forward pass, so the two
    parts add up to the minibatch gradient in either mode.
    """
    corrupted = np.asarray(corrupted, dtype=bool)
    G = nn.per_sample_grads(net, params, X, y, loss, mode, dropout_seed)
    B = len(corrupted)
    g_c = G[~corrupted].sum(axis=0) / B
    g_w = G[corrupted].sum(axis=0) / B
    return _assemble(g_c, g_w, int((~corrupted).sum()), int(corrupted.sum()))


def estimate_diffusion(net: nn.NetworkSpec, params: nn.ParamSet, ds: LabeledDataset,
                       loss: str = nn.CROSS_ENTROPY, learning_rate: float = 1e-2,
                       batch_size: int = 16, sample_count: Optional[int] = None,
                       seed=0, mode: str = "eval", chunk: int = 256) -> DiffusionEstimate:
    """Trace of the per-sample gradient covariance and of ``eta Sigma / (2B)``.

    ``sample_count`` samples (drawn without replacement; all when ``None``)
    give the unbiased per-coordinate variances, summed into ``trace_sigma``.
    """
    n = len(ds)
    count = n if sample_count is None else min(int(sample_count), n)
    if count < 2:
        raise ValueError("sample_count must be at least 2")
    if sample_count is None or count == n:
        idx = np.arange(n)
    else:
        idx = np.sort(np.random.default_rng(seed).choice(n, size=count, replace=False))
    # two-pass variance over chunks keeps memory bounded
    total = np.zeros(params.total_dim)
    for start in range(0, count, chunk):
        sel = idx[start:start + chunk]
        total += nn.per_sample_grads(net, params, ds.features[sel], ds.noisy_labels[sel],
                                     loss, mode).sum(axis=0)
    mean = total / count
    sq = 0.0
    for start in range(0, count, chunk):
        sel = idx[start:start + chunk]
        G = nn.per_sample_grads(net, params, ds.features[sel], ds.noisy_labels[sel], loss, mode)
        sq += float(((G - mean) ** 2).sum())
    trace_sigma = sq / (count - 1)
    return DiffusionEstimate(trace_sigma, diffusion_trace(trace_sigma, learning_rate, batch_size),
                             batch_size, learning_rate, count)


def diffusion_trace(trace_sigma: float, learning_rate: float, batch_size: int) -> float:
    """``eta * tr(Sigma) / (2 B)``."""
    return learning_rate * trace_sigma / (2.0 * batch_size)


def log_window_smooth(iterations, values, window: int = 50, grid_size: Optional[int] = None):
    """Moving average over a log-spaced iteration grid.

    Values are linearly interpolated (in ``log(iteration)``) onto
    ``grid_size`` log-spaced points spanning the input, then averaged over a
    centered box of ``window`` grid points (shrunk at the ends). Returns
    ``(grid, smoothed)``.
    """
    it = np.asarray(iterations, dtype=np.float64)
    val = np.asarray(values, dtype=np.float64)
    if it.size == 0:
        return np.zeros(0), np.zeros(0)
    if window < 1:
        raise ValueError("window must be >= 1")
    if np.any(it <= 0) or np.any(np.diff(it) <= 0):
        raise ValueError("iterations must be positive and strictly increasing")
    m = it.size if grid_size is None else int(grid_size)
    grid = np.exp(np.linspace(math.log(it[0]), math.log(it[-1]), m)) if m > 1 else it[:1].copy()
    if m > 1:
        grid[0], grid[-1] = it[0], it[-1]
    on_grid = np.interp(np.log(grid), np.log(it), val)
    half_lo, half_hi = (window - 1) // 2, window // 2
    out = np.empty(m)
    for i in range(m):
        lo, hi = max(0, i - half_lo), min(m, i + half_hi + 1)
        out[i] = on_grid[lo:hi].mean()
    return grid, out


def nan_if_none(value) -> float:
    return math.nan if value is None else float(value)
