"""Predictive metrics, explanation fidelity, inclusion/exclusion curves and timing."""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .core import DTYPE
from .shapley import ShapleyEstimate, ValueFunction

logger = logging.getLogger(__name__)


@dataclass
class MetricReport:
    name: str
    values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mean: float = float("nan")
    std: float = float("nan")

    @classmethod
    def of(cls, name: str, values) -> "MetricReport":
        v = np.asarray(values, dtype=DTYPE)
        return cls(name, v, float(np.mean(v)) if v.size else float("nan"), float(np.std(v)) if v.size else float("nan"))

    def summary(self) -> dict:
        return {"mean": self.mean, "std": self.std, "count": int(self.values.size)}


def auc_binary(scores, labels) -> float:
    """Mann-Whitney AUC with midranks for tied scores."""
    scores = np.asarray(scores, dtype=DTYPE).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(scores, method="average")
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_weighted_ovr(scores, labels) -> float:
    """One-vs-rest AUC per class, weighted by class support.

    ``scores`` is ``(rows, classes)``; a single score column (or a 1-d vector) is
    treated as the positive-class score of a binary task.
    """
    scores = np.asarray(scores, dtype=DTYPE)
    labels = np.asarray(labels).ravel()
    if scores.ndim == 1 or scores.shape[1] == 1:
        return auc_binary(scores.ravel(), labels)
    total, weight = 0.0, 0
    for c in range(scores.shape[1]):
        support = int(np.sum(labels == c))
        if support == 0:
            warnings.warn(f"class {c} absent from labels; skipped", stacklevel=2)
            continue
        if support == labels.size:
            raise ValueError("AUC needs at least two classes present")
        total += support * auc_binary(scores[:, c], labels == c)
        weight += support
    if weight == 0:
        raise ValueError("no class present in labels")
    return total / weight


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=DTYPE).ravel()
    b = np.asarray(b, dtype=DTYPE).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("need at least two values")
    return a, b


def cosine_similarity(a, b) -> float:
    a, b = _pair(a, b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def spearman(a, b) -> float:
    a, b = _pair(a, b)
    ra, rb = rankdata(a), rankdata(b)
    ra, rb = ra - ra.mean(), rb - rb.mean()
    den = np.sqrt((ra @ ra) * (rb @ rb))
    if den == 0:
        raise ValueError("Spearman correlation is undefined for constant input")
    return float(np.clip(ra @ rb / den, -1.0, 1.0))


def r_squared(truth, approx) -> float:
    truth, approx = _pair(truth, approx)
    ss_tot = np.sum((truth - truth.mean()) ** 2)
    if ss_tot == 0:
        raise ValueError("R^2 is undefined for constant truth")
    return float(1.0 - np.sum((truth - approx) ** 2) / ss_tot)


def accuracy(net, x, y) -> float:
    """Classification accuracy of the predictions (threshold 0.5 for one output)."""
    return float(np.mean(_decide(net.predict(x)) == np.asarray(y).ravel()))


def _decide(pred: np.ndarray) -> np.ndarray:
    return (pred[:, 0] > 0.5).astype(int) if pred.shape[1] == 1 else np.argmax(pred, axis=1)


def predicted_class(logits: np.ndarray) -> np.ndarray:
    """Column evaluated for each row: argmax for several outputs, column 0 otherwise."""
    if logits.shape[1] == 1:
        return np.zeros(len(logits), dtype=np.int64)
    return np.argmax(logits, axis=1)


@dataclass
class FidelityReport:
    cosine: MetricReport
    spearman: MetricReport
    r2: MetricReport
    dropped: int

    def summary(self) -> dict:
        return {
            "cosine": self.cosine.summary(),
            "spearman": self.spearman.summary(),
            "r2": self.r2.summary(),
            "dropped_nonconverged": self.dropped,
        }


def _safe(fn, a, b) -> float:
    try:
        return fn(a, b)
    except ValueError:
        return float("nan")


def explanation_fidelity(phi: np.ndarray, oracle: list[ShapleyEstimate], columns=None) -> FidelityReport:
    """Per-instance agreement between attributions and oracle estimates.

    ``phi`` is ``(rows, n, d)`` (or ``(rows, n)``); ``oracle[i].values`` holds the
    ground truth for the evaluated column of row i (``columns[i]``, default 0).
    Rows whose oracle did not converge are dropped and counted.
    """
    phi = np.asarray(phi, dtype=DTYPE)
    if phi.ndim == 2:
        phi = phi[:, :, None]
    if len(oracle) != len(phi):
        raise ValueError(f"{len(phi)} attribution rows but {len(oracle)} oracle estimates")
    columns = np.zeros(len(phi), dtype=np.int64) if columns is None else np.asarray(columns)
    cos, rho, r2 = [], [], []
    dropped = 0
    for i, est in enumerate(oracle):
        truth = np.asarray(est.values, dtype=DTYPE)
        if truth.ndim == 2:
            truth = truth[:, columns[i]]
        if truth.shape != (phi.shape[1],):
            raise ValueError(f"oracle row {i} has shape {truth.shape}, expected ({phi.shape[1]},)")
        if not est.converged:
            dropped += 1
            continue
        approx = phi[i, :, columns[i]]
        cos.append(_safe(cosine_similarity, truth, approx))
        rho.append(_safe(spearman, truth, approx))
        r2.append(_safe(r_squared, truth, approx))
    return FidelityReport(
        MetricReport.of("cosine", cos), MetricReport.of("spearman", rho), MetricReport.of("r2", r2), dropped
    )


@dataclass
class Curves:
    fractions: np.ndarray
    inclusion: np.ndarray
    exclusion: np.ndarray


def inclusion_exclusion_curve(net, x, y, fractions, vf: ValueFunction | None = None, phi=None) -> Curves:
    """Accuracy when keeping (inclusion) or masking (exclusion) the top-ranked features.

    Features are ranked per row by |phi| for the predicted class; the top
    ``round(f * n)`` are kept or masked. ``phi`` defaults to the network's own
    attributions, so any other explainer can be scored on the same fractions.
    """
    x = np.asarray(x, dtype=DTYPE)
    y = np.asarray(y).ravel()
    n = x.shape[1]
    vf = vf or ValueFunction.baseline_removal(n)
    fwd = net.forward(x)
    cls = predicted_class(fwd.logits)
    if phi is None:
        phi = fwd.phi
    phi = np.asarray(phi, dtype=DTYPE)
    if phi.ndim == 2:
        phi = phi[:, :, None]
    score = np.abs(phi[np.arange(len(x)), :, cls])
    order = np.argsort(-score, axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(n)[None, :].repeat(len(x), axis=0), axis=1)
    fractions = np.asarray(fractions, dtype=DTYPE)
    inc, exc = [], []
    for f in fractions:
        top = rank < int(round(f * n))
        inc.append(_masked_accuracy(net, x, y, top, vf))
        exc.append(_masked_accuracy(net, x, y, ~top, vf))
    return Curves(fractions, np.array(inc), np.array(exc))


def _masked_accuracy(net, x, y, keep, vf: ValueFunction) -> float:
    rows = vf.fill(x, keep)  # (rows, G, n)
    pred = net.predict(rows.reshape(-1, x.shape[1])).reshape(len(x), rows.shape[1], -1).mean(axis=1)
    return float(np.mean(_decide(pred) == y))


@dataclass
class Timing:
    instances: int
    amortized_total: float
    oracle_total: float

    @property
    def amortized_per_instance(self) -> float:
        return self.amortized_total / self.instances

    @property
    def oracle_per_instance(self) -> float:
        return self.oracle_total / self.instances

    @property
    def speedup(self) -> float:
        return self.oracle_total / self.amortized_total


def time_amortized(net, x, repeats: int = 5) -> float:
    """Median wall time of explaining every row with one forward pass each."""
    x = np.asarray(x, dtype=DTYPE)
    net.forward(x[0])  # warm-up
    runs = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for row in x:
            net.forward(row)
        runs.append(time.perf_counter() - t0)
    return float(np.median(runs))


def benchmark_timing(net, x, oracle_fn, oracle_rows: int | None = None, repeats: int = 5) -> Timing:
    """Wall-clock totals for amortized vs oracle explanations.

    ``oracle_fn(row)`` explains one row. When ``oracle_rows`` is given only that
    many rows are run through the oracle and the total is scaled to all rows.
    """
    x = np.asarray(x, dtype=DTYPE)
    if len(x) < 100:
        raise ValueError("benchmark needs at least 100 instances")
    amortized = time_amortized(net, x, repeats)
    rows = x if oracle_rows is None else x[:oracle_rows]
    oracle_fn(rows[0])  # warm-up
    t0 = time.perf_counter()
    for row in rows:
        oracle_fn(row)
    oracle_total = (time.perf_counter() - t0) * len(x) / len(rows)
    return Timing(len(x), amortized, oracle_total)


def ground_truth(net, x, vf: ValueFunction, *, columns=None, seed: int = 0, **oracle_kw) -> list[ShapleyEstimate]:
    """Unbiased KernelSHAP estimates of each row's game on the evaluated column.

    The game is the network's logit (pre-link) under ``vf``; the column defaults
    to the predicted class.
    """
    from .shapley import model_game, unbiased_kernelshap

    x = np.asarray(x, dtype=DTYPE)
    if columns is None:
        columns = predicted_class(net.logits(x))
    out = []
    for i, row in enumerate(x):
        game = model_game(net, row, vf, output=int(columns[i]))
        out.append(unbiased_kernelshap(game, x.shape[1], seed=seed + i, **oracle_kw))
    return out
