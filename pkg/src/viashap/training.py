"""Training: the joint prediction + Shapley objective, and an amortized explainer.

Every step stacks the clean rows, their masked copies and the baseline rows
into one batch, so a single forward and a single backward pass serve both loss
terms. The Shapley residuals live on the logit (pre-link) scale.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .core import DTYPE, AdamState, NonFiniteError, adam_step, make_rng, stable_link
from .network import NetworkSpec, ShapNetwork
from .shapley import KernelSampler, ValueFunction

logger = logging.getLogger(__name__)

TASKS = ("binary", "multiclass", "regression")
LOG_CLAMP = 1e-12

# Substream keys for make_rng.
_SHUFFLE, _MASKS, _VALID, _OVERSAMPLE, _BACKGROUND, _OUTPUTS = 0x5F, 0x7A11, 0x7A12, 0x05A, 0xB6, 0x0D7


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    beta: float = 10.0
    coalitions: int = 32
    value_fn: str = "baseline_removal"
    link: str = "auto"
    relaxed: bool = False
    efficiency: bool = True
    task: str = "binary"
    batch_size: int = 256
    max_epochs: int = 300
    patience: int = 10
    seed: int = 0
    oversample_minority: bool = True
    shapley_loss_outputs: str = "all"
    lr: float = 1e-3
    background_count: int = 128

    def __post_init__(self) -> None:
        if self.coalitions < 1:
            raise ValueError("coalitions (K) must be at least 1")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.value_fn not in ("baseline_removal", "marginal_expectation"):
            raise ValueError(f"unknown value function {self.value_fn!r}")
        if self.shapley_loss_outputs not in ("all", "true_class"):
            raise ValueError("shapley_loss_outputs must be 'all' or 'true_class'")
        if self.link not in ("auto", "identity", "sigmoid", "softmax"):
            raise ValueError(f"unknown link {self.link!r}")

    def resolved_link(self) -> str:
        if self.link != "auto":
            return self.link
        return {"binary": "sigmoid", "multiclass": "softmax", "regression": "identity"}[self.task]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown TrainConfig keys {sorted(unknown)}; valid keys: {sorted(names)}")
        return cls(**d)


def n_outputs_for(task: str, n_classes: int) -> int:
    return n_classes if task == "multiclass" else 1


@dataclass
class LossReport:
    prediction: float
    shapley: float
    total: float
    epoch: int


@dataclass
class EpochLog:
    epoch: int
    train: LossReport
    valid: LossReport

    COLUMNS = ("epoch", "train_prediction", "train_shapley", "train_total",
               "valid_prediction", "valid_shapley", "valid_total")

    def row(self) -> tuple:
        t, v = self.train, self.valid
        return (self.epoch, t.prediction, t.shapley, t.total, v.prediction, v.shapley, v.total)


def format_epoch_log(logs: list[EpochLog]) -> str:
    lines = ["\t".join(EpochLog.COLUMNS)]
    for log in logs:
        e, *vals = log.row()
        lines.append("\t".join([str(e)] + [repr(float(v)) for v in vals]))
    return "\n".join(lines) + "\n"


@dataclass
class TrainResult:
    net: ShapNetwork
    logs: list[EpochLog]
    best_epoch: int
    value_function: ValueFunction
    config: TrainConfig = field(default_factory=TrainConfig)


# -- loss terms ---------------------------------------------------------------


def _targets(target, task: str, d: int) -> np.ndarray:
    """Dense targets of shape ``(rows, d)``."""
    target = np.asarray(target)
    if task == "regression":
        return target.astype(DTYPE).reshape(len(target), -1)
    cls = target.astype(np.int64).reshape(-1)
    k = max(d, 2)
    if np.any(cls < 0) or np.any(cls >= k):
        raise ValueError(f"class index out of range [0, {k})")
    if task == "binary":
        return cls.astype(DTYPE)[:, None]
    return np.eye(d)[cls]


def prediction_objective(logits: np.ndarray, target, task: str, link: str) -> tuple[float, np.ndarray]:
    """Prediction loss and its gradient with respect to the logits.

    Sigmoid pairs with binary cross-entropy and softmax with cross-entropy, both
    with logs clamped at 1e-12. With the identity link the loss is the squared
    error against the numeric target (0/1 or one-hot for classification).
    """
    logits = np.asarray(logits, dtype=DTYPE)
    rows, d = logits.shape
    t = _targets(target, task, d)
    if link == "identity":
        diff = logits - t
        return float(np.mean(diff * diff)), 2.0 * diff / diff.size
    p = stable_link(logits, link)
    if link == "sigmoid":
        if task != "binary" or d != 1:
            raise ValueError("the sigmoid link needs a binary task with one output")
        pc = np.clip(p, LOG_CLAMP, 1.0 - LOG_CLAMP)
        loss = -np.mean(t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc))
        grad = np.where(pc == p, p - t, 0.0) / rows
        return float(loss), grad
    if link == "softmax":
        if task != "multiclass":
            raise ValueError("the softmax link needs a multiclass task")
        py = np.sum(p * t, axis=1)
        loss = -np.mean(np.log(np.maximum(py, LOG_CLAMP)))
        grad = np.where((py >= LOG_CLAMP)[:, None], p - t, 0.0) / rows
        return float(loss), grad
    raise ValueError(f"unknown link {link!r}")


def prediction_loss(prediction, target, task: str, link: str | None = None) -> float:
    """Loss on link-space predictions: BCE, CE, or MSE (regression / no link)."""
    prediction = np.atleast_2d(np.asarray(prediction, dtype=DTYPE))
    if prediction.shape[0] == 1 and np.ndim(target) == 0:
        target = np.array([target])
    link = link or {"binary": "sigmoid", "multiclass": "softmax", "regression": "identity"}[task]
    d = prediction.shape[1]
    t = _targets(target, task, d)
    if link == "identity":
        return float(np.mean((prediction - t) ** 2))
    p = np.clip(prediction, LOG_CLAMP, 1.0 - LOG_CLAMP)
    if link == "sigmoid":
        return float(-np.mean(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)))
    return float(-np.mean(np.log(np.maximum(np.sum(prediction * t, axis=1), LOG_CLAMP))))


def shapley_residuals(phi_x, logits_x, logits_masked, logits_base, masks, efficiency: bool):
    """Residuals ``V(x^S) - V(0) - 1_S^T phi~`` with shape ``(B, K, d)``.

    ``phi~`` is ``phi`` shifted per output so its column sums equal
    ``V(x) - V(0)`` when ``efficiency`` is on.
    """
    n = phi_x.shape[1]
    phi_t = phi_x
    if efficiency:
        gap = logits_x - logits_base - phi_x.sum(axis=1)
        phi_t = phi_x + gap[:, None, :] / n
    covered = np.einsum("bkn,bnd->bkd", masks.astype(DTYPE), phi_t)
    return logits_masked - logits_base - covered


@dataclass
class _Parts:
    prediction: float
    shapley: float


def _output_weights(y, task: str, d: int, mode: str, rows: int) -> np.ndarray:
    if mode == "all" or task != "multiclass":
        return np.ones((rows, d))
    return np.eye(d)[np.asarray(y, dtype=np.int64)]


def stack_batch(x: np.ndarray, masks: np.ndarray, vf: ValueFunction, fill: np.ndarray | None = None) -> np.ndarray:
    """Rows ``[x (B), masked copies (B*K), fill rows (G)]`` for one joint pass.

    ``fill`` optionally gives the replacement row for every (instance, mask)
    pair, shape ``(B, K, n)``; by default absent features take the value
    function's first fill row.
    """
    B, K, n = masks.shape
    if fill is None:
        fill = vf.fill_rows[0]
    masked = np.where(masks, x[:, None, :], fill).reshape(B * K, n)
    return np.concatenate([x, masked, vf.fill_rows], axis=0)


def joint_loss(raw: np.ndarray, y, masks: np.ndarray, cfg: TrainConfig, *, n_outputs: int, link: str,
               delta: float = 0.0, relaxed: bool = False, grad: bool = True):
    """Total loss from the raw output of a stacked batch.

    Returns ``(total, d_raw, d_delta, prediction_loss, shapley_loss)``. The
    baseline value ``V(0)`` is the mean logit over the trailing fill rows.
    """
    B, K, n = masks.shape
    d = n_outputs
    phi = raw.reshape(-1, n, d)
    G = phi.shape[0] - B - B * K
    logits = phi.sum(axis=1) + delta
    phi_x, lx = phi[:B], logits[:B]
    lm = logits[B : B + B * K].reshape(B, K, d)
    l0 = logits[B + B * K :].mean(axis=0)

    pred, d_lx = prediction_objective(lx, y, cfg.task, link)
    r = shapley_residuals(phi_x, lx, lm, l0, masks, cfg.efficiency)
    w = _output_weights(y, cfg.task, d, cfg.shapley_loss_outputs, B)[:, None, :]
    count = K * w.sum()
    shap = float(np.sum(w * r * r) / count)
    total = pred + cfg.beta * shap
    if not math.isfinite(total):
        raise NonFiniteError("non-finite loss")
    if not grad:
        return total, None, None, pred, shap

    dr = cfg.beta * 2.0 * w * r / count  # d total / d residual
    g = -np.einsum("bkd,bkn->bnd", dr, masks.astype(DTYPE))  # d total / d phi~
    gs = g.sum(axis=1)
    d_phi = np.zeros_like(phi)
    d_logits = np.zeros_like(logits)
    d_l0 = -dr.sum(axis=(0, 1))
    d_phi[:B] = g
    d_logits[:B] = d_lx
    if cfg.efficiency:
        d_phi[:B] -= gs[:, None, :] / n
        d_logits[:B] += gs / n
        d_l0 = d_l0 - gs.sum(axis=0) / n
    d_logits[B : B + B * K] = dr.reshape(B * K, d)
    d_logits[B + B * K :] = d_l0 / G
    # Every attribution enters its output's logit with weight one, as does delta.
    d_raw = (d_phi + d_logits[:, None, :]).reshape(raw.shape)
    d_delta = float(np.sum(d_logits)) if relaxed else None
    return total, d_raw, d_delta, pred, shap


def joint_objective(
    net: ShapNetwork,
    x: np.ndarray,
    y,
    masks: np.ndarray,
    vf: ValueFunction,
    cfg: TrainConfig,
    *,
    fill: np.ndarray | None = None,
    train: bool = True,
    backward: bool = True,
) -> _Parts:
    """Both loss terms for one batch (``masks`` is ``(B, K, n)``); accumulates gradients when ``backward``."""
    stacked = stack_batch(x, masks, vf, fill)
    raw = net.forward_raw(stacked, train=train, record=backward)
    _, d_raw, d_delta, pred, shap = joint_loss(
        raw, y, masks, cfg, n_outputs=net.n_outputs, link=net.spec.link,
        delta=net.delta[0], relaxed=net.spec.relaxed, grad=backward,
    )
    if backward:
        net.backward_raw(d_raw, d_delta)
    return _Parts(pred, shap)


def joint_loss_fn(net: ShapNetwork, y, masks: np.ndarray, cfg: TrainConfig, term: str = "total"):
    """Adapter for :func:`viashap.core.gradient_check` on a stacked batch.

    ``term`` selects the total loss, the prediction term alone or the
    beta-weighted Shapley term alone.
    """
    if term not in ("total", "prediction", "shapley"):
        raise ValueError(f"unknown loss term {term!r}")

    def run(raw, c):
        total, d_raw, d_delta, _, _ = joint_loss(
            raw, y, masks, c, n_outputs=net.n_outputs, link=net.spec.link,
            delta=net.delta[0], relaxed=net.spec.relaxed,
        )
        return total, d_raw, d_delta

    def loss(raw):
        if term == "total":
            return run(raw, cfg)
        pred = run(raw, replace(cfg, beta=0.0))
        if term == "prediction":
            return pred
        total = run(raw, cfg)
        d_delta = None if total[2] is None else total[2] - pred[2]
        return total[0] - pred[0], total[1] - pred[1], d_delta

    return loss


def shapley_loss(net: ShapNetwork, x: np.ndarray, masks: np.ndarray, vf: ValueFunction,
                 efficiency: bool = True) -> float:
    """Mean squared Shapley residual over masks and outputs for one instance.

    ``x`` is a single row of length n and ``masks`` a ``(K, n)`` boolean matrix.
    Evaluated with the network in eval mode.
    """
    x = np.asarray(x, dtype=DTYPE)
    masks = np.asarray(masks, dtype=bool)
    g = vf.group_size
    masked = vf.fill(x, masks).reshape(-1, x.shape[0])
    rows = np.concatenate([x[None, :], masked, vf.fill_rows], axis=0)
    phi = net.attributions(rows)
    logits = net.logits_from_phi(phi)
    lx = logits[:1]
    lm = logits[1 : 1 + len(masked)].reshape(len(masks), g, -1).mean(axis=1)[None]
    l0 = logits[1 + len(masked) :].mean(axis=0)
    r = shapley_residuals(phi[:1], lx, lm, l0, masks[None], efficiency)
    return float(np.mean(r * r))


# -- data helpers ---------------------------------------------------------------


def oversample_minority(x: np.ndarray, y: np.ndarray, task: str = "binary", seed: int = 0):
    """Duplicate minority-class rows (sampled with replacement) until classes balance."""
    if task != "binary":
        raise ValueError("oversampling is only applied to binary tasks")
    y = np.asarray(y)
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        raise ValueError("oversampling needs both classes present")
    if counts[0] == counts[1]:
        return x, y
    minority = classes[np.argmin(counts)]
    pool = np.flatnonzero(y == minority)
    extra = make_rng(seed, _OVERSAMPLE).choice(pool, size=counts.max() - counts.min(), replace=True)
    idx = np.concatenate([np.arange(len(y)), extra])
    return x[idx], y[idx]


def make_value_function(cfg: TrainConfig, n: int, background_source: np.ndarray | None) -> ValueFunction:
    if cfg.value_fn == "baseline_removal":
        return ValueFunction.baseline_removal(n)
    if background_source is None:
        raise ValueError("marginal expectations need background rows")
    return ValueFunction.marginal(background_source, cfg.background_count, seed=cfg.seed)


def _draw(n: int, rows: int, cfg: TrainConfig, vf: ValueFunction, rng: np.random.Generator):
    masks = KernelSampler(n, rng).sample(rows * cfg.coalitions).reshape(rows, cfg.coalitions, n)
    fill = None
    if vf.group_size > 1:
        # One background row per (instance, mask): an unbiased draw of the
        # marginal expectation that leaves the loss minimizer unchanged.
        fill = vf.fill_rows[rng.integers(0, vf.group_size, size=(rows, cfg.coalitions))]
    return masks, fill


def _check_split(x, y, name: str) -> None:
    if x is None or len(x) == 0:
        raise ValueError(f"{name} split is empty")
    if len(x) != len(y):
        raise ValueError(f"{name} split has {len(x)} rows but {len(y)} labels")


def _evaluate_split(net, x, y, vf, cfg, masks, fills) -> LossReport:
    pred = shap = 0.0
    for start in range(0, len(x), cfg.batch_size):
        sl = slice(start, start + cfg.batch_size)
        fill = None if fills is None else fills[sl]
        parts = joint_objective(net, x[sl], y[sl], masks[sl], vf, cfg, fill=fill, train=False, backward=False)
        pred += parts.prediction * len(x[sl])
        shap += parts.shapley * len(x[sl])
    pred, shap = pred / len(x), shap / len(x)
    return LossReport(pred, shap, pred + cfg.beta * shap, 0)


def train(
    x_train: np.ndarray,
    y_train,
    x_valid: np.ndarray,
    y_valid,
    spec: NetworkSpec,
    cfg: TrainConfig,
    vf: ValueFunction | None = None,
) -> TrainResult:
    """Fit a self-explaining network with early stopping on validation total loss.

    Returns the checkpoint with the best validation total loss.
    """
    _check_split(x_train, y_train, "training")
    _check_split(x_valid, y_valid, "validation")
    x_train = np.asarray(x_train, dtype=DTYPE)
    x_valid = np.asarray(x_valid, dtype=DTYPE)
    y_train, y_valid = np.asarray(y_train), np.asarray(y_valid)
    n = spec.n_features
    if spec.relaxed != cfg.relaxed:
        spec = NetworkSpec.from_dict({**spec.to_dict(), "relaxed": cfg.relaxed})
    if cfg.oversample_minority and cfg.task == "binary":
        x_train, y_train = oversample_minority(x_train, y_train, seed=cfg.seed)
    vf = vf or make_value_function(cfg, n, x_valid)

    net = ShapNetwork.build(spec, cfg.seed)
    params = list(net.parameters().values())
    grads = list(net.gradients().values())
    opt = AdamState.for_params(params, lr=cfg.lr)

    valid_masks, valid_fill = _draw(n, len(x_valid), cfg, vf, make_rng(cfg.seed, _VALID))
    logs: list[EpochLog] = []
    best, best_epoch, best_state, stale = math.inf, 0, net.state(), 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = make_rng(cfg.seed, _SHUFFLE, epoch).permutation(len(x_train))
        pred_sum = shap_sum = 0.0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            if len(idx) < 2:
                continue
            masks, fill = _draw(n, len(idx), cfg, vf, make_rng(cfg.seed, _MASKS, epoch, b))
            net.zero_grad()
            try:
                parts = joint_objective(net, x_train[idx], y_train[idx], masks, vf, cfg, fill=fill)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"training diverged at epoch {epoch}, batch {b}: {exc}") from exc
            adam_step(opt, params, grads)
            pred_sum += parts.prediction * len(idx)
            shap_sum += parts.shapley * len(idx)
        rows = len(order) - (len(order) % cfg.batch_size == 1)
        tr = LossReport(pred_sum / rows, shap_sum / rows, 0.0, epoch)
        tr.total = tr.prediction + cfg.beta * tr.shapley
        try:
            va = _evaluate_split(net, x_valid, y_valid, vf, cfg, valid_masks, valid_fill)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"validation diverged at epoch {epoch}: {exc}") from exc
        va.epoch = epoch
        logs.append(EpochLog(epoch, tr, va))
        _assert_local_accuracy(net, x_valid[: cfg.batch_size])
        logger.info("epoch %d train %.6g valid %.6g", epoch, tr.total, va.total)
        if va.total < best:
            best, best_epoch, best_state, stale = va.total, epoch, net.state(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    net.load_state(best_state)
    return TrainResult(net, logs, best_epoch, vf, cfg)


def _assert_local_accuracy(net: ShapNetwork, x: np.ndarray, tol: float = 1e-9) -> None:
    fwd = net.forward(x)
    gap = np.max(np.abs(fwd.logits - fwd.phi.sum(axis=1) - net.delta[0]))
    if gap > tol:
        raise AssertionError(f"local accuracy violated: max gap {gap:.3g}")


# -- amortized post-hoc explainer ---------------------------------------------


def default_explainer_spec(blackbox: ShapNetwork) -> NetworkSpec:
    return NetworkSpec(
        "mlp",
        blackbox.n_features,
        blackbox.n_outputs,
        hidden=(128, 128, 128),
        link="identity",
        batch_norm=False,
    )


def _fastshap_batch(explainer, x, masks, fill, game_masked, game_full, game_base, out_idx, efficiency, backward):
    B, K, n = masks.shape
    raw = explainer.forward_raw(x, train=backward, record=backward)
    phi = raw.reshape(B, n, -1)
    if efficiency:
        gap = (game_full - game_base) - phi.sum(axis=1)
        phi_t = phi + gap[:, None, :] / n
    else:
        phi_t = phi
    covered = np.einsum("bkn,bnd->bkd", masks.astype(DTYPE), phi_t)
    r_all = game_masked - game_base[:, None, :] - covered
    pick = np.eye(phi.shape[2])[out_idx]  # (B, K, d) one-hot output per pair
    r = np.sum(r_all * pick, axis=2)
    loss = float(np.mean(r * r))
    if not math.isfinite(loss):
        raise NonFiniteError("non-finite explainer loss")
    if backward:
        g = -np.einsum("bk,bkd,bkn->bnd", 2.0 * r / r.size, pick, masks.astype(DTYPE))
        if efficiency:
            g = g - g.sum(axis=1, keepdims=True) / n
        explainer.backward_raw(g.reshape(B, -1))
    return loss


def _blackbox_values(blackbox, x, masks, fill, vf):
    B, K, n = masks.shape
    if fill is None:
        fill = vf.fill_rows[0]
    masked = np.where(masks, x[:, None, :], fill).reshape(B * K, n)
    lm = blackbox.logits(masked).reshape(B, K, -1)
    lx = blackbox.logits(x)
    l0 = np.broadcast_to(blackbox.logits(vf.fill_rows).mean(axis=0), lx.shape)
    return lm, lx, l0


def train_fastshap(
    blackbox: ShapNetwork,
    x_train: np.ndarray,
    x_valid: np.ndarray,
    cfg: TrainConfig,
    explainer_spec: NetworkSpec | None = None,
    vf: ValueFunction | None = None,
) -> TrainResult:
    """Train a separate explainer network on the frozen model's masking game.

    The explainer's output for ``x`` is fitted so that ``1_S^T phi(x)`` matches
    ``V(x^S) - V(0)`` on kernel-sampled coalitions, with one output dimension
    drawn uniformly per (instance, coalition). Only the Shapley loss is reported.
    """
    _check_split(x_train, x_train, "training")
    _check_split(x_valid, x_valid, "validation")
    x_train = np.asarray(x_train, dtype=DTYPE)
    x_valid = np.asarray(x_valid, dtype=DTYPE)
    n, d = blackbox.n_features, blackbox.n_outputs
    spec = explainer_spec or default_explainer_spec(blackbox)
    vf = vf or make_value_function(cfg, n, x_valid)
    explainer = ShapNetwork.build(spec, cfg.seed + 1)
    params = list(explainer.parameters().values())
    grads = list(explainer.gradients().values())
    opt = AdamState.for_params(params, lr=cfg.lr)

    vrng = make_rng(cfg.seed, _VALID, 1)
    v_masks, v_fill = _draw(n, len(x_valid), cfg, vf, vrng)
    v_out = vrng.integers(0, d, size=v_masks.shape[:2])
    v_game = _blackbox_values(blackbox, x_valid, v_masks, v_fill, vf)

    logs: list[EpochLog] = []
    best, best_epoch, best_state, stale = math.inf, 0, explainer.state(), 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = make_rng(cfg.seed, _SHUFFLE, epoch).permutation(len(x_train))
        total, rows = 0.0, 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            if len(idx) < 2:
                continue
            rng = make_rng(cfg.seed, _MASKS, epoch, b)
            masks, fill = _draw(n, len(idx), cfg, vf, rng)
            out_idx = make_rng(cfg.seed, _OUTPUTS, epoch, b).integers(0, d, size=masks.shape[:2])
            lm, lx, l0 = _blackbox_values(blackbox, x_train[idx], masks, fill, vf)
            explainer.zero_grad()
            try:
                loss = _fastshap_batch(explainer, x_train[idx], masks, fill, lm, lx, l0, out_idx, cfg.efficiency, True)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"explainer diverged at epoch {epoch}, batch {b}: {exc}") from exc
            adam_step(opt, params, grads)
            total += loss * len(idx)
            rows += len(idx)
        vloss = 0.0
        for start in range(0, len(x_valid), cfg.batch_size):
            sl = slice(start, start + cfg.batch_size)
            game = tuple(a[sl] for a in v_game)
            vloss += len(x_valid[sl]) * _fastshap_batch(
                explainer, x_valid[sl], v_masks[sl], None, *game, v_out[sl], cfg.efficiency, False
            )
        vloss /= len(x_valid)
        logs.append(EpochLog(epoch, LossReport(0.0, total / rows, total / rows, epoch), LossReport(0.0, vloss, vloss, epoch)))
        if vloss < best:
            best, best_epoch, best_state, stale = vloss, epoch, explainer.state(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    explainer.load_state(best_state)
    return TrainResult(explainer, logs, best_epoch, vf, cfg)


def explain_amortized(explainer: ShapNetwork, blackbox: ShapNetwork, x: np.ndarray, vf: ValueFunction,
                      efficiency: bool = True) -> np.ndarray:
    """Explainer attributions ``(rows, n, d)``, efficiency-normalized against the model."""
    x = np.asarray(x, dtype=DTYPE)
    phi = explainer.attributions(x)
    if not efficiency:
        return phi
    target = blackbox.logits(x) - blackbox.logits(vf.fill_rows).mean(axis=0)
    return phi + (target - phi.sum(axis=1))[:, None, :] / x.shape[1]


def explain(net: ShapNetwork, x: np.ndarray, vf: ValueFunction, efficiency: bool = True) -> np.ndarray:
    """Attributions ``(rows, n, d)`` of a self-explaining network.

    With ``efficiency`` on these are the normalized values the Shapley loss was
    fitted to: each column sums to ``logit(x) - logit(baseline)``.
    """
    return explain_amortized(net, net, x, vf, efficiency)
