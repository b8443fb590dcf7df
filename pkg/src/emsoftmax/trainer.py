"""Plain SGD trainer for the feature network plus classifier bank.

The update rule is the classic momentum form with decoupled-from-nothing
L2 regularization folded into the gradient:

    v <- momentum * v - lr * (grad + weight_decay * param)
    param <- param + v

Biases are exempt from weight decay. The learning rate starts at
``base_lr`` and is multiplied by ``lr_drop_factor`` at each iteration
listed in ``lr_drop_iters``.

:func:`grad_check` compares every analytic gradient block against
central finite differences of the scalar loss and is the backbone of the
correctness tests; it always runs the exact diversity backward since the
detached training rule is deliberately not the derivative of the
penalty.
"""

from __future__ import annotations

import time
from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, minibatch_stream
from .losses import LossConfig, em_softmax_backward, em_softmax_forward
from .model import MlpFeatureExtractor, WeakClassifierBank
from .tensor import Rng

__all__ = [
    "SgdConfig",
    "DivergenceError",
    "learning_rate",
    "sgd_step",
    "TrainReport",
    "train",
    "evaluate",
    "grad_check",
]

_LOSS_CEILING = 1e6


@dataclass(frozen=True)
class SgdConfig:
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_drop_iters: tuple[int, ...] = (8000, 14000)
    lr_drop_factor: float = 0.1
    max_iters: int = 20000
    batch_size: int = 256

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        drops = tuple(int(i) for i in self.lr_drop_iters)
        if list(drops) != sorted(set(drops)):
            raise ValueError("lr_drop_iters must be strictly increasing")
        if any(i < 0 for i in drops):
            raise ValueError("lr_drop_iters must be non-negative")
        object.__setattr__(self, "lr_drop_iters", drops)
        if self.lr_drop_factor <= 0:
            raise ValueError("lr_drop_factor must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


class DivergenceError(Exception):
    """Training hit non-finite numbers or a runaway loss."""


def learning_rate(cfg: SgdConfig, iteration: int) -> float:
    """lr at a 0-based iteration: base_lr * factor^(#drops <= iteration)."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    drops = bisect_right(cfg.lr_drop_iters, iteration)
    return cfg.base_lr * cfg.lr_drop_factor**drops


def sgd_step(params, grads, velocities, decay_flags, lr: float, cfg: SgdConfig) -> None:
    """One in-place momentum update over parallel parameter lists.

    decay_flags marks which entries receive weight decay (weights yes,
    biases no). Raises DivergenceError on any non-finite gradient so the
    caller can stop before NaNs poison the model.
    """
    if not (len(params) == len(grads) == len(velocities) == len(decay_flags)):
        raise ValueError("parameter, gradient, velocity, flag lists must align")
    for p, g, vel, decayed in zip(params, grads, velocities, decay_flags):
        if p.shape != g.shape or p.shape != vel.shape:
            raise ValueError(f"shape mismatch: {p.shape} vs {g.shape} vs {vel.shape}")
        if not np.isfinite(g).all():
            raise DivergenceError("non-finite gradient")
        step = g + cfg.weight_decay * p if decayed else g
        vel *= cfg.momentum
        vel -= lr * step
        p += vel


@dataclass
class TrainReport:
    """Everything a run produced, in memory.

    rows are the periodic log records (iteration, lr, total loss,
    classification term, diversity term, train-batch accuracy, eval
    accuracy, elapsed seconds); eval accuracy is NaN on rows where no
    evaluation ran.
    """

    rows: list[tuple] = field(default_factory=list)
    final_eval_accuracy: float = float("nan")
    diverged: bool = False
    wall_seconds: float = 0.0

    CSV_HEADER = "iter,lr,total_loss,cls_term,div_term,train_acc,eval_acc,seconds"

    def to_csv(self, include_timing: bool = False) -> str:
        """Render the log rows as CSV.

        Timing defaults to a zero column so reruns of a deterministic
        configuration produce byte-identical files; pass
        ``include_timing=True`` to record real wall-clock numbers.
        """
        lines = [self.CSV_HEADER]
        for it, lr, total, cls, div, tacc, eacc, secs in self.rows:
            eval_field = "" if np.isnan(eacc) else f"{eacc:.6f}"
            secs_field = f"{secs:.3f}" if include_timing else "0.000"
            lines.append(
                f"{it},{lr:.10g},{total:.10g},{cls:.10g},{div:.10g},"
                f"{tacc:.6f},{eval_field},{secs_field}"
            )
        return "\n".join(lines) + "\n"


def _features_and_cache(net: MlpFeatureExtractor | None, x: np.ndarray):
    if net is None:
        return x, None
    return net.forward(x)


def evaluate(
    net: MlpFeatureExtractor | None,
    bank: WeakClassifierBank,
    dataset: Dataset,
    chunk: int = 4096,
) -> float:
    """Top-1 accuracy of the averaged classifier, streamed in chunks."""
    clf = bank.assemble()
    hits = 0
    # tolerate a diverged model's huge weights: its accuracy is still a
    # well-defined (terrible) number
    with np.errstate(over="ignore", invalid="ignore"):
        for start in range(0, len(dataset), chunk):
            x = dataset.features[start : start + chunk]
            feats, _ = _features_and_cache(net, x)
            pred = clf.predict(feats)
            hits += int(np.sum(pred == dataset.labels[start : start + chunk]))
    return hits / len(dataset)


def train(
    net: MlpFeatureExtractor | None,
    bank: WeakClassifierBank,
    dataset: Dataset,
    loss_cfg: LossConfig,
    sgd_cfg: SgdConfig,
    seed: int,
    eval_dataset: Dataset | None = None,
    log_every: int = 100,
    eval_every: int = 1000,
) -> TrainReport:
    """Run the SGD loop, mutating ``net`` and ``bank`` in place.

    ``net`` may be None to train the bank directly on raw features. The
    batch order is fully determined by ``seed``. On divergence (loss
    above 1e6 or non-finite values) the loop halts, keeps the last state,
    and flags the report instead of raising.
    """
    if bank.num_heads != loss_cfg.num_heads:
        raise ValueError(
            f"bank has {bank.num_heads} heads, loss config says {loss_cfg.num_heads}"
        )
    if net is not None and net.feature_dim != bank.feature_dim:
        raise ValueError(
            f"network emits {net.feature_dim}-dim features, bank expects "
            f"{bank.feature_dim}"
        )
    if (net.input_dim if net is not None else bank.feature_dim) != dataset.dim:
        raise ValueError("dataset dimensionality does not match the model")

    report = TrainReport()
    batch_rng = Rng(seed).spawn(7)
    batches = minibatch_stream(len(dataset), min(sgd_cfg.batch_size, len(dataset)), batch_rng)

    net_params = [] if net is None else list(net.weights) + list(net.biases)
    net_decay = [] if net is None else [True] * len(net.weights) + [False] * len(net.biases)
    params = net_params + list(bank.heads)
    decay_flags = net_decay + [True] * bank.num_heads
    velocities = [np.zeros_like(p) for p in params]

    t0 = time.perf_counter()
    # Divergence shows up as overflow/NaN in the forward pass before the
    # guard below can trip; the guard is the reporter, so keep numpy
    # quiet inside the loop.
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for it in range(sgd_cfg.max_iters):
            idx = next(batches)
            x = dataset.features[idx]
            y = dataset.labels[idx]

            feats, cache = _features_and_cache(net, x)
            fwd = em_softmax_forward(feats, bank.heads, y, loss_cfg)
            if not np.isfinite(fwd.total_loss) or fwd.total_loss > _LOSS_CEILING:
                report.diverged = True
                break
            grads_bank, grads_feats = em_softmax_backward(feats, bank.heads, y, loss_cfg, fwd)

            if net is None:
                grads = grads_bank
            else:
                layer_grads, _ = net.backward(cache, grads_feats)
                grads = (
                    [gw for gw, _ in layer_grads]
                    + [gb for _, gb in layer_grads]
                    + grads_bank
                )

            lr = learning_rate(sgd_cfg, it)
            try:
                sgd_step(params, grads, velocities, decay_flags, lr, sgd_cfg)
            except DivergenceError:
                report.diverged = True
                break

            last = it == sgd_cfg.max_iters - 1
            if (it + 1) % log_every == 0 or last:
                scores = sum(feats @ w for w in bank.heads)
                train_acc = float(np.mean(np.argmax(scores, axis=1) == y))
                eval_acc = float("nan")
                if eval_dataset is not None and ((it + 1) % eval_every == 0 or last):
                    eval_acc = evaluate(net, bank, eval_dataset)
                report.rows.append(
                    (
                        it + 1,
                        lr,
                        fwd.total_loss,
                        fwd.classification_term,
                        fwd.diversity_term,
                        train_acc,
                        eval_acc,
                        time.perf_counter() - t0,
                    )
                )

    report.wall_seconds = time.perf_counter() - t0
    if eval_dataset is not None and not report.diverged:
        report.final_eval_accuracy = evaluate(net, bank, eval_dataset)
    return report


def _loss_scalar(net, bank_heads, x, y, loss_cfg) -> float:
    feats, _ = _features_and_cache(net, x)
    return em_softmax_forward(feats, bank_heads, y, loss_cfg).total_loss


def grad_check(
    net: MlpFeatureExtractor | None,
    bank: WeakClassifierBank,
    x_batch: np.ndarray,
    labels,
    loss_cfg: LossConfig,
    step: float = 1e-6,
    tolerance: float = 1e-5,
    corrupt_block: str | None = None,
) -> dict:
    """Compare analytic gradients against central finite differences.

    Every parameter block (network weights/biases and each head) is
    perturbed entry by entry; the relative error of a block is
    ``max |analytic - numeric| / max(|analytic|, |numeric|, 1e-3)``.
    The denominator floor makes the comparison absolute (at 1e-8) for
    near-zero entries: central differences of a float64 loss carry
    ~1e-9 of rounding noise at step 1e-6, so ratios against smaller
    magnitudes would measure the oracle, not the gradient. The exact
    diversity backward is always used here because the detached
    training rule is not the derivative of the loss.

    ``corrupt_block`` deliberately perturbs one analytic block (e.g.
    ``"head0"`` or ``"w1"``) before comparison — the self-test that the
    checker can actually fail.

    Returns a dict with per-block errors, the overall max, a ``passed``
    flag, and the largest diversity-gradient magnitude per head (exactly
    zero for a single-head bank).
    """
    check_cfg = LossConfig(
        margin=loss_cfg.margin,
        diversity_weight=loss_cfg.diversity_weight,
        num_heads=loss_cfg.num_heads,
        exact_diversity_grad=True,
    )
    x = np.asarray(x_batch, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)

    feats, cache = _features_and_cache(net, x)
    fwd = em_softmax_forward(feats, bank.heads, y, check_cfg)
    grads_bank, grads_feats = em_softmax_backward(feats, bank.heads, y, check_cfg, fwd)

    blocks: list[tuple[str, np.ndarray, np.ndarray]] = []
    if net is not None:
        layer_grads, _ = net.backward(cache, grads_feats)
        for i, (gw, gb) in enumerate(layer_grads):
            blocks.append((f"w{i}", net.weights[i], gw))
            blocks.append((f"b{i}", net.biases[i], gb))
    for v, w in enumerate(bank.heads):
        blocks.append((f"head{v}", w, grads_bank[v]))

    if corrupt_block is not None:
        names = [name for name, _, _ in blocks]
        if corrupt_block not in names:
            raise ValueError(f"unknown block {corrupt_block!r}, have {names}")
        blocks = [
            (name, p, g + 1e-2 if name == corrupt_block else g)
            for name, p, g in blocks
        ]

    errors: dict[str, float] = {}
    for name, param, analytic in blocks:
        worst = 0.0
        flat = param.ravel()
        a_flat = analytic.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = _loss_scalar(net, bank.heads, x, y, check_cfg)
            flat[j] = orig - step
            down = _loss_scalar(net, bank.heads, x, y, check_cfg)
            flat[j] = orig
            numeric = (up - down) / (2 * step)
            denom = max(abs(a_flat[j]), abs(numeric), 1e-3)
            worst = max(worst, abs(a_flat[j] - numeric) / denom)
        errors[name] = worst

    div_mags = []
    if bank.num_heads == 1 or check_cfg.diversity_weight == 0.0:
        div_mags = [0.0] * bank.num_heads
    else:
        from .losses import _diversity_grad

        for v in range(bank.num_heads):
            g = check_cfg.diversity_weight * _diversity_grad(bank.heads, v, exact=True)
            div_mags.append(float(np.max(np.abs(g))))

    max_error = max(errors.values()) if errors else 0.0
    return {
        "block_errors": errors,
        "max_error": max_error,
        "passed": max_error <= tolerance,
        "diversity_grad_max": div_mags,
    }
