"""Deterministic toy-scale training of stacked LoRA layers on synthetic tasks."""

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from errors import ConfigError, DivergenceError, ShapeError
from formats import nf4_dequantize, nf4_quantize
from fq_autograd import LoraLinear, backward, forward

logger = logging.getLogger(__name__)

TASK_KINDS = ("lowrank_regression", "blob_classification")

SCHEMA_VERSION = 1

# Runs whose loss passes this value (or turns non-finite) are marked failed
DIVERGENCE_LOSS = 1e6

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

# Static loss scale keeps small gradients inside the 5-bit shared-exponent range
DEFAULT_LOSS_SCALE = 2.0 ** 12

A_INIT_STD = 0.02


@dataclass(frozen=True, eq=False)
class ToyTask:
    """
    A synthetic dataset plus the frozen NF4 base weights every trained model starts from.

    For lowrank_regression the targets come from W_base + B* A* per layer, where W_base is
    the dequantized NF4 weight, so the optimum is reachable exactly.
    """

    kind: str
    dims: tuple
    teacher_seed: int
    noise_std: float
    teacher_rank: int
    base_weights: tuple
    teacher_adapters: tuple
    x_train: np.ndarray
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray

    @property
    def depth(self):
        return self.dims[2]

    def describe(self):
        ic, oc, depth = self.dims
        return {
            "kind": self.kind,
            "dims": [ic, oc, depth],
            "teacher_seed": self.teacher_seed,
            "noise_std": self.noise_std,
            "teacher_rank": self.teacher_rank,
            "n_train": len(self.x_train),
            "n_eval": len(self.x_eval),
        }


@dataclass
class StepMetric:
    loss: float
    grad_norm: float


@dataclass
class AdamState:
    step: int
    m: list
    v: list


@dataclass
class TrainRun:
    """Trajectory and outcome of one training run."""

    config: object
    lr: float
    steps: int
    batch: int
    seed: int
    task: dict
    metrics: list = field(default_factory=list)
    initial_eval: float = None
    final_eval: float = None
    failed: bool = False
    failure_step: int = None
    failure_reason: str = None
    warmup_steps: int = 0
    weight_decay: float = 0.0
    loss_scale: float = DEFAULT_LOSS_SCALE
    wall_time_s: float = 0.0
    layers: list = field(default=None, repr=False)

    def to_dict(self, include_timing=True):
        data = {
            "schema_version": SCHEMA_VERSION,
            "config": self.config.to_dict(),
            "task": self.task,
            "hyperparameters": {
                "lr": self.lr,
                "steps": self.steps,
                "batch": self.batch,
                "seed": self.seed,
                "warmup_steps": self.warmup_steps,
                "weight_decay": self.weight_decay,
                "loss_scale": self.loss_scale,
            },
            "metrics": [{"step": i, "loss": m.loss, "grad_norm": m.grad_norm} for i, m in enumerate(self.metrics)],
            "initial_eval": self.initial_eval,
            "final_eval": self.final_eval,
            "failed": self.failed,
            "failure_step": self.failure_step,
            "failure_reason": self.failure_reason,
        }
        if include_timing:
            data["wall_time_s"] = self.wall_time_s
        return data


def make_task(kind, dims, seed, noise_std=0.0, teacher_rank=2, n_train=512, n_eval=256):
    """
    Generate a deterministic synthetic task.

    Args:
        kind: "lowrank_regression" or "blob_classification"
        dims: (ic, oc, depth); for classification oc is the number of classes
        seed: Task seed; the same seed always yields the same data
        noise_std: Label noise (regression) or extra cluster spread (classification)
        teacher_rank: Rank r* of the teacher adapters (regression)
        n_train: Training examples
        n_eval: Held-out examples

    Returns:
        ToyTask

    Raises:
        ConfigError: On unknown kind or non-positive dims
    """
    if kind not in TASK_KINDS:
        raise ConfigError(f"task kind must be one of {TASK_KINDS}, got '{kind}'")
    ic, oc, depth = (int(d) for d in dims)
    if ic < 1 or oc < 1 or depth < 1:
        raise ConfigError(f"dims must be positive, got {dims}")
    if noise_std < 0:
        raise ConfigError("noise_std cannot be negative")
    if kind == "lowrank_regression" and not 1 <= teacher_rank <= min(ic, oc):
        raise ConfigError(f"teacher_rank must be in [1, {min(ic, oc)}], got {teacher_rank}")

    rng = np.random.default_rng(seed)
    shapes = [(oc, ic if layer == 0 else oc) for layer in range(depth)]
    base_weights = tuple(
        nf4_quantize(rng.normal(0.0, 1.0 / math.sqrt(shape[1]), size=shape)) for shape in shapes
    )
    n_total = n_train + n_eval

    if kind == "lowrank_regression":
        adapters = tuple(
            (
                rng.normal(0.0, 0.5 / math.sqrt(teacher_rank), size=(shape[0], teacher_rank)),
                rng.normal(0.0, 1.0 / math.sqrt(shape[1]), size=(teacher_rank, shape[1])),
            )
            for shape in shapes
        )
        x = rng.normal(size=(n_total, ic))
        h = x
        for w_nf4, (b_star, a_star) in zip(base_weights, adapters):
            h = h @ nf4_dequantize(w_nf4).T + (h @ a_star.T) @ b_star.T
        y = h + noise_std * rng.normal(size=h.shape) if noise_std > 0 else h
    else:
        adapters = ()
        centers = rng.normal(0.0, 1.0, size=(oc, ic))
        y = rng.integers(0, oc, size=n_total)
        x = centers[y] + (0.5 + noise_std) * rng.normal(size=(n_total, ic))

    logger.debug("made %s task dims=%s seed=%d", kind, dims, seed)
    return ToyTask(kind, (ic, oc, depth), seed, float(noise_std), int(teacher_rank), base_weights,
                   adapters, x[:n_train], y[:n_train], x[n_train:], y[n_train:])


def build_model(task, cfg, rng, a_std=A_INIT_STD, scale=1.0):
    """Fresh LoRA stack over the task's frozen weights: A Gaussian, B zero."""
    layers = []
    for index, w_frozen in enumerate(task.base_weights):
        oc, ic = w_frozen.shape
        a = rng.normal(0.0, a_std, size=(cfg.rank, ic))
        layers.append(LoraLinear(w_frozen, a, np.zeros((oc, cfg.rank)), scale, name=f"layer{index}"))
    return layers


def _forward_stack(layers, x, cfg, kind):
    masks = []
    h = x
    for index, layer in enumerate(layers):
        h = forward(h, layer, cfg)
        if kind == "blob_classification" and index < len(layers) - 1:
            mask = h > 0.0
            masks.append(mask)
            h = h * mask
    return h, masks


def _backward_stack(layers, d_out, cfg, kind, masks):
    bundles = [None] * len(layers)
    upstream = d_out
    for index in reversed(range(len(layers))):
        bundles[index] = backward(upstream, layers[index], cfg)
        upstream = bundles[index].d_x
        if kind == "blob_classification" and index > 0:
            upstream = upstream * masks[index - 1]
    return bundles


def loss_and_grad(outputs, targets, kind):
    """
    Full-precision loss and its gradient with respect to the outputs.

    Mean-squared error for regression, softmax cross-entropy for classification.
    """
    if kind == "lowrank_regression":
        diff = outputs - targets
        return float(np.mean(diff ** 2)), 2.0 * diff / diff.size
    shifted = outputs - outputs.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(len(targets))
    loss = float(-log_probs[rows, targets].mean())
    d_out = np.exp(log_probs)
    d_out[rows, targets] -= 1.0
    return loss, d_out / len(targets)


def evaluate(task, layers, cfg):
    """Loss of the model on the held-out split, through the configured quantized forward."""
    outputs, _ = _forward_stack(layers, task.x_eval, cfg, task.kind)
    loss, _ = loss_and_grad(outputs, task.y_eval, task.kind)
    return loss


def optimizer_step(params, grads, state, lr, weight_decay=0.0, betas=ADAM_BETAS, eps=ADAM_EPS):
    """
    One full-precision AdamW update (decoupled weight decay).

    Args:
        params: List of parameter arrays
        grads: List of gradient arrays, same shapes
        state: AdamState, or None to start from zero moments
        lr: Learning rate
        weight_decay: Decoupled weight decay coefficient

    Returns:
        Tuple of (new parameter list, new AdamState); inputs are not modified

    Raises:
        ShapeError: If a gradient's shape differs from its parameter's
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if np.shape(p) != np.shape(g):
            raise ShapeError(f"gradient shape {np.shape(g)} does not match parameter {np.shape(p)}")
    if state is None:
        state = AdamState(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])
    beta1, beta2 = betas
    step = state.step + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** step)
        v_hat = v / (1.0 - beta2 ** step)
        p = p * (1.0 - lr * weight_decay)
        p = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_params.append(p)
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(step, new_m, new_v)


def _check_loss(step, loss):
    if not math.isfinite(loss) or loss > DIVERGENCE_LOSS:
        raise DivergenceError(step, loss)


def train(task, cfg, lr, steps, seed, batch=32, weight_decay=0.0, warmup_steps=0,
          loss_scale=DEFAULT_LOSS_SCALE):
    """
    Train the adapters of a fresh LoRA stack with AdamW; the NF4 base stays frozen.

    Args:
        task: ToyTask
        cfg: QuantConfig
        lr: Peak learning rate (> 0)
        steps: Optimizer steps
        seed: Seeds adapter init and minibatch order
        batch: Minibatch size
        weight_decay: AdamW decoupled weight decay
        warmup_steps: Linear warm-up length (0 = constant schedule)
        loss_scale: Power-of-two factor applied to the loss gradient before backward

    Returns:
        TrainRun; a diverging run comes back with failed=True and the failing step
    """
    if lr <= 0:
        raise ConfigError("lr must be positive")
    if steps < 0 or batch < 1:
        raise ConfigError("steps must be >= 0 and batch >= 1")
    started = time.perf_counter()
    rng = np.random.default_rng(seed)
    layers = build_model(task, cfg, rng)
    if task.kind == "lowrank_regression" and cfg.rank < task.teacher_rank:
        logger.info("rank %d is below the target rank %d; exact recovery is impossible",
                    cfg.rank, task.teacher_rank)
    run = TrainRun(cfg, lr, steps, batch, seed, task.describe(), warmup_steps=warmup_steps,
                   weight_decay=weight_decay, loss_scale=loss_scale, layers=layers)
    run.initial_eval = evaluate(task, layers, cfg)
    n_train = len(task.x_train)
    state = None

    try:
        for step in range(steps):
            idx = rng.choice(n_train, size=min(batch, n_train), replace=False)
            outputs, masks = _forward_stack(layers, task.x_train[idx], cfg, task.kind)
            loss, d_out = loss_and_grad(outputs, task.y_train[idx], task.kind)
            _check_loss(step, loss)

            bundles = _backward_stack(layers, d_out * loss_scale, cfg, task.kind, masks)
            grads = []
            for bundle in bundles:
                grads.extend([bundle.d_a / loss_scale, bundle.d_b / loss_scale])
            grad_norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if not math.isfinite(grad_norm):
                raise DivergenceError(step, loss)

            step_lr = lr * min(1.0, (step + 1) / warmup_steps) if warmup_steps else lr
            params = [p for layer in layers for p in (layer.a, layer.b)]
            params, state = optimizer_step(params, grads, state, step_lr, weight_decay)
            for index, layer in enumerate(layers):
                layer.a, layer.b = params[2 * index], params[2 * index + 1]
            run.metrics.append(StepMetric(loss, grad_norm))
            if step % 100 == 0:
                logger.debug("step %d loss %.6g grad_norm %.6g", step, loss, grad_norm)
        run.final_eval = evaluate(task, layers, cfg)
        _check_loss(steps, run.final_eval)
    except DivergenceError as exc:
        logger.error("run %s seed=%d failed: %s", cfg.notation, seed, exc)
        run.failed = True
        run.failure_step = exc.step
        run.failure_reason = str(exc)
        run.final_eval = None

    run.wall_time_s = time.perf_counter() - started
    logger.info("run %s r=%d seed=%d: eval %.6g -> %s", cfg.notation, cfg.rank, seed,
                run.initial_eval, run.final_eval)
    return run
