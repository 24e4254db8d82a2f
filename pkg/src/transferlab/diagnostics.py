"""Gradient-path analysis and cost accounting.

Three instruments:

* :func:`gradient_chain_decomposition` factors the input gradient along the
  network's block-boundary chain. For each stage it estimates the operator
  norm of the stage Jacobian at the probe input (matrix-free power
  iteration on J^T J) and its Frobenius norm (Hutchinson probes). Products
  of early-stage norms versus late-stage norms quantify how much of the
  gradient's magnitude budget sits in shared low-level features versus
  model-specific late features. By submultiplicativity the product of all
  factors (times the loss-gradient norm) upper-bounds the input-gradient
  norm.

* :func:`finite_difference_check` is the independent oracle for input
  gradients: central differences over a seeded pixel subsample, evaluated
  in float64, compared against reverse-mode autodiff. It only uses forward
  evaluations, so it exercises none of the differentiation machinery it
  verifies.

* :func:`profile_cost` measures wall time of forward and forward+backward
  passes (monotonic clock, warm-up excluded, mean and spread over
  repetitions) under a process-wide lock so concurrent jobs cannot skew
  the numbers.
"""

from __future__ import annotations

import copy
import platform
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .data import ImageBatch, LabelBatch
from .errors import NumericsError
from .models import (
    HeadSelector,
    MultiHeadNetwork,
    model_stats,
    selector_log_probs,
)
from .models.stats import ModelStats
from .training import multi_head_loss

_PROFILE_LOCK = threading.Lock()


# ---------------------------------------------------------------------------
# gradient chain decomposition
# ---------------------------------------------------------------------------

def _as_list(state) -> list[torch.Tensor]:
    return list(state) if isinstance(state, (tuple, list)) else [state]


def _wrap_stage(fn: Callable, n_inputs: int) -> Callable:
    """Adapt a stage taking one (possibly tuple) state to positional-tensor
    calling convention required by torch.autograd.functional."""
    if n_inputs == 1:
        def wrapped(t):
            out = fn(t)
            return tuple(_as_list(out))
    else:
        def wrapped(*tensors):
            out = fn(tuple(tensors))
            return tuple(_as_list(out))
    return wrapped


def _flat_norm(tensors: Sequence[torch.Tensor]) -> float:
    return float(torch.sqrt(sum(t.detach().double().pow(2).sum() for t in tensors)))


def _randn_like(tensors: Sequence[torch.Tensor], generator: torch.Generator) -> tuple:
    return tuple(
        torch.randn(t.shape, generator=generator, dtype=t.dtype, device=t.device)
        for t in tensors
    )


def _scale(tensors: Sequence[torch.Tensor], factor: float) -> tuple:
    return tuple(t * factor for t in tensors)


def _stage_jvp(fn, primals: tuple, tangents: tuple) -> tuple:
    wrapped = _wrap_stage(fn, len(primals))
    inputs = primals[0] if len(primals) == 1 else primals
    v = tangents[0] if len(tangents) == 1 else tangents
    _, jv = torch.autograd.functional.jvp(wrapped, inputs, v=v, strict=False)
    return tuple(_as_list(jv))


def _stage_vjp(fn, primals: tuple, cotangents: tuple) -> tuple:
    wrapped = _wrap_stage(fn, len(primals))
    inputs = primals[0] if len(primals) == 1 else primals
    v = cotangents[0] if len(cotangents) == 1 else cotangents
    _, jtv = torch.autograd.functional.vjp(wrapped, inputs, v=v, strict=False)
    return tuple(_as_list(jtv))


def stage_operator_norm(
    fn: Callable,
    primals: tuple,
    n_iterations: int = 20,
    generator: Optional[torch.Generator] = None,
) -> float:
    """Largest singular value of the stage Jacobian at ``primals`` via
    power iteration on J^T J (one JVP + one VJP per iteration)."""
    generator = generator or torch.Generator().manual_seed(0)
    v = _randn_like(primals, generator)
    norm = _flat_norm(v)
    v = _scale(v, 1.0 / max(norm, 1e-30))
    sigma = 0.0
    for _ in range(n_iterations):
        jv = _stage_jvp(fn, primals, v)
        sigma = _flat_norm(jv)
        if sigma == 0.0:
            return 0.0
        w = _stage_vjp(fn, primals, jv)
        wnorm = _flat_norm(w)
        if wnorm == 0.0:
            return 0.0
        v = _scale(w, 1.0 / wnorm)
    return sigma


def stage_frobenius_norm(
    fn: Callable,
    primals: tuple,
    n_probes: int = 8,
    generator: Optional[torch.Generator] = None,
) -> float:
    """Hutchinson estimate: E||J v||^2 = ||J||_F^2 for v ~ N(0, I)."""
    generator = generator or torch.Generator().manual_seed(0)
    acc = 0.0
    for _ in range(n_probes):
        v = _randn_like(primals, generator)
        jv = _stage_jvp(fn, primals, v)
        acc += _flat_norm(jv) ** 2
    return float(np.sqrt(acc / n_probes))


@dataclass(frozen=True)
class GradientChainDecomposition:
    """Per-stage Jacobian factor norms along the stem-to-head chain."""

    stage_names: tuple
    operator_norms: tuple
    frobenius_norms: tuple
    loss_grad_norm: float
    input_grad_norm: float
    boundary: int
    low_product: float      # product of operator norms up to the boundary
    high_product: float     # remaining operator norms times the loss factor
    selector: str

    @property
    def product_bound(self) -> float:
        return self.low_product * self.high_product

    def to_dict(self) -> dict:
        return {
            "record_kind": "gradient_chain",
            "stage_names": list(self.stage_names),
            "operator_norms": list(self.operator_norms),
            "frobenius_norms": list(self.frobenius_norms),
            "loss_grad_norm": self.loss_grad_norm,
            "input_grad_norm": self.input_grad_norm,
            "boundary": self.boundary,
            "low_product": self.low_product,
            "high_product": self.high_product,
            "selector": self.selector,
        }


def gradient_chain_decomposition(
    model: MultiHeadNetwork,
    selector: HeadSelector,
    batch,
    labels,
    boundary: int,
    n_power_iterations: int = 20,
    n_frobenius_probes: int = 8,
    seed: int = 0,
) -> GradientChainDecomposition:
    """Factor-norm decomposition of the input gradient at ``batch``.

    Stages come from ``model.stages(selector)`` (block granularity). The
    boundary index splits the chain into the low-level product (stages
    1..boundary) and high-level product (the rest, including the loss
    gradient factor). For multi-track models the chain only carries the
    tracks the selector can see, so the decomposition respects head
    causality by construction.
    """
    from .attacks import input_gradient  # local import avoids a cycle

    x = torch.from_numpy(batch.data) if isinstance(batch, ImageBatch) else batch
    y = labels.labels if isinstance(labels, LabelBatch) else labels
    y = torch.from_numpy(y) if isinstance(y, np.ndarray) else y

    stages = model.stages(selector)
    if not (0 <= boundary <= len(stages)):
        raise ValueError(f"boundary must be in [0, {len(stages)}], got {boundary}")

    was_training = model.training
    model.eval()
    try:
        # forward once, recording each stage's input state
        inputs: list[tuple] = []
        state = x
        for name, fn in stages:
            inputs.append(tuple(t.detach() for t in _as_list(state)))
            with torch.no_grad():
                state = fn(state)
            for t in _as_list(state):
                if not torch.isfinite(t).all():
                    raise NumericsError(f"non-finite activations after stage {name!r}")

        generator = torch.Generator().manual_seed(seed)
        op_norms = []
        frob_norms = []
        for (name, fn), primals in zip(stages, inputs):
            op_norms.append(stage_operator_norm(
                fn, primals, n_iterations=n_power_iterations, generator=generator
            ))
            frob_norms.append(stage_frobenius_norm(
                fn, primals, n_probes=n_frobenius_probes, generator=generator
            ))

        # gradient of the mean loss w.r.t. the final stage output
        final_out = _as_list(state)[0].detach().requires_grad_(True)
        if selector.kind == "head":
            loss = torch.nn.functional.cross_entropy(final_out, y)
        else:
            loss = torch.nn.functional.nll_loss(final_out, y)
        loss_grad = torch.autograd.grad(loss, final_out)[0]
        loss_grad_norm = _flat_norm([loss_grad])

        grad_x = input_gradient(model, selector, x, y)
        input_grad_norm = _flat_norm([grad_x])
    finally:
        model.train(was_training)

    low = float(np.prod(op_norms[:boundary])) if boundary else 1.0
    high = float(np.prod(op_norms[boundary:])) * loss_grad_norm
    return GradientChainDecomposition(
        stage_names=tuple(name for name, _ in stages),
        operator_norms=tuple(op_norms),
        frobenius_norms=tuple(frob_norms),
        loss_grad_norm=loss_grad_norm,
        input_grad_norm=input_grad_norm,
        boundary=boundary,
        low_product=low,
        high_product=high,
        selector=str(selector),
    )


# ---------------------------------------------------------------------------
# finite-difference gradient oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FiniteDifferenceReport:
    passed: bool
    worst_rel_error: float
    mean_rel_error: float
    worst_abs_error: float
    grad_scale: float
    h: float
    tol: float
    num_pixels: int
    selector: str

    def to_dict(self) -> dict:
        d = {"record_kind": "fd_check", **self.__dict__}
        return d


def finite_difference_check(
    model: MultiHeadNetwork,
    selector: HeadSelector,
    batch,
    labels,
    h: float = 1e-3,
    tol: float = 1e-3,
    num_pixels: int = 200,
    seed: int = 0,
    chunk_size: int = 64,
) -> FiniteDifferenceReport:
    """Compare autodiff input gradients against central differences.

    Runs in float64 on a deep copy of the model so truncation, not
    round-off, dominates the comparison. Relative error is measured
    against the infinity norm of the gradient over the sampled pixels
    (per-pixel denominators are meaningless where the true derivative is
    ~0); a gradient with the wrong sign or scale at any significant pixel
    fails loudly. Failures are data in the report, never exceptions.
    """
    if h <= 0:
        raise ValueError(f"h must be positive, got {h}")
    from .attacks import input_gradient

    x64 = torch.from_numpy(batch.data).double() if isinstance(batch, ImageBatch) \
        else batch.detach().double()
    y = labels.labels if isinstance(labels, LabelBatch) else labels
    y_t = torch.from_numpy(np.asarray(y))

    model64 = copy.deepcopy(model).double().eval()

    grad = input_gradient(model64, selector, x64, y_t).numpy()
    n, c, hh, ww = x64.shape
    per_image = c * hh * ww
    total = n * per_image
    k = min(num_pixels, total)
    rng = np.random.default_rng(seed)
    flat_idx = np.sort(rng.choice(total, size=k, replace=False))
    img_idx = flat_idx // per_image
    pix_idx = flat_idx % per_image

    # stack single-pixel perturbed copies of the owning image; per-example
    # losses are independent in eval mode, so they batch freely
    x_flat = x64.reshape(n, -1)
    plus = x_flat[img_idx].clone()
    minus = x_flat[img_idx].clone()
    rows = np.arange(k)
    plus[rows, pix_idx] += h
    minus[rows, pix_idx] -= h
    stacked = torch.cat([plus, minus]).reshape(2 * k, c, hh, ww)
    stacked_y = y_t[np.concatenate([img_idx, img_idx])]

    losses = np.empty(2 * k)
    with torch.no_grad():
        for i in range(0, 2 * k, chunk_size):
            xs = stacked[i : i + chunk_size]
            ys = stacked_y[i : i + chunk_size]
            log_probs = selector_log_probs(model64(xs), selector)
            losses[i : i + chunk_size] = torch.nn.functional.nll_loss(
                log_probs, ys, reduction="none"
            ).numpy()

    # d(mean loss)/d(pixel of image i) carries the 1/N batch factor
    fd = (losses[:k] - losses[k:]) / (2.0 * h * n)
    ad = grad.reshape(n, -1)[img_idx, pix_idx]

    abs_err = np.abs(ad - fd)
    scale = max(float(np.abs(ad).max()), float(np.abs(fd).max()))
    if scale == 0.0:
        worst_rel = mean_rel = 0.0
    else:
        worst_rel = float(abs_err.max() / scale)
        mean_rel = float(abs_err.mean() / scale)
    return FiniteDifferenceReport(
        passed=bool(worst_rel <= tol),
        worst_rel_error=worst_rel,
        mean_rel_error=mean_rel,
        worst_abs_error=float(abs_err.max()),
        grad_scale=scale,
        h=h,
        tol=tol,
        num_pixels=k,
        selector=str(selector),
    )


# ---------------------------------------------------------------------------
# cost profiling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CostReport:
    architecture: str
    batch_size: int
    repetitions: int
    forward_mean: float
    forward_std: float
    backward_mean: float
    backward_std: float
    sum_mean: float
    sum_std: float
    stats: ModelStats
    hardware: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "record_kind": "cost",
            "architecture": self.architecture,
            "batch_size": self.batch_size,
            "repetitions": self.repetitions,
            "forward_mean": self.forward_mean,
            "forward_std": self.forward_std,
            "backward_mean": self.backward_mean,
            "backward_std": self.backward_std,
            "sum_mean": self.sum_mean,
            "sum_std": self.sum_std,
            "parameter_count": self.stats.parameter_count,
            "block_count": self.stats.block_count,
            "madds_per_image": self.stats.madds_per_image,
            "hardware": self.hardware,
        }


def _hardware_descriptor(device) -> dict:
    desc = {
        "platform": platform.platform(),
        "processor": platform.processor() or platform.machine(),
        "torch": torch.__version__,
        "threads": torch.get_num_threads(),
        "device": str(device or "cpu"),
    }
    if device is not None and str(device).startswith("cuda"):
        desc["gpu"] = torch.cuda.get_device_name(device)
    return desc


def profile_cost(
    model: MultiHeadNetwork,
    batch_size: int = 32,
    repetitions: int = 7,
    warmup: int = 2,
    device=None,
    seed: int = 0,
    architecture: Optional[str] = None,
) -> CostReport:
    """Timed forward and forward+backward passes on fixed random input.

    The forward+backward sum measures both training cost and the cost of
    crafting adversarial examples (one gradient per step either way).
    Holds a process-wide lock so only one profile runs at a time.
    """
    if repetitions < 5:
        raise ValueError(f"need at least 5 repetitions, got {repetitions}")
    torch.manual_seed(seed)
    x = torch.rand(batch_size, 3, 32, 32)
    y = torch.randint(0, model.num_classes, (batch_size,))
    if device is not None:
        model.to(device)
        x, y = x.to(device), y.to(device)
    sync = (lambda: torch.cuda.synchronize(device)) \
        if device is not None and str(device).startswith("cuda") else (lambda: None)

    def time_forward() -> float:
        sync()
        t0 = time.perf_counter()
        with torch.no_grad():
            model(x)
        sync()
        return time.perf_counter() - t0

    def time_forward_backward() -> float:
        model.zero_grad(set_to_none=True)
        sync()
        t0 = time.perf_counter()
        loss = multi_head_loss(model(x), y)
        loss.backward()
        sync()
        return time.perf_counter() - t0

    with _PROFILE_LOCK:
        was_training = model.training
        model.eval()
        try:
            for _ in range(warmup):
                time_forward()
                time_forward_backward()
            fwd = np.array([time_forward() for _ in range(repetitions)])
            both = np.array([time_forward_backward() for _ in range(repetitions)])
        finally:
            model.zero_grad(set_to_none=True)
            model.train(was_training)

    bwd = both - fwd.mean()
    return CostReport(
        architecture=architecture or model.config().get("kind", "model"),
        batch_size=batch_size,
        repetitions=repetitions,
        forward_mean=float(fwd.mean()),
        forward_std=float(fwd.std()),
        backward_mean=float(bwd.mean()),
        backward_std=float(bwd.std()),
        sum_mean=float(both.mean()),
        sum_std=float(both.std()),
        stats=model_stats(model),
        hardware=_hardware_descriptor(device),
    )
