"""Sign-gradient attacks under an L-infinity budget.

Both attacks ascend the selected head's (or ensemble's) cross-entropy with
steps of ``step_size * sign(grad)``, projecting after every step onto the
intersection of the epsilon-ball around the clean image and the [0, 1] pixel
box. One step with step_size == epsilon is the classic single-step attack;
the iterated form starts from the clean image (no random start by default).

Budgets are in raw pixel units so a given epsilon means the same thing for
every proxy/target pair. Feasibility (max |adv - clean| <= epsilon and
adv in [0, 1]) is asserted on every crafted batch, not only under test.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .data import ImageBatch, LabelBatch
from .errors import NumericsError
from .models import HeadSelector, MultiHeadNetwork, selector_nll

# slack for float32 rounding in the feasibility assertion
FEASIBILITY_TOL = 1e-6


@dataclass(frozen=True)
class AttackConfig:
    """Budget and schedule of a sign-gradient attack.

    ``step_size=None`` resolves to epsilon for a single step and
    epsilon/steps otherwise. Sanity constraints: the per-step move never
    exceeds the budget (step_size <= epsilon) and the ball surface is
    reachable (steps * step_size >= epsilon).
    """

    name: str
    epsilon: float = 0.1
    steps: int = 1
    step_size: Optional[float] = None
    loss: str = "cross_entropy"
    random_start: bool = False

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.loss != "cross_entropy":
            raise ValueError(f"unsupported loss {self.loss!r}")
        if self.step_size is None:
            object.__setattr__(
                self, "step_size",
                self.epsilon if self.steps == 1 else self.epsilon / self.steps,
            )
        if self.step_size < 0:
            raise ValueError(f"step_size must be >= 0, got {self.step_size}")
        if self.step_size > self.epsilon:
            raise ValueError(
                f"step_size {self.step_size} exceeds epsilon {self.epsilon}"
            )
        if self.steps * self.step_size < self.epsilon * (1 - 1e-9):
            raise ValueError(
                f"{self.steps} steps of {self.step_size} cannot reach the "
                f"epsilon={self.epsilon} ball surface"
            )

    @classmethod
    def single_step(cls, epsilon: float = 0.1, **kw) -> "AttackConfig":
        return cls(name="fgsm", epsilon=epsilon, steps=1, **kw)

    @classmethod
    def multi_step(cls, epsilon: float = 0.1, steps: int = 10, **kw) -> "AttackConfig":
        return cls(name="bim", epsilon=epsilon, steps=steps, **kw)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "epsilon": self.epsilon,
            "steps": self.steps,
            "step_size": self.step_size,
            "loss": self.loss,
            "random_start": self.random_start,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        return cls(**d)


@dataclass(frozen=True)
class AdversarialBatch:
    """Crafted images plus their clean origin and the config that made them.

    Construction asserts the feasibility contract; an instance that exists
    is inside the budget.
    """

    adv: ImageBatch
    origin: ImageBatch
    config: AttackConfig
    selector: str
    linf_distances: np.ndarray = field(default=None)
    origin_indices: np.ndarray = field(default=None)  # positions in the source split

    def __post_init__(self):
        if self.adv.data.shape != self.origin.data.shape:
            raise ValueError("adversarial/origin shape mismatch")
        dist = np.abs(self.adv.data - self.origin.data).reshape(len(self.adv), -1).max(axis=1)
        if self.linf_distances is None:
            object.__setattr__(self, "linf_distances", dist)
        if self.origin_indices is None:
            object.__setattr__(self, "origin_indices", np.arange(len(self.adv)))
        worst = float(dist.max())
        if worst > self.config.epsilon + FEASIBILITY_TOL:
            raise ValueError(
                f"adversarial batch escaped the budget: max distance {worst} "
                f"> epsilon {self.config.epsilon}"
            )

    def __len__(self) -> int:
        return len(self.adv)

    def save(self, path: str | Path) -> Path:
        """Persist as an array container for attack-once / evaluate-many."""
        from .records import config_digest

        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(
            path,
            adv=self.adv.data,
            origin=self.origin.data,
            origin_indices=self.origin_indices,
            linf_distances=self.linf_distances,
            config_json=np.bytes_(json.dumps(self.config.to_dict()).encode()),
            config_digest=np.bytes_(config_digest(self.config.to_dict()).encode()),
            selector=np.bytes_(str(self.selector).encode()),
        )
        return path

    @classmethod
    def load(cls, path: str | Path) -> "AdversarialBatch":
        with np.load(path) as z:
            return cls(
                adv=ImageBatch(z["adv"]),
                origin=ImageBatch(z["origin"]),
                config=AttackConfig.from_dict(json.loads(bytes(z["config_json"]).decode())),
                selector=bytes(z["selector"]).decode(),
                linf_distances=z["linf_distances"],
                origin_indices=z["origin_indices"] if "origin_indices" in z else None,
            )


def _to_tensor(batch, dtype=None) -> torch.Tensor:
    arr = batch.data if isinstance(batch, ImageBatch) else batch
    t = torch.from_numpy(arr) if isinstance(arr, np.ndarray) else arr
    return t.to(dtype) if dtype is not None else t


def _labels_tensor(labels) -> torch.Tensor:
    arr = labels.labels if isinstance(labels, LabelBatch) else labels
    return torch.from_numpy(arr) if isinstance(arr, np.ndarray) else arr


def input_gradient(
    model: MultiHeadNetwork,
    selector: HeadSelector,
    batch,
    labels,
    device: str | torch.device | None = None,
) -> torch.Tensor:
    """Exact reverse-mode gradient of the selected loss w.r.t. input pixels.

    The model is evaluated in eval mode and its parameters are untouched
    (no .grad accumulation). Raises :class:`NumericsError` naming the
    offending example indices if the gradient is non-finite.
    """
    x = _to_tensor(batch)
    y = _labels_tensor(labels)
    if device is not None:
        x, y = x.to(device), y.to(device)
    x = x.clone().detach().requires_grad_(True)

    was_training = model.training
    model.eval()
    try:
        loss = selector_nll(model(x), y, selector)
        grad = torch.autograd.grad(loss, x)[0]
    finally:
        model.train(was_training)

    finite = torch.isfinite(grad.reshape(grad.shape[0], -1)).all(dim=1)
    if not bool(finite.all()):
        bad = torch.nonzero(~finite).flatten().tolist()
        raise NumericsError(f"non-finite input gradient for example(s) {bad}")
    return grad.detach()


def project_linf(candidate, origin, epsilon: float):
    """Clamp ``candidate`` into the epsilon-ball around ``origin``
    intersected with the [0, 1] pixel box.

    Implemented as a clamp against precomputed per-pixel bounds
    max(origin - eps, 0) / min(origin + eps, 1), which is exactly
    idempotent in floating point. Accepts arrays or tensors; returns the
    same kind. Raises for epsilon <= 0 (a zero-radius projection is the
    identity on the origin; callers handle that degenerate case).
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    c = _to_tensor(candidate)
    o = _to_tensor(origin)
    if c.shape != o.shape:
        raise ValueError(f"shape mismatch: {tuple(c.shape)} vs {tuple(o.shape)}")
    lo = (o - epsilon).clamp_(min=0.0)
    hi = (o + epsilon).clamp_(max=1.0)
    out = torch.minimum(torch.maximum(c, lo), hi)
    if isinstance(candidate, ImageBatch):
        return ImageBatch(out.numpy())
    return out.numpy() if isinstance(candidate, np.ndarray) else out


def _sign_ascent(
    model: MultiHeadNetwork,
    selector: HeadSelector,
    batch,
    labels,
    config: AttackConfig,
    device=None,
    seed: Optional[int] = None,
    trajectory: Optional[list] = None,
) -> AdversarialBatch:
    x0 = _to_tensor(batch)
    y = _labels_tensor(labels)
    if device is not None:
        x0, y = x0.to(device), y.to(device)

    if config.epsilon == 0.0:
        adv = x0.clone()
    else:
        x = x0.clone()
        if config.random_start:
            gen = torch.Generator(device=x.device)
            gen.manual_seed(0 if seed is None else seed)
            noise = (torch.rand(x.shape, generator=gen, device=x.device, dtype=x.dtype)
                     * 2 - 1) * config.epsilon
            x = project_linf(x + noise, x0, config.epsilon)
        if trajectory is not None:
            trajectory.append(x.detach().cpu().numpy().copy())
        for _ in range(config.steps):
            grad = input_gradient(model, selector, x, y)
            x = project_linf(x + config.step_size * torch.sign(grad), x0, config.epsilon)
            if trajectory is not None:
                trajectory.append(x.detach().cpu().numpy().copy())
        adv = x

    origin_arr = x0.detach().cpu().numpy()
    return AdversarialBatch(
        adv=ImageBatch(adv.detach().cpu().numpy()),
        origin=batch if isinstance(batch, ImageBatch) else ImageBatch(origin_arr),
        config=config,
        selector=str(selector),
    )


def fgsm(
    model: MultiHeadNetwork,
    selector: HeadSelector,
    batch,
    labels,
    config: Optional[AttackConfig] = None,
    device=None,
) -> AdversarialBatch:
    """Single sign-gradient step of ``step_size`` projected into the ball."""
    config = config or AttackConfig.single_step()
    if config.steps != 1:
        raise ValueError(f"single-step attack requires steps=1, got {config.steps}")
    return _sign_ascent(model, selector, batch, labels, config, device=device)


def bim(
    model: MultiHeadNetwork,
    selector: HeadSelector,
    batch,
    labels,
    config: Optional[AttackConfig] = None,
    device=None,
    seed: Optional[int] = None,
    trajectory: Optional[list] = None,
) -> AdversarialBatch:
    """Iterated sign-gradient ascent with per-step projection, starting at
    the clean batch (random start available behind ``config.random_start``).

    Pass a list as ``trajectory`` to collect every iterate (numpy copies,
    starting point included) for loss-vs-iteration analysis.
    """
    config = config or AttackConfig.multi_step()
    return _sign_ascent(model, selector, batch, labels, config, device=device,
                        seed=seed, trajectory=trajectory)


def run_attack(
    model: MultiHeadNetwork,
    selector: HeadSelector,
    batch,
    labels,
    config: AttackConfig,
    device=None,
    seed: Optional[int] = None,
) -> AdversarialBatch:
    """Dispatch on the config's step count."""
    if config.steps == 1:
        return fgsm(model, selector, batch, labels, config, device=device)
    return bim(model, selector, batch, labels, config, device=device, seed=seed)
