"""Small hand-analyzable networks used as test subjects and oracles."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from transferlab.models.base import HeadSelector, MultiHeadNetwork


class ConstantModel(MultiHeadNetwork):
    """Ignores its input: logits are a fixed per-class vector."""

    head_count = 1
    block_count = 0

    def __init__(self, logits=None, num_classes: int = 10):
        super().__init__()
        self.num_classes = num_classes
        values = torch.zeros(num_classes) if logits is None else torch.as_tensor(logits)
        self.register_buffer("values", values.float())

    def forward(self, x):
        n = x.shape[0]
        # multiply by a zero projection of x so the graph touches the input
        # (gradient is exactly zero rather than absent)
        zero = (x.reshape(n, -1).sum(dim=1, keepdim=True) * 0.0)
        return (self.values.expand(n, -1) + zero).unsqueeze(0)

    def config(self):
        return {"kind": "constant_toy", "num_classes": self.num_classes}


class LinearSoftmaxModel(MultiHeadNetwork):
    """logits = W @ flatten(x); every derived quantity has a closed form."""

    head_count = 1
    block_count = 1

    def __init__(self, weight: np.ndarray, num_classes: int = 10):
        super().__init__()
        self.num_classes = num_classes
        self.linear = nn.Linear(weight.shape[1], weight.shape[0], bias=False)
        with torch.no_grad():
            self.linear.weight.copy_(torch.from_numpy(weight).float())
        self.input_channels = 3

    def forward(self, x):
        return self.linear(x.reshape(x.shape[0], -1)).unsqueeze(0)

    def config(self):
        return {"kind": "linear_toy", "num_classes": self.num_classes}

    def numpy_weight(self) -> np.ndarray:
        return self.linear.weight.detach().numpy().astype(np.float64)


def linear_softmax_loss_and_grad(weight: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Independent numpy oracle for the linear-softmax cross-entropy.

    Returns (mean loss, gradient w.r.t. x) computed from the closed form:
    dL/dx_n = W^T (softmax(W x_n) - onehot(y_n)) / N.
    """
    n = x.shape[0]
    flat = x.reshape(n, -1).astype(np.float64)
    logits = flat @ weight.T
    shifted = logits - logits.max(axis=1, keepdims=True)
    expw = np.exp(shifted)
    probs = expw / expw.sum(axis=1, keepdims=True)
    loss = -np.mean(shifted[np.arange(n), y] - np.log(expw.sum(axis=1)))
    delta = probs.copy()
    delta[np.arange(n), y] -= 1.0
    grad = (delta @ weight) / n
    return loss, grad.reshape(x.shape)


class TwoHeadToy(MultiHeadNetwork):
    """Two independent affine heads over the flattened input."""

    head_count = 2
    block_count = 0

    def __init__(self, in_features: int, num_classes: int = 10, seed: int = 0):
        super().__init__()
        self.num_classes = num_classes
        torch.manual_seed(seed)
        self.head_a = nn.Linear(in_features, num_classes)
        self.head_b = nn.Linear(in_features, num_classes)

    def forward(self, x):
        flat = x.reshape(x.shape[0], -1)
        return torch.stack([self.head_a(flat), self.head_b(flat)])

    def config(self):
        return {"kind": "two_head_toy", "num_classes": self.num_classes}


class SmoothConvNet(MultiHeadNetwork):
    """Tanh conv net: infinitely differentiable, for gradient oracles."""

    head_count = 1
    block_count = 2

    def __init__(self, num_classes: int = 10, seed: int = 0, hw: int = 32):
        super().__init__()
        self.num_classes = num_classes
        torch.manual_seed(seed)
        self.body = nn.Sequential(
            nn.Conv2d(3, 8, 3, padding=1), nn.Tanh(),
            nn.Conv2d(8, 8, 3, stride=2, padding=1), nn.Tanh(),
        )
        self.fc = nn.Linear(8 * (hw // 2) ** 2, num_classes)

    def forward(self, x):
        feats = self.body(x)
        return self.fc(feats.flatten(1)).unsqueeze(0)

    def config(self):
        return {"kind": "smooth_toy", "num_classes": self.num_classes}


class QuadraticModel(MultiHeadNetwork):
    """Class-0 logit is 0.5 * sum(a * x^2): an analytic quadratic in x.

    Central differences are exact for quadratics (zero third derivative),
    so this validates the finite-difference threshold itself.
    """

    head_count = 1
    block_count = 0

    def __init__(self, coeffs: np.ndarray, num_classes: int = 10):
        super().__init__()
        self.num_classes = num_classes
        self.register_buffer("coeffs", torch.from_numpy(coeffs).float())

    def forward(self, x):
        n = x.shape[0]
        quad = 0.5 * (self.coeffs * x.reshape(n, -1) ** 2).sum(dim=1)
        logits = torch.zeros(n, self.num_classes, dtype=x.dtype, device=x.device)
        logits = logits + 0.0 * quad.unsqueeze(1)  # keep graph connected
        logits[:, 0] = quad
        return logits.unsqueeze(0)

    def config(self):
        return {"kind": "quadratic_toy", "num_classes": self.num_classes}


class TinyAttackNet(MultiHeadNetwork):
    """Small ReLU MLP over arbitrary-geometry inputs for attack fuzzing."""

    head_count = 1
    block_count = 1

    def __init__(self, channels: int = 3, hw: int = 8, num_classes: int = 10,
                 seed: int = 0):
        super().__init__()
        self.num_classes = num_classes
        self.input_channels = channels
        torch.manual_seed(seed)
        self.net = nn.Sequential(
            nn.Flatten(),
            nn.Linear(channels * hw * hw, 32), nn.ReLU(),
            nn.Linear(32, num_classes),
        )

    def forward(self, x):
        return self.net(x).unsqueeze(0)

    def config(self):
        return {"kind": "tiny_attack_toy", "num_classes": self.num_classes}


class IdentityChainNet(MultiHeadNetwork):
    """Stages: identity, identity, fixed affine head (known spectral norm)."""

    head_count = 1
    block_count = 2

    def __init__(self, weight: np.ndarray):
        super().__init__()
        self.num_classes = weight.shape[0]
        self.head_weight = nn.Parameter(torch.from_numpy(weight).float(),
                                        requires_grad=True)

    def _head(self, x):
        return x.reshape(x.shape[0], -1) @ self.head_weight.T

    def forward(self, x):
        return self._head(x).unsqueeze(0)

    def config(self):
        return {"kind": "identity_chain_toy", "num_classes": self.num_classes}

    def stages(self, selector: HeadSelector):
        return [
            ("identity1", lambda s: s * 1.0),
            ("identity2", lambda s: s * 1.0),
            ("head", self._head),
        ]
