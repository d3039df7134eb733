"""Dense MLP forward/backward passes and parameter-update rules.

Everything is float64 numpy. A network is a plain sequence of
fully-connected layers; gradients come from a manually recorded tape
(reverse sweep over stored intermediates), so every derivative is an
explicit formula that the finite-difference suite can audit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import NumericsError, ShapeError, StateError

log = logging.getLogger(__name__)

RELU = "relu"
IDENTITY = "identity"
_ACTIVATIONS = (RELU, IDENTITY)

SGD = "sgd"
ADAM = "adam"
_RULES = (SGD, ADAM)


@dataclass(frozen=True)
class LayerSpec:
    """One fully-connected layer: in_dim -> out_dim, then activation."""

    in_dim: int
    out_dim: int
    activation: str = RELU

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ShapeError(
                f"layer dims must be >= 1, got {self.in_dim}x{self.out_dim}"
            )
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


def init_params(layers, rng) -> list[np.ndarray]:
    """Seeded uniform init: W ~ U(+-sqrt(6/(in+out))), b = 0.

    Returns a flat list [W0, b0, W1, b1, ...] aligned with
    ``Mlp.parameters()``.
    """
    rng = np.random.default_rng(rng)
    params: list[np.ndarray] = []
    for spec in layers:
        limit = np.sqrt(6.0 / (spec.in_dim + spec.out_dim))
        params.append(rng.uniform(-limit, limit, size=(spec.in_dim, spec.out_dim)))
        params.append(np.zeros(spec.out_dim))
    return params


class GradientTape:
    """Forward intermediates for one recorded pass, consumed by backward.

    ``inputs[i]`` is the activation fed into layer i, ``preacts[i]`` the
    pre-activation output of layer i. A tape records exactly one forward
    pass; backward without a recorded pass raises StateError.
    """

    def __init__(self):
        self.model: Mlp | None = None
        self.inputs: list[np.ndarray] = []
        self.preacts: list[np.ndarray] = []

    @property
    def primed(self) -> bool:
        return self.model is not None and len(self.preacts) > 0

    def reset(self):
        self.model = None
        self.inputs = []
        self.preacts = []


class Mlp:
    """Sequential fully-connected net holding its own float64 parameters."""

    def __init__(self, layers, params=None, rng=None):
        layers = tuple(layers)
        if not layers:
            raise ShapeError("network needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(
                    f"layer chain mismatch: out_dim {prev.out_dim} feeds "
                    f"in_dim {nxt.in_dim}"
                )
        self.layers = layers
        if params is None:
            params = init_params(layers, rng)
        self._check_param_shapes(params)
        self._params = [np.asarray(p, dtype=np.float64) for p in params]

    def _check_param_shapes(self, params):
        if len(params) != 2 * len(self.layers):
            raise ShapeError(
                f"expected {2 * len(self.layers)} parameter arrays, "
                f"got {len(params)}"
            )
        for i, spec in enumerate(self.layers):
            w, b = params[2 * i], params[2 * i + 1]
            if w.shape != (spec.in_dim, spec.out_dim) or b.shape != (spec.out_dim,):
                raise ShapeError(
                    f"layer {i} parameter shapes {w.shape}/{b.shape} do not "
                    f"match spec {spec.in_dim}x{spec.out_dim}"
                )

    def parameters(self) -> list[np.ndarray]:
        """Flat parameter list [W0, b0, W1, b1, ...]; arrays are live views."""
        return self._params

    def copy(self) -> "Mlp":
        return Mlp(self.layers, params=[p.copy() for p in self._params])

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def forward(self, x: np.ndarray, tape: GradientTape | None = None,
                n_layers: int | None = None) -> np.ndarray:
        """Run the batch through the first ``n_layers`` layers (default all).

        With a tape, intermediates are recorded for a later backward pass;
        partial-depth passes cannot be taped.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2:
            raise ShapeError(f"input must be 2-d (batch, features), got {x.shape}")
        if x.shape[1] != self.in_dim:
            raise ShapeError(
                f"input has {x.shape[1]} columns but first layer expects "
                f"{self.in_dim}"
            )
        depth = len(self.layers) if n_layers is None else n_layers
        if not 1 <= depth <= len(self.layers):
            raise ShapeError(f"n_layers {n_layers} outside 1..{len(self.layers)}")
        if tape is not None:
            if depth != len(self.layers):
                raise StateError("partial-depth forward cannot be taped")
            tape.reset()
            tape.model = self

        h = x
        for i in range(depth):
            w, b = self._params[2 * i], self._params[2 * i + 1]
            z = h @ w + b
            if tape is not None:
                tape.inputs.append(h)
                tape.preacts.append(z)
            h = np.maximum(z, 0.0) if self.layers[i].activation == RELU else z
        if not np.all(np.isfinite(h)):
            raise NumericsError("non-finite values in forward output")
        return h


def mlp_backward(tape: GradientTape, output_gradient: np.ndarray):
    """Reverse sweep over a recorded forward pass.

    Returns ``(param_grads, input_grad)`` where param_grads aligns 1:1 with
    ``model.parameters()``. ReLU uses subgradient 0 at exactly 0.
    """
    if not tape.primed:
        raise StateError("backward requires a recorded forward pass")
    model = tape.model
    out = tape.preacts[-1]
    g = np.asarray(output_gradient, dtype=np.float64)
    if g.shape != out.shape:
        raise ShapeError(
            f"output gradient shape {g.shape} does not match forward "
            f"output {out.shape}"
        )
    grads: list[np.ndarray] = [np.empty(0)] * (2 * len(model.layers))
    for i in range(len(model.layers) - 1, -1, -1):
        if model.layers[i].activation == RELU:
            g = g * (tape.preacts[i] > 0.0)
        x = tape.inputs[i]
        grads[2 * i] = x.T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ model._params[2 * i].T
    return grads, g


@dataclass
class OptimizerState:
    """Update rule plus its running buffers.

    ``weight_decay`` is decoupled: p <- p - lr * weight_decay * p on every
    step, for both rules (this realizes the L2 penalty on the weights
    without polluting the reported loss values).
    """

    rule: str
    learning_rate: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None

    def __post_init__(self):
        if self.rule not in _RULES:
            raise ValueError(f"unknown optimizer rule {self.rule!r}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")


def optimizer_step(state: OptimizerState, params: list[np.ndarray],
                   grads: list[np.ndarray]) -> list[np.ndarray]:
    """Apply one in-place update; returns the same parameter list.

    SGD:  p <- p - lr * g
    Adam: bias-corrected first/second moments with the default constants.
    Both subtract lr * weight_decay * p (pre-step value) afterwards.
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters vs {len(grads)} gradients")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ShapeError(
                f"parameter {i}: shape {p.shape} vs gradient {g.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise NumericsError(
                f"non-finite gradient for parameter {i} at step "
                f"{state.step_count + 1}; aborting update"
            )

    lr = state.learning_rate
    decay = [lr * state.weight_decay * p for p in params] if state.weight_decay else None

    if state.rule == SGD:
        for p, g in zip(params, grads):
            p -= lr * g
    else:
        if state.m is None:
            state.m = [np.zeros_like(p) for p in params]
            state.v = [np.zeros_like(p) for p in params]
        state.step_count += 1
        t = state.step_count
        bc1 = 1.0 - state.beta1 ** t
        bc2 = 1.0 - state.beta2 ** t
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)

    if decay is not None:
        for p, d in zip(params, decay):
            p -= d
    return params


def apply_lr_schedule(epoch: int, base_lr: float, milestones, factor: float) -> float:
    """Step decay: base_lr * factor^(number of milestones <= epoch)."""
    hits = sum(1 for m in milestones if m <= epoch)
    return base_lr * factor ** hits
