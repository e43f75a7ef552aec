"""Small differentiable building blocks for the policies.

Reverse-mode gradients come from torch autograd in float64. The layers
themselves (residual MLP, GRU cell, projections) are written out here so
their algebra stays explicit and can be checked against finite differences.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import nn

from . import seeding

DTYPE = torch.float64

_ACTIVATIONS: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "relu": torch.relu,
    "tanh": torch.tanh,
    "sigmoid": torch.sigmoid,
    "softplus": nn.functional.softplus,
    "identity": lambda x: x,
}


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    output_dim: int
    hidden_dims: tuple[int, ...] = (50, 50)
    activation: str = "relu"
    layer_norm: bool = False
    residual: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if min((self.input_dim, self.output_dim, *self.hidden_dims)) < 1:
            raise ValueError("all layer widths must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class GruSpec:
    input_dim: int
    hidden_dim: int = 16

    def __post_init__(self):
        if self.input_dim < 1 or self.hidden_dim < 1:
            raise ValueError("GRU widths must be >= 1")


def kaiming_bound(fan_in: int) -> float:
    return math.sqrt(6.0 / fan_in)


def _uniform(gen: np.random.Generator, shape, bound: float) -> nn.Parameter:
    values = gen.uniform(-bound, bound, size=shape)
    return nn.Parameter(torch.as_tensor(values, dtype=DTYPE))


def _zeros(*shape) -> nn.Parameter:
    return nn.Parameter(torch.zeros(*shape, dtype=DTYPE))


def _check_last_dim(x: torch.Tensor, dim: int, what: str):
    if x.shape[-1] != dim:
        raise ValueError(f"shape mismatch: {what} expects last dim {dim}, got {tuple(x.shape)}")


class Mlp(nn.Module):
    """Feed-forward net whose hidden layers learn residual corrections.

    The first layer maps the input to the first hidden width. Each later
    hidden layer of equal width computes ``h + act(W h + b)`` when
    ``residual`` is on; otherwise (or when widths differ) ``act(W h + b)``.
    A final affine layer produces the output. With ``layer_norm`` the
    pre-activations are normalized (no learned scale or shift).
    """

    def __init__(self, spec: MlpSpec, seed: int = 0, stream: int = 0):
        super().__init__()
        self.spec = spec
        widths = (spec.input_dim, *spec.hidden_dims, spec.output_dim)
        gen = seeding.rng(seed, "init", stream)
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            self.weights.append(_uniform(gen, (fan_out, fan_in), kaiming_bound(fan_in)))
            self.biases.append(_zeros(fan_out))
        self._act = _ACTIVATIONS[spec.activation]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_last_dim(x, self.spec.input_dim, "Mlp")
        h = x
        n_hidden = len(self.spec.hidden_dims)
        for k in range(n_hidden):
            pre = h @ self.weights[k].T + self.biases[k]
            if self.spec.layer_norm:
                pre = nn.functional.layer_norm(pre, pre.shape[-1:])
            out = self._act(pre)
            if self.spec.residual and k > 0 and out.shape[-1] == h.shape[-1]:
                h = h + out
            else:
                h = out
        return h @ self.weights[-1].T + self.biases[-1]


class GruCell(nn.Module):
    """Gated recurrent unit, gate order (reset, update, candidate).

    ``h' = (1 - z) * n + z * h`` with ``n = tanh(W_in x + b_in + r * (W_hn h + b_hn))``.
    Parameters use the same layout as ``torch.nn.GRUCell`` so the two can be
    compared weight for weight.
    """

    def __init__(self, spec: GruSpec, seed: int = 0, stream: int = 0):
        super().__init__()
        self.spec = spec
        gen = seeding.rng(seed, "init", stream)
        H, I = spec.hidden_dim, spec.input_dim
        self.weight_ih = _uniform(gen, (3 * H, I), kaiming_bound(I))
        self.weight_hh = _uniform(gen, (3 * H, H), kaiming_bound(H))
        self.bias_ih = _zeros(3 * H)
        self.bias_hh = _zeros(3 * H)

    def initial_state(self, batch: int) -> torch.Tensor:
        return torch.zeros(batch, self.spec.hidden_dim, dtype=DTYPE)

    def forward(self, h: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        _check_last_dim(x, self.spec.input_dim, "GruCell input")
        _check_last_dim(h, self.spec.hidden_dim, "GruCell hidden")
        gi = x @ self.weight_ih.T + self.bias_ih
        gh = h @ self.weight_hh.T + self.bias_hh
        i_r, i_z, i_n = gi.chunk(3, dim=-1)
        h_r, h_z, h_n = gh.chunk(3, dim=-1)
        r = torch.sigmoid(i_r + h_r)
        z = torch.sigmoid(i_z + h_z)
        n = torch.tanh(i_n + r * h_n)
        return (1.0 - z) * n + z * h


def gru_step(cell: GruCell, h_prev: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    return cell(h_prev, x)


def softmax_project(logits: torch.Tensor) -> torch.Tensor:
    """Map logits onto the open simplex; the max shift keeps ``exp`` finite."""
    shifted = logits - logits.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def box_project(raw: torch.Tensor, lower, upper) -> torch.Tensor:
    """Smoothly squash ``raw`` into ``(lower, upper)`` componentwise.

    Finite boxes use ``lower + (upper - lower) * sigmoid(raw)``; an infinite
    upper bound uses ``lower + softplus(raw)``.
    """
    lower = torch.as_tensor(lower, dtype=raw.dtype)
    upper = torch.as_tensor(upper, dtype=raw.dtype)
    if torch.any(lower > upper):
        raise ValueError("lower bound exceeds upper bound")
    unbounded = torch.isinf(upper)
    # a finite stand-in keeps the unused branch free of inf * 0 in backward
    width = torch.where(unbounded, torch.ones_like(upper), upper - lower)
    squashed = lower + width * torch.sigmoid(raw)
    open_ended = lower + nn.functional.softplus(raw)
    return torch.where(unbounded, open_ended, squashed)


class AdamW:
    """Decoupled weight-decay Adam with an exponential learning-rate schedule.

    Parameters
    ----------
    groups : iterable of dict
        Torch-style parameter groups, each with ``params`` and optionally
        ``lr`` / ``weight_decay`` (e.g. one group for the net, one for eta).
    lr : float
        Default learning rate.
    weight_decay : float
        Default decoupled decay coefficient.
    decay_rate : float
        Multiplicative lr factor applied by each :meth:`decay` call.
    """

    def __init__(self, groups, lr: float = 1e-3, weight_decay: float = 0.0,
                 decay_rate: float = 1.0, betas=(0.9, 0.999), eps: float = 1e-8):
        groups = list(groups)
        if groups and not isinstance(groups[0], dict):
            groups = [{"params": groups}]
        self.opt = torch.optim.AdamW(groups, lr=lr, weight_decay=weight_decay,
                                     betas=betas, eps=eps)
        self.decay_rate = decay_rate

    @property
    def params(self) -> list[torch.Tensor]:
        return [p for g in self.opt.param_groups for p in g["params"]]

    @property
    def lrs(self) -> list[float]:
        return [g["lr"] for g in self.opt.param_groups]

    def zero_grad(self):
        self.opt.zero_grad(set_to_none=False)

    def step(self):
        self.opt.step()

    def decay(self):
        for g in self.opt.param_groups:
            g["lr"] *= self.decay_rate


def adamw_step(optimizer: AdamW):
    optimizer.step()


def global_grad_norm(params: Iterable[torch.Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(torch.sum(p.grad.double() ** 2))
    return math.sqrt(total)


def clip_gradients(params: Iterable[torch.Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their global norm is at most ``max_norm``.

    Returns the factor applied (1.0 when no clipping happened).
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    params = [p for p in params if p.grad is not None]
    norm = global_grad_norm(params)
    if norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    with torch.no_grad():
        for p in params:
            p.grad.mul_(scale)
    return scale


def grad_check(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor],
               epsilon: float = 1e-5) -> float:
    """Largest relative gap between autograd and central differences.

    The relative error of each entry is ``|a - b| / max(|a|, |b|, floor)``
    where ``floor`` is a small fraction of the largest gradient entry, so
    near-zero components do not blow up the ratio.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    analytic = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, analytic)]
    numeric = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            est = torch.empty_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + epsilon
                up = float(loss_fn())
                flat[i] = orig - epsilon
                down = float(loss_fn())
                flat[i] = orig
                est[i] = (up - down) / (2 * epsilon)
            numeric.append(est.view_as(p))
    scale = max([float(g.abs().max()) for g in analytic if g.numel()] + [0.0])
    floor = 1e-3 * scale + 1e-12
    worst = 0.0
    for a, b in zip(analytic, numeric):
        denom = torch.clamp(torch.maximum(a.abs(), b.abs()), min=floor)
        if a.numel():
            worst = max(worst, float(((a - b).abs() / denom).max()))
    return worst


def save_checkpoint(module: nn.Module, path, extra: dict | None = None):
    """Write parameters as JSON: ordered names, shapes and flat values."""
    entries = [
        {"name": name, "shape": list(t.shape), "values": t.detach().reshape(-1).tolist()}
        for name, t in module.state_dict().items()
    ]
    Path(path).write_text(json.dumps({"params": entries, "extra": extra or {}}))


def load_checkpoint(module: nn.Module, path) -> dict:
    """Restore parameters written by :func:`save_checkpoint`; returns ``extra``."""
    blob = json.loads(Path(path).read_text())
    state = module.state_dict()
    names = [e["name"] for e in blob["params"]]
    if names != list(state):
        raise ValueError("checkpoint parameter names do not match the module")
    new_state = {}
    for e in blob["params"]:
        if list(state[e["name"]].shape) != e["shape"]:
            raise ValueError(f"shape mismatch for {e['name']}")
        new_state[e["name"]] = torch.as_tensor(
            np.asarray(e["values"], dtype=np.float64).reshape(e["shape"]), dtype=DTYPE)
    module.load_state_dict(new_state)
    return blob["extra"]
