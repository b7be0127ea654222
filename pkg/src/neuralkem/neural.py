"""Residual U-net coefficient prior, its training losses and Adam.

The network maps prior images ``z`` (C x H x W, or C x D x H x W) to one
nonnegative image. All trainable tensors are views into a single flat
parameter vector, which keeps the optimiser, checkpointing and
best-iterate bookkeeping to plain vector operations.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

LOG_FLOOR = 1e-8


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class NetDescriptor:
    in_channels: int
    base_channels: int = 16
    scales: int = 3
    negative_slope: float = 0.01
    norm_eps: float = 1e-5
    dims: int = 2
    identity_bypass: bool = False
    dtype: str = "float32"
    output_scale: float = 1.0
    spatial_shape: tuple[int, ...] | None = None   # required only for the bypass

    def __post_init__(self):
        if self.in_channels < 1 or self.base_channels < 1 or self.scales < 1:
            raise NetworkError("channels and scales must be >= 1")
        if self.dims not in (2, 3):
            raise NetworkError("dims must be 2 or 3")
        if self.dtype not in ("float32", "float64"):
            raise NetworkError("dtype must be float32 or float64")
        if not self.output_scale > 0:
            raise NetworkError("output_scale must be > 0")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        """Ordered (name, shape) of every trainable tensor."""
        if self.identity_bypass:
            if self.spatial_shape is None:
                raise NetworkError("identity-bypass descriptor needs spatial_shape")
            return [("bypass.offset", tuple(self.spatial_shape))]
        k = (3,) * self.dims
        out: list[tuple[str, tuple[int, ...]]] = []

        def block(name, cin, cout, ksize=k):
            out.extend([(f"{name}.weight", (cout, cin, *ksize)), (f"{name}.bias", (cout,)),
                        (f"{name}.norm_scale", (cout,)), (f"{name}.norm_shift", (cout,))])

        c = self.channels
        block("enc0.conv1", self.in_channels, c(0))
        block("enc0.conv2", c(0), c(0))
        for lvl in range(1, self.scales):
            block(f"down{lvl}", c(lvl - 1), c(lvl))
            block(f"enc{lvl}.conv1", c(lvl), c(lvl))
            block(f"enc{lvl}.conv2", c(lvl), c(lvl))
        for lvl in range(self.scales - 2, -1, -1):
            block(f"up{lvl}", c(lvl + 1), c(lvl))
            block(f"dec{lvl}.conv1", c(lvl), c(lvl))
            block(f"dec{lvl}.conv2", c(lvl), c(lvl))
        out.extend([("out.weight", (1, c(0), *(1,) * self.dims)), ("out.bias", (1,))])
        return out


@dataclass
class NetParams:
    descriptor: NetDescriptor
    flat: torch.Tensor
    layout: list[tuple[str, tuple[int, ...], int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.layout:
            off, lay = 0, []
            for name, shape in self.descriptor.layout():
                lay.append((name, shape, off))
                off += int(np.prod(shape))
            self.layout = lay
        n = sum(int(np.prod(s)) for _, s, _ in self.layout)
        if self.flat.ndim != 1 or self.flat.numel() != n:
            raise NetworkError(f"flat vector has {self.flat.numel()} entries, layout needs {n}")

    @property
    def n_params(self) -> int:
        return self.flat.numel()

    def views(self, flat: torch.Tensor | None = None) -> dict[str, torch.Tensor]:
        flat = self.flat if flat is None else flat
        sizes = [int(np.prod(shape)) for _, shape, _ in self.layout]
        parts = torch.split(flat, sizes)
        return {name: part.view(shape) for (name, shape, _), part in zip(self.layout, parts)}

    def copy(self) -> "NetParams":
        return NetParams(self.descriptor, self.flat.detach().clone(), list(self.layout))

    def with_flat(self, flat: torch.Tensor) -> "NetParams":
        return NetParams(self.descriptor, flat, list(self.layout))

    def with_descriptor(self, **changes) -> "NetParams":
        return NetParams(replace(self.descriptor, **changes), self.flat, list(self.layout))

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().to(torch.float64).numpy().copy() for k, v in self.views().items()}


def init_params(desc: NetDescriptor, seed: int = 0) -> NetParams:
    """He-uniform conv weights (fan-in), zero biases, unit norm scale, zero shift.

    Draws happen in float64 from a seeded generator, so float32 and float64
    networks share the same initial point up to rounding.
    """
    gen = torch.Generator().manual_seed(int(seed))
    chunks = []
    for name, shape in desc.layout():
        n = int(np.prod(shape))
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            chunks.append((torch.rand(n, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
        elif name.endswith(".norm_scale"):
            chunks.append(torch.ones(n, dtype=torch.float64))
        else:
            chunks.append(torch.zeros(n, dtype=torch.float64))
    flat = torch.cat(chunks).to(desc.torch_dtype)
    return NetParams(desc, flat)


# --- layers -----------------------------------------------------------------

def conv(x, weight, bias, stride: int = 1):
    fn = F.conv2d if x.dim() == 4 else F.conv3d
    return fn(x, weight, bias, stride=stride, padding=weight.shape[-1] // 2)


def spatial_norm(x, scale, shift, eps: float = 1e-5):
    """Per-channel normalisation over spatial axes (batch norm at batch size one)."""
    return F.instance_norm(x, weight=scale, bias=shift, eps=eps)


def lrelu(x, slope: float = 0.01):
    return F.leaky_relu(x, slope)


def upsample(x):
    mode = "bilinear" if x.dim() == 4 else "trilinear"
    return F.interpolate(x, scale_factor=2, mode=mode, align_corners=False)


def add(a, b):
    return a + b


def relu(x):
    return F.relu(x)


def _block(x, p, name, desc, stride=1):
    y = conv(x, p[f"{name}.weight"], p[f"{name}.bias"], stride)
    y = spatial_norm(y, p[f"{name}.norm_scale"], p[f"{name}.norm_shift"], desc.norm_eps)
    return lrelu(y, desc.negative_slope)


def network_output(desc: NetDescriptor, p: dict[str, torch.Tensor], z: torch.Tensor) -> torch.Tensor:
    """Differentiable forward pass; ``z`` has shape (1, C, *spatial)."""
    if desc.identity_bypass:
        return desc.output_scale * relu(z[:, :1] + p["bypass.offset"])
    x = _block(z, p, "enc0.conv1", desc)
    x = _block(x, p, "enc0.conv2", desc)
    skips = [x]
    for lvl in range(1, desc.scales):
        x = _block(x, p, f"down{lvl}", desc, stride=2)
        x = _block(x, p, f"enc{lvl}.conv1", desc)
        x = _block(x, p, f"enc{lvl}.conv2", desc)
        skips.append(x)
    for lvl in range(desc.scales - 2, -1, -1):
        x = _block(upsample(x), p, f"up{lvl}", desc)
        x = add(x, skips[lvl])
        x = _block(x, p, f"dec{lvl}.conv1", desc)
        x = _block(x, p, f"dec{lvl}.conv2", desc)
    y = conv(x, p["out.weight"], p["out.bias"])
    return desc.output_scale * relu(y)


def prepare_input(desc: NetDescriptor, z) -> torch.Tensor:
    z = torch.as_tensor(np.asarray(z), dtype=desc.torch_dtype)
    expected_dims = desc.dims + 1
    if z.dim() != expected_dims:
        raise NetworkError(f"input must be (C, *spatial) with {desc.dims} spatial axes, got {tuple(z.shape)}")
    if z.shape[0] != desc.in_channels:
        raise NetworkError(f"network expects {desc.in_channels} input channels, got {z.shape[0]}")
    if desc.identity_bypass:
        if tuple(z.shape[1:]) != tuple(desc.spatial_shape):
            raise NetworkError("input spatial shape differs from the bypass parameter image")
    else:
        f = 2 ** (desc.scales - 1)
        if any(s % f for s in z.shape[1:]):
            raise NetworkError(f"spatial dims {tuple(z.shape[1:])} not divisible by {f}")
    return z.unsqueeze(0).contiguous()


class ForwardCache:
    """Output of one forward pass plus the graph needed for its backward pass."""

    def __init__(self, params: NetParams, leaf: torch.Tensor, out: torch.Tensor):
        self.params = params
        self._leaf = leaf
        self._out = out

    @property
    def output(self) -> np.ndarray:
        return self._out.detach().to(torch.float64).numpy().ravel().copy()

    def backward(self, upstream) -> torch.Tensor:
        if self._out is None:
            raise NetworkError("forward cache already consumed")
        g = torch.as_tensor(np.asarray(upstream, dtype=np.float64)).to(self._out.dtype).view_as(self._out)
        (grad,) = torch.autograd.grad(self._out, self._leaf, grad_outputs=g)
        self._out = None
        return grad


def unet_forward(params: NetParams, z, keep_graph: bool = False) -> ForwardCache:
    desc = params.descriptor
    zt = prepare_input(desc, z)
    if keep_graph:
        leaf = params.flat.detach().requires_grad_(True)
        out = network_output(desc, params.views(leaf), zt)
        return ForwardCache(params, leaf, out)
    with torch.no_grad():
        out = network_output(desc, params.views(), zt)
    return ForwardCache(params, params.flat, out)


def unet_backward(cache: ForwardCache | None, upstream) -> np.ndarray:
    """Gradient of ``<upstream, output>`` w.r.t. the flat parameter vector."""
    if cache is None or not isinstance(cache, ForwardCache) or not cache._leaf.requires_grad:
        raise NetworkError("unet_backward needs a forward cache built with keep_graph=True")
    return cache.backward(upstream).to(torch.float64).numpy().copy()


def predict(params: NetParams, z) -> np.ndarray:
    return unet_forward(params, z).output


# --- losses -----------------------------------------------------------------

def _check_finite(*arrays):
    for a in arrays:
        if np.isnan(a).any():
            raise ValueError("NaN in loss inputs")


def loss_Q(alpha_hat, beta, w, floor: float = LOG_FLOOR) -> tuple[float, np.ndarray]:
    """Weighted Poisson surrogate sum_j w_j (alpha_hat_j log beta_j - beta_j).

    Returns the value and its gradient w.r.t. ``beta``; pixels with w_j = 0 are
    skipped. ``beta`` is floored at ``floor`` inside the log.
    """
    alpha_hat, beta, w = (np.asarray(a, dtype=np.float64) for a in (alpha_hat, beta, w))
    _check_finite(alpha_hat, beta, w)
    if not (alpha_hat.shape == beta.shape == w.shape):
        raise ValueError("alpha_hat, beta and w must share a shape")
    on = w > 0
    b = np.maximum(beta, floor)
    ah = np.where(on, alpha_hat, 0.0)
    value = float(np.sum(np.where(on, w * (np.where(ah > 0, ah * np.log(b), 0.0) - beta), 0.0)))
    grad = np.where(on, w * (np.where(beta > floor, ah / b, 0.0) - 1.0), 0.0)
    return value, grad


def loss_mse(target, beta) -> tuple[float, np.ndarray]:
    target, beta = np.asarray(target, dtype=np.float64), np.asarray(beta, dtype=np.float64)
    if target.shape != beta.shape:
        raise ValueError("target and beta must share a shape")
    _check_finite(target, beta)
    diff = beta - target
    return float(diff @ diff), 2.0 * diff


# --- optimiser ----------------------------------------------------------------

@dataclass
class AdamState:
    m: torch.Tensor
    v: torch.Tensor
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: NetParams | torch.Tensor, lr: float = 1e-3, **kw) -> "AdamState":
        flat = params.flat if isinstance(params, NetParams) else params
        return cls(torch.zeros_like(flat), torch.zeros_like(flat), 0, lr, **kw)

    def copy(self) -> "AdamState":
        return replace(self, m=self.m.clone(), v=self.v.clone())


def adam_step(state: AdamState, theta: torch.Tensor, grad: torch.Tensor) -> None:
    """One bias-corrected Adam descent step, updating ``theta`` and ``state`` in place."""
    if grad.shape != theta.shape or state.m.shape != theta.shape:
        raise ValueError("parameter, gradient and moment shapes differ")
    if not torch.isfinite(grad).all():
        raise FloatingPointError("non-finite gradient; training step aborted")
    state.step += 1
    state.m.mul_(state.beta1).add_(grad, alpha=1 - state.beta1)
    state.v.mul_(state.beta2).addcmul_(grad, grad, value=1 - state.beta2)
    m_hat = state.m / (1 - state.beta1**state.step)
    v_hat = state.v / (1 - state.beta2**state.step)
    theta.sub_(state.lr * m_hat / (v_hat.sqrt() + state.eps))


# --- training ---------------------------------------------------------------

class TrainResult(NamedTuple):
    params: NetParams
    state: AdamState
    trace: list[float]          # objective of iterates 0..subiters (to be maximised)
    best_value: float
    best_index: int             # iterate index in 1..subiters


def objective(kind: str, beta: np.ndarray, target: np.ndarray, w: np.ndarray | None):
    """Value and gradient of the quantity training maximises."""
    if kind == "Q":
        return loss_Q(target, beta, w)
    if kind == "MSE":
        v, g = loss_mse(target, beta)
        return -v, -g
    raise ValueError(f"unknown loss kind {kind!r}")


def train_to_target(params: NetParams, state: AdamState, z, target, w=None, loss_kind: str = "Q",
                    subiters: int = 150) -> TrainResult:
    """Full-image Adam steps toward ``target``; returns the best iterate after >= 1 step.

    The returned state is the optimiser state after the last step, so a
    persistent optimiser carries across calls.
    """
    if subiters < 1:
        raise ValueError("subiters must be >= 1")
    if loss_kind == "Q" and w is None:
        raise ValueError("the Q loss needs pixel weights w")
    desc = params.descriptor
    zt = prepare_input(desc, z)
    target = np.asarray(target, dtype=np.float64)
    w = None if w is None else np.asarray(w, dtype=np.float64)
    theta = params.flat.detach().clone().requires_grad_(True)
    state = state.copy()
    trace: list[float] = []
    best_value, best_flat, best_index = -np.inf, None, 0
    for t in range(subiters + 1):
        out = network_output(desc, params.views(theta), zt)
        beta = out.detach().to(torch.float64).numpy().ravel()
        value, grad = objective(loss_kind, beta, target, w)
        trace.append(value)
        if t >= 1 and value > best_value:
            best_value, best_flat, best_index = value, theta.detach().clone(), t
        if t == subiters:
            break
        (g,) = torch.autograd.grad(out, theta, grad_outputs=torch.from_numpy(-grad).to(out.dtype).view_as(out))
        with torch.no_grad():
            adam_step(state, theta, g)
    return TrainResult(params.with_flat(best_flat), state, trace, float(best_value), best_index)


# --- checkpoints ------------------------------------------------------------

def flat_from_arrays(desc: NetDescriptor, arrays: dict[str, np.ndarray]) -> NetParams:
    parts = []
    for name, shape in desc.layout():
        if name not in arrays:
            raise NetworkError(f"checkpoint lacks tensor {name!r}")
        a = np.asarray(arrays[name], dtype=np.float64)
        if a.shape != tuple(shape):
            raise NetworkError(f"tensor {name!r} has shape {a.shape}, expected {shape}")
        parts.append(torch.tensor(a.ravel()))
    return NetParams(desc, torch.cat(parts).to(desc.torch_dtype))
