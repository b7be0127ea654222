"""Reconstruction engines: ML-EM, KEM, neural KEM, DIP by optimisation transfer and DIP by ADMM."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .kernel import KernelModel
from .neural import (AdamState, NetDescriptor, NetParams, init_params, loss_Q, predict,
                     train_to_target)
from .tomo import SparseMatrix, sensitivity

log = logging.getLogger(__name__)

METHODS = ("mlem", "kem", "dip_ot", "neural_kem", "dip_admm")


class ReconError(RuntimeError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    base_channels: int = 16
    scales: int = 3
    negative_slope: float = 0.01
    identity_bypass: bool = False
    dtype: str = "float32"
    lr: float = 1e-3
    init_fit_iters: int = 300
    persistent_optimizer: bool = True
    scale_rule: str = "peak"        # "peak" of a pilot reconstruction, "mean" count level, or a number
    pilot_iters: int = 10
    retry_lr_factor: float = 0.5    # guard retry k trains at lr * factor**k; an accepted retry keeps it

    def __post_init__(self):
        if isinstance(self.scale_rule, str) and self.scale_rule not in ("peak", "mean"):
            raise ValueError("scale_rule must be 'peak', 'mean' or a positive number")
        if not isinstance(self.scale_rule, str) and not self.scale_rule > 0:
            raise ValueError("a numeric scale_rule must be > 0")
        if not 0 < self.retry_lr_factor <= 1:
            raise ValueError("retry_lr_factor must be in (0, 1]")


@dataclass(frozen=True)
class ReconConfig:
    method: str = "mlem"
    outer_iters: int = 60
    subiters: int = 150
    rho: float = 0.05
    admm_recon_subiters: int = 4
    seed: int = 0
    guard: bool = True
    guard_retries: int = 3
    checkpoints: tuple[int, ...] = ()
    network: NetworkConfig = field(default_factory=NetworkConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.outer_iters < 1:
            raise ValueError("outer_iters must be >= 1")
        if self.subiters < 1:
            raise ValueError("subiters must be >= 1")
        if self.method == "dip_admm" and not self.rho > 0:
            raise ValueError("rho must be > 0 for dip_admm")


@dataclass
class ReconState:
    iteration: int
    loglik: float
    q_before: float = float("nan")
    q_after: float = float("nan")
    guard_retries: int = 0
    rejected: bool = False
    wall_ms: float = 0.0
    alpha: np.ndarray | None = field(default=None, repr=False)
    x: np.ndarray | None = field(default=None, repr=False)


@dataclass
class ReconResult:
    x: np.ndarray
    alpha: np.ndarray
    trace: list[ReconState]
    checkpoints: dict[int, np.ndarray] = field(default_factory=dict)
    params: NetParams | None = None

    @property
    def loglik(self) -> np.ndarray:
        return np.array([s.loglik for s in self.trace])

    @property
    def n_rejected(self) -> int:
        return sum(s.rejected for s in self.trace)


# --- likelihood and EM steps ---------------------------------------------------

def log_likelihood(y, ybar) -> float:
    """Poisson log-likelihood without the log(y!) constant; 0 log 0 counts as 0."""
    y, ybar = np.asarray(y, dtype=np.float64), np.asarray(ybar, dtype=np.float64)
    if np.any(ybar < 0):
        raise ReconError("negative expected counts")
    dead = ybar == 0
    if np.any(dead & (y > 0)):
        raise ReconError("counts recorded in a bin with zero expectation")
    safe = np.where(dead, 1.0, ybar)
    return float(np.sum(np.where(y > 0, y * np.log(safe), 0.0) - ybar))


def _data_ratio(y, ybar):
    dead = ybar == 0
    if np.any(dead & (y > 0)):
        raise ReconError("counts recorded in a bin with zero expectation")
    return np.where(dead, 0.0, y / np.where(dead, 1.0, ybar))


def _multiplicative_update(x, norm, back):
    on = norm > 0
    return np.where(on, x / np.where(on, norm, 1.0) * back, 0.0)


def em_step(P: SparseMatrix, y, r, x, s) -> np.ndarray:
    """x <- x / s * P^T (y / (P x + r)), pixels with s = 0 held at 0."""
    back = P.rmatvec(_data_ratio(y, P.matvec(x) + r))
    return _multiplicative_update(x, s, back)


def _as_matrix(K) -> SparseMatrix | None:
    return K.K if isinstance(K, KernelModel) else K


def kem_step(P: SparseMatrix, K, y, r, alpha, w) -> np.ndarray:
    """alpha <- alpha / w * K^T P^T (y / (P K alpha + r))."""
    K = _as_matrix(K)
    back = K.rmatvec(P.rmatvec(_data_ratio(y, P.matvec(K.matvec(alpha)) + r)))
    return _multiplicative_update(alpha, w, back)


def _kernel_setup(P, K):
    K = _as_matrix(K)
    if K is None:
        K = SparseMatrix.identity(P.n_cols)
    if K.shape != (P.n_cols, P.n_cols):
        raise ReconError("kernel matrix does not match the image size")
    s = sensitivity(P)
    return K, s, K.rmatvec(s)


def _uniform_init(norm):
    return (norm > 0).astype(np.float64)


def run_kem(P: SparseMatrix, K, y, r, n_iter: int = 60, alpha0=None,
            checkpoints: Sequence[int] = ()) -> ReconResult:
    """Kernel EM from a uniform (1 on support) coefficient image."""
    y, r = np.asarray(y, dtype=np.float64), np.asarray(r, dtype=np.float64)
    K, _, w = _kernel_setup(P, K)
    alpha = _uniform_init(w) if alpha0 is None else np.asarray(alpha0, dtype=np.float64).copy()
    trace, snaps = [], {}
    for n in range(1, n_iter + 1):
        t0 = time.perf_counter()
        alpha = kem_step(P, K, y, r, alpha, w)
        x = K.matvec(alpha)
        trace.append(ReconState(n, log_likelihood(y, P.matvec(x) + r), wall_ms=1e3 * (time.perf_counter() - t0),
                                alpha=alpha, x=x))
        if n in checkpoints:
            snaps[n] = x.copy()
    return ReconResult(K.matvec(alpha), alpha, trace, snaps)


def run_mlem(P: SparseMatrix, y, r, n_iter: int = 60, x0=None, checkpoints: Sequence[int] = ()) -> ReconResult:
    y, r = np.asarray(y, dtype=np.float64), np.asarray(r, dtype=np.float64)
    s = sensitivity(P)
    x = _uniform_init(s) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    trace, snaps = [], {}
    for n in range(1, n_iter + 1):
        t0 = time.perf_counter()
        x = em_step(P, y, r, x, s)
        trace.append(ReconState(n, log_likelihood(y, P.matvec(x) + r), wall_ms=1e3 * (time.perf_counter() - t0),
                                alpha=x, x=x))
        if n in checkpoints:
            snaps[n] = x.copy()
    return ReconResult(x, x.copy(), trace, snaps)


# --- network helpers --------------------------------------------------------

def standardize_channels(z) -> np.ndarray:
    """Zero-mean, unit-variance per channel; constant channels are only centred."""
    z = np.asarray(z, dtype=np.float64)
    mean = z.reshape(z.shape[0], -1).mean(axis=1)
    std = z.reshape(z.shape[0], -1).std(axis=1)
    std = np.where(std > 0, std, 1.0)
    shape = (-1,) + (1,) * (z.ndim - 1)
    return (z - mean.reshape(shape)) / std.reshape(shape)


def count_level(y, r, w) -> float:
    """Uniform coefficient value whose projection matches the net recorded counts."""
    wsum = float(np.sum(w))
    if wsum <= 0:
        raise ReconError("zero total weight; no pixel is seen by the scanner")
    level = (float(np.sum(y)) - float(np.sum(r))) / wsum
    if level <= 0:
        level = float(np.sum(y)) / wsum
    return level if level > 0 else 1.0


def output_level(P: SparseMatrix, K: SparseMatrix, y, r, w, net: NetworkConfig) -> float:
    """Fixed multiplier on the raw network output.

    "peak" uses the maximum of a short kernel-EM pilot reconstruction so raw
    outputs in [0, 1] already span the image's dynamic range; reaching a hot
    spot from a mean-level scale would take thousands of Adam steps.
    """
    if not isinstance(net.scale_rule, str):
        return float(net.scale_rule)
    level = count_level(y, r, w)
    if net.scale_rule == "mean" or net.pilot_iters <= 0:
        return level
    pilot = run_kem(P, K, y, r, net.pilot_iters).alpha
    peak = float(pilot.max())
    return peak if peak > level else level


def build_network(z, cfg: ReconConfig, level: float, dims: int = 2) -> tuple[NetParams, np.ndarray]:
    """Seeded network whose raw output is multiplied by the data count level."""
    net = cfg.network
    z = standardize_channels(z)
    desc = NetDescriptor(in_channels=z.shape[0], base_channels=net.base_channels, scales=net.scales,
                         negative_slope=net.negative_slope, dims=dims, identity_bypass=net.identity_bypass,
                         dtype=net.dtype, output_scale=level,
                         spatial_shape=tuple(z.shape[1:]) if net.identity_bypass else None)
    return init_params(desc, cfg.seed), z


def fit_initial(params: NetParams, z, target, cfg: ReconConfig) -> NetParams:
    """Pre-fit the network to the uniform starting image (MSE)."""
    desc = params.descriptor
    if desc.identity_bypass:
        # the bypass image has an exact fit; Adam would leave ReLU-dead pixels at zero
        offset = np.asarray(target, dtype=np.float64) / desc.output_scale - np.asarray(z)[0].ravel()
        return params.with_flat(torch.tensor(offset, dtype=params.flat.dtype))
    if cfg.network.init_fit_iters <= 0:
        return params
    state = AdamState.for_params(params, lr=cfg.network.lr)
    return train_to_target(params, state, z, target, None, "MSE", cfg.network.init_fit_iters).params


# --- neural KEM / DIP by optimisation transfer --------------------------------

def _retry_state(state: AdamState, factor: float) -> AdamState:
    """Optimiser state for a guard retry: momentum dropped, step sizes kept, lr scaled.

    Stale momentum from the previous target is the usual reason training
    fails to raise Q; fresh second moments would instead make the first
    steps as large as ``lr`` in every parameter.
    """
    retry = state.copy()
    retry.m.zero_()
    retry.lr = state.lr * factor
    return retry


def run_neural_kem(P: SparseMatrix, K, y, r, z, cfg: ReconConfig, alpha0=None) -> ReconResult:
    """Alternate one KEM step on alpha = beta(theta|z) with Q-maximising network training.

    A monotonicity guard retrains with doubled subiterations (up to
    ``cfg.guard_retries`` times) when training fails to raise Q, and rejects
    the update if Q still drops by more than 1e-9 |Q|.
    """
    y, r = np.asarray(y, dtype=np.float64), np.asarray(r, dtype=np.float64)
    K, _, w = _kernel_setup(P, K)
    z = np.asarray(z, dtype=np.float64)
    params, zn = build_network(z, cfg, output_level(P, K, y, r, w, cfg.network), dims=z.ndim - 1)
    start = _uniform_init(w) if alpha0 is None else np.asarray(alpha0, dtype=np.float64)
    params = fit_initial(params, zn, start, cfg)
    state = AdamState.for_params(params, lr=cfg.network.lr)
    beta = predict(params, zn)
    trace, snaps = [], {}
    for n in range(1, cfg.outer_iters + 1):
        t0 = time.perf_counter()
        alpha_hat = kem_step(P, K, y, r, beta, w)
        q_before, _ = loss_Q(alpha_hat, beta, w)
        if not cfg.network.persistent_optimizer:
            state = AdamState.for_params(params, lr=cfg.network.lr)
        res = train_to_target(params, state, zn, alpha_hat, w, "Q", cfg.subiters)
        retries = 0
        while cfg.guard and res.best_value < q_before and retries < cfg.guard_retries:
            retries += 1
            again = train_to_target(params, _retry_state(state, cfg.network.retry_lr_factor**retries), zn,
                                    alpha_hat, w, "Q", cfg.subiters * 2**retries)
            if again.best_value > res.best_value:
                res = again
        tol = 1e-9 * abs(q_before)
        rejected = cfg.guard and res.best_value < q_before - tol
        state = res.state
        if rejected:
            log.warning("iteration %d: Q fell from %.6g to %.6g; keeping previous network", n, q_before, res.best_value)
        else:
            params = res.params
            beta = predict(params, zn)
        x = K.matvec(beta)
        trace.append(ReconState(n, log_likelihood(y, P.matvec(x) + r), q_before, res.best_value, retries,
                                bool(rejected), 1e3 * (time.perf_counter() - t0), beta, x))
        if n in cfg.checkpoints:
            snaps[n] = x.copy()
    return ReconResult(K.matvec(beta), beta, trace, snaps, params)


def run_dip_ot(P: SparseMatrix, y, r, z, cfg: ReconConfig, x0=None) -> ReconResult:
    return run_neural_kem(P, None, y, r, z, cfg, x0)


# --- DIP by ADMM ----------------------------------------------------------------

def admm_image_update(x_em, s, t, rho: float) -> np.ndarray:
    """Positive root of rho x^2 + (s - rho t) x - s x_em = 0, per pixel.

    This maximises the EM surrogate of the likelihood minus rho/2 (x - t)^2.
    The rationalised branch avoids cancellation when s >> rho t.
    """
    x_em, s, t = (np.asarray(a, dtype=np.float64) for a in (x_em, s, t))
    b = s - rho * t
    c = s * x_em
    root = np.sqrt(b * b + 4.0 * rho * c)
    with np.errstate(divide="ignore", invalid="ignore"):
        pos = np.where(b > 0, 2.0 * c / (b + root), (root - b) / (2.0 * rho))
    return np.where(s > 0, np.maximum(np.nan_to_num(pos), 0.0), 0.0)


def run_dip_admm(P: SparseMatrix, y, r, z, cfg: ReconConfig, x0=None) -> ReconResult:
    """DIP reconstruction by ADMM with an EM-based penalised image subproblem."""
    y, r = np.asarray(y, dtype=np.float64), np.asarray(r, dtype=np.float64)
    s = sensitivity(P)
    z = np.asarray(z, dtype=np.float64)
    params, zn = build_network(z, cfg, output_level(P, None, y, r, s, cfg.network), dims=z.ndim - 1)
    x = _uniform_init(s) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    params = fit_initial(params, zn, x, cfg)
    state = AdamState.for_params(params, lr=cfg.network.lr)
    beta = predict(params, zn)
    mu = np.zeros_like(x)
    trace, snaps = [], {}
    for n in range(1, cfg.outer_iters + 1):
        t0 = time.perf_counter()
        t = beta - mu
        for _ in range(cfg.admm_recon_subiters):
            x = admm_image_update(em_step(P, y, r, x, s), s, t, cfg.rho)
        res = train_to_target(params, state, zn, x + mu, None, "MSE", cfg.subiters)
        params, state = res.params, res.state
        beta = predict(params, zn)
        mu = mu + x - beta
        trace.append(ReconState(n, log_likelihood(y, P.matvec(beta) + r), wall_ms=1e3 * (time.perf_counter() - t0),
                                alpha=beta, x=beta))
        if n in cfg.checkpoints:
            snaps[n] = beta.copy()
    return ReconResult(beta, beta.copy(), trace, snaps, params)


def reconstruct(cfg: ReconConfig, P: SparseMatrix, y, r, K=None, z=None, x0=None) -> ReconResult:
    """Dispatch on ``cfg.method``; ``x0`` replaces the uniform start image."""
    if cfg.method in ("kem", "neural_kem") and K is None:
        raise ReconError(f"{cfg.method} needs a kernel matrix")
    if cfg.method in ("dip_ot", "neural_kem", "dip_admm") and z is None:
        raise ReconError(f"{cfg.method} needs network input images z")
    if cfg.method == "mlem":
        return run_mlem(P, y, r, cfg.outer_iters, x0, cfg.checkpoints)
    if cfg.method == "kem":
        return run_kem(P, K, y, r, cfg.outer_iters, x0, cfg.checkpoints)
    if cfg.method == "neural_kem":
        return run_neural_kem(P, K, y, r, z, cfg, x0)
    if cfg.method == "dip_ot":
        return run_dip_ot(P, y, r, z, cfg, x0)
    return run_dip_admm(P, y, r, z, cfg, x0)


# --- surrogate diagnostics ----------------------------------------------------

class SurrogateCheck:
    """Q and likelihood gaps around a reference network state theta_n.

    Used to verify minorisation Q(theta|theta_n) - Q(theta_n|theta_n) <=
    L(theta) - L(theta_n) and gradient matching at theta_n.
    """

    def __init__(self, params_n: NetParams, P: SparseMatrix, K, y, r, z):
        self.P = P
        self.K, _, self.w = _kernel_setup(P, K)
        self.y = np.asarray(y, dtype=np.float64)
        self.r = np.asarray(r, dtype=np.float64)
        self.z = z
        self.params_n = params_n
        beta_n = predict(params_n, z)
        self.alpha_hat = kem_step(P, self.K, self.y, self.r, beta_n, self.w)
        self.q_n = self.q(beta_n)
        self.l_n = self.loglik(beta_n)

    def q(self, beta) -> float:
        return loss_Q(self.alpha_hat, beta, self.w)[0]

    def loglik(self, beta) -> float:
        return log_likelihood(self.y, self.P.matvec(self.K.matvec(beta)) + self.r)

    def gaps(self, params: NetParams) -> tuple[float, float]:
        beta = predict(params, self.z)
        return self.q(beta) - self.q_n, self.loglik(beta) - self.l_n


def check_surrogate(params_n: NetParams, params: NetParams, P: SparseMatrix, K, y, r, z) -> tuple[float, float]:
    """(Q gap, likelihood gap) of ``params`` relative to ``params_n``."""
    return SurrogateCheck(params_n, P, K, y, r, z).gaps(params)
