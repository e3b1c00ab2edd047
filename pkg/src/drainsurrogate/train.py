"""Windowed training of the surrogate.

Losses and gradients are evaluated with torch (reverse mode through the
whole rollout, including the mass-balance layer). Parameters live as numpy
arrays on :class:`SurrogateModel`; torch is only the differentiation engine.
"""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .hifi import Trajectory
from .net import Network
from .rain import RunoffSeries
from .surrogate import DIVERGENCE_THRESHOLD, DivergenceError, SurrogateModel, rollout

log = logging.getLogger(__name__)

DIVERGENCE_PENALTY = 1e3
WINDOW_SIZES = (1, 10, 60, 120, 360)


@dataclass
class TrainConfig:
    window_size: int = 60
    epochs: int = 2000
    patience: int = 500
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    seed: int = 0
    batch_size: int | None = None  # windows per gradient step; None = full batch
    val_window: int | None = None  # defaults to window_size
    dtype: str = "float32"
    log_every: int = 0

    def __post_init__(self):
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("require lr_start >= lr_end > 0")
        if self.epochs < 1 or self.patience < 1:
            raise ValueError("epochs and patience must be positive")

    @property
    def validation_window(self) -> int:
        return self.val_window or self.window_size


@dataclass
class Window:
    start: int
    x0: np.ndarray  # labelled full state at the window start
    runoff: np.ndarray  # (W, N)
    targets: np.ndarray  # (W, 2N+M) labelled states after each step

    def __len__(self):
        return self.runoff.shape[0]


def make_windows(traj: Trajectory, runoff: RunoffSeries | np.ndarray | None = None,
                 window_size: int = 60) -> list[Window]:
    """Contiguous, non-overlapping windows; a trailing partial window is dropped."""
    rates = traj.runoff if runoff is None else (runoff.rates if isinstance(runoff, RunoffSeries) else np.asarray(runoff))
    T = rates.shape[0]
    if window_size < 1 or window_size > T:
        raise ValueError(f"window size {window_size} does not fit a trajectory of {T} steps")
    return [Window(s, traj.states[s], rates[s:s + window_size], traj.states[s + 1:s + window_size + 1])
            for s in range(0, T - window_size + 1, window_size)]


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Exponential decay from lr_start at epoch 0 to lr_end at the final epoch."""
    f = min(max(epoch / cfg.epochs, 0.0), 1.0)
    return cfg.lr_start ** (1.0 - f) * cfg.lr_end ** f


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params) -> AdamState:
        return cls([p * 0 for p in params], [p * 0 for p in params])


def adam_step(opt: AdamState, params: list, grads: list, lr: float) -> list:
    """Bias-corrected Adam update; works on numpy arrays or torch tensors."""
    if len(params) != len(grads):
        raise ValueError("parameter and gradient lists differ in length")
    opt.step += 1
    c1 = 1.0 - opt.beta1 ** opt.step
    c2 = 1.0 - opt.beta2 ** opt.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch for parameter {i}")
        opt.m[i] = opt.beta1 * opt.m[i] + (1.0 - opt.beta1) * g
        opt.v[i] = opt.beta2 * opt.v[i] + (1.0 - opt.beta2) * g * g
        upd = lr * (opt.m[i] / c1) / ((opt.v[i] / c2) ** 0.5 + opt.eps)
        new = p - upd
        if not bool((new == new).all()) or not bool((abs(new) < float("inf")).all()):
            raise FloatingPointError(f"non-finite Adam update for parameter {i}")
        out.append(new)
    return out


# ---------------------------------------------------------------- torch loss


class _Batch:
    """Windows of equal length stacked into tensors."""

    def __init__(self, m: SurrogateModel, windows: list[Window], dtype):
        sc = m.scaler
        S = m.n_states
        kw = {"dtype": dtype}
        x0 = np.stack([w.x0[:S] for w in windows])
        raw = np.stack([w.runoff for w in windows]).transpose(1, 0, 2)  # (W, B, N)
        tgt = np.stack([w.targets for w in windows]).transpose(1, 0, 2)  # (W, B, 2N+M)
        self.size = len(windows)
        self.steps = raw.shape[0]
        self.x0 = torch.tensor(sc.scale(x0, slice(0, S)), **kw)
        self.r = torch.tensor(sc.scale_runoff(raw), **kw)
        self.r_raw = torch.tensor(raw, **kw)
        self.target = torch.tensor(sc.scale(tgt), **kw)


class _Consts:
    def __init__(self, m: SurrogateModel, dtype):
        N, M = m.network.n_nodes, m.network.n_links
        kw = {"dtype": dtype}
        sc = m.scaler
        self.S = m.n_states
        self.N, self.M = N, M
        self.constrained = m.constrained
        self.n_prior = len(m.prior)
        self.q_lo = torch.tensor(sc.lo[N:N + M], **kw)
        self.q_span = torch.tensor(sc.span[N:N + M], **kw)
        self.w_lo = torch.tensor(sc.lo[N + M:], **kw)
        self.w_span = torch.tensor(sc.span[N + M:], **kw)
        C = m.network.incidence_matrix()
        C[m.network.outlet_index] = 0.0
        self.incidence_t = torch.tensor(C.T, **kw)  # (M, N)
        mask = np.ones(N)
        mask[m.network.outlet_index] = 0.0
        self.not_outlet = torch.tensor(mask, **kw)


def _mlp(params, x):
    n = len(params) // 2
    for i in range(n - 1):
        x = torch.tanh(torch.addmm(params[2 * i + 1], x, params[2 * i]))
    return torch.addmm(params[-1], x, params[-2])


def _window_losses(params, batch: _Batch, c: _Consts):
    """Per-window MSE over every step and every labelled column (scaled)."""
    prior, residue = params[:2 * c.n_prior], params[2 * c.n_prior:]
    x = batch.x0
    sq = torch.zeros(batch.size, dtype=x.dtype)
    peak = torch.zeros(batch.size, dtype=x.dtype)
    for t in range(batch.steps):
        x = _mlp(prior, x) + _mlp(residue, torch.cat([x, batch.r[t]], dim=1))
        peak = torch.maximum(peak, x.detach().abs().amax(dim=1))
        if c.constrained:
            q_raw = x[:, c.N:c.N + c.M] * c.q_span + c.q_lo
            qw = torch.relu(q_raw @ c.incidence_t + batch.r_raw[t]) * c.not_outlet
            pred = torch.cat([x, (qw - c.w_lo) / c.w_span], dim=1)
        else:
            pred = x
        sq = sq + ((pred - batch.target[t]) ** 2).mean(dim=1)
    mse = sq / batch.steps
    diverged = ~(peak <= DIVERGENCE_THRESHOLD)
    return torch.where(diverged, torch.full_like(mse, DIVERGENCE_PENALTY), mse), diverged


def _flat_params(m: SurrogateModel):
    return [a for W, b in m.parameters for a in (W, b)]


def _to_torch(arrays, dtype, grad=False):
    return [torch.tensor(a, dtype=dtype, requires_grad=grad) for a in arrays]


def _to_model(m: SurrogateModel, flat) -> SurrogateModel:
    arrays = [t.detach().cpu().numpy().astype(float) for t in flat]
    return m.with_parameters([(arrays[2 * i], arrays[2 * i + 1]) for i in range(len(arrays) // 2)])


def loss_gradient(m: SurrogateModel, windows: list[Window], net: Network | None = None,
                  dtype=torch.float64) -> tuple[float, list]:
    """Batch loss and its exact gradient, as ``[(dW, db), ...]`` matching ``m.parameters``."""
    c = _Consts(m, dtype)
    params = _to_torch(_flat_params(m), dtype, grad=True)
    total, weight = 0.0, 0
    grads = [torch.zeros_like(p) for p in params]
    for batch in _group(m, windows, dtype):
        losses, _ = _window_losses(params, batch, c)
        part = losses.sum() * batch.steps
        g = torch.autograd.grad(part, params, allow_unused=True)
        grads = [a + (b if b is not None else 0) for a, b in zip(grads, g)]
        total += float(part.detach())
        weight += batch.size * batch.steps
    grads = [g / weight for g in grads]
    for g in grads:
        if not torch.isfinite(g).all():
            raise FloatingPointError("non-finite gradient")
    flat = [g.numpy() for g in grads]
    return total / weight, [(flat[2 * i], flat[2 * i + 1]) for i in range(len(flat) // 2)]


def _group(m, windows, dtype):
    """Stack windows by length; the loss weights each window by its step count."""
    by_len = {}
    for w in windows:
        by_len.setdefault(len(w), []).append(w)
    return [_Batch(m, ws, dtype) for _, ws in sorted(by_len.items())]


def window_loss(m: SurrogateModel, w: Window, net: Network | None = None) -> float:
    """MSE of a labelled-start rollout against the window labels, in scaled space.

    Evaluated with the numpy rollout; a diverging rollout scores the fixed
    penalty instead of a non-finite value.
    """
    try:
        pred = rollout(m, w.x0, w.runoff)
    except DivergenceError as exc:
        log.debug("window at %d diverged: %s", w.start, exc)
        return DIVERGENCE_PENALTY
    diff = m.scaler.scale(pred.states[1:]) - m.scaler.scale(w.targets)
    return float(np.mean(diff ** 2))


def batch_loss(m: SurrogateModel, windows: list[Window]) -> float:
    """Step-weighted mean of window losses (independent of window order)."""
    steps = np.array([len(w) for w in windows], dtype=float)
    losses = np.array([window_loss(m, w) for w in windows])
    return float(np.sum(losses * steps) / steps.sum())


# ---------------------------------------------------------------- training loop


@dataclass
class TrainReport:
    config: dict
    seed: int
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")
    epochs_run: int = 0
    stopped_early: bool = False
    wall_time: float = 0.0
    diverged_windows: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)


def validation_loss(params, batches, consts) -> float:
    """Step-weighted validation MSE; module-level so tests can stall it."""
    with torch.no_grad():
        total, weight = 0.0, 0
        for b in batches:
            losses, _ = _window_losses(params, b, consts)
            total += float(losses.sum()) * b.steps
            weight += b.size * b.steps
    return total / weight


def train(net: Network, labels_train: Trajectory, labels_val: Trajectory, model0: SurrogateModel,
          cfg: TrainConfig, runoff_train=None, runoff_val=None) -> tuple[SurrogateModel, TrainReport]:
    """Fit prior and residue parameters with Adam on windowed rollouts.

    The returned model carries the parameters of the epoch with the lowest
    validation loss. Training stops once the validation loss has not
    improved for ``cfg.patience`` epochs.
    """
    dtype = getattr(torch, cfg.dtype)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    consts = _Consts(model0, dtype)
    train_windows = make_windows(labels_train, runoff_train, cfg.window_size)
    val_batches = _group(model0, make_windows(labels_val, runoff_val, cfg.validation_window), dtype)
    full_batch = _Batch(model0, train_windows, dtype)

    params = _to_torch(_flat_params(model0), dtype, grad=True)
    opt = AdamState.zeros_like([p.detach() for p in params])
    report = TrainReport(config=asdict(cfg), seed=cfg.seed)
    best = [p.detach().clone() for p in params]
    since_best = 0
    t0 = time.perf_counter()
    n = len(train_windows)
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        if cfg.batch_size and cfg.batch_size < n:
            order = rng.permutation(n)
            chunks = [order[i:i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
        else:
            chunks = [None]
        epoch_loss, n_div = 0.0, 0
        for idx in chunks:
            batch = full_batch if idx is None else _subset(full_batch, idx)
            losses, diverged = _window_losses(params, batch, consts)
            loss = losses.mean()
            grads = torch.autograd.grad(loss, params)
            if not all(torch.isfinite(g).all() for g in grads):
                raise FloatingPointError(f"non-finite gradient in epoch {epoch}")
            new = adam_step(opt, [p.detach() for p in params], list(grads), lr)
            params = [p.requires_grad_(True) for p in new]
            epoch_loss += float(losses.detach().sum())
            n_div += int(diverged.sum())
        epoch_loss /= n
        if n_div == n:
            report.wall_time = time.perf_counter() - t0
            report.epochs_run = epoch + 1
            err = DivergenceError(epoch, -1, float("inf"))
            err.report = report  # partial report for the caller
            raise err
        vl = validation_loss(params, val_batches, consts)
        report.train_loss.append(epoch_loss)
        report.val_loss.append(vl)
        report.lr.append(lr)
        if n_div:
            report.diverged_windows.append((epoch, n_div))
        if vl < report.best_val_loss:
            report.best_val_loss, report.best_epoch = vl, epoch
            best = [p.detach().clone() for p in params]
            since_best = 0
        else:
            since_best += 1
        report.epochs_run = epoch + 1
        if cfg.log_every and epoch % cfg.log_every == 0:
            log.info("epoch %d lr %.2e train %.3e val %.3e", epoch, lr, epoch_loss, vl)
        if since_best >= cfg.patience:
            report.stopped_early = True
            break
    report.wall_time = time.perf_counter() - t0
    model = _to_model(model0, best)
    model.seed = cfg.seed
    return model, report


def _subset(batch: _Batch, idx) -> _Batch:
    sub = copy.copy(batch)
    t = torch.as_tensor(idx)
    sub.size = len(idx)
    sub.x0 = batch.x0[t]
    sub.r = batch.r[:, t]
    sub.r_raw = batch.r_raw[:, t]
    sub.target = batch.target[:, t]
    return sub
