"""SGD / DP-SGD training loops and mask-set ensembles.

Randomness is drawn from counter-based streams keyed by the model seed:
``("shuffle", epoch)`` for batch order and ``("dp-noise", step)`` for the
Gaussian noise, so a run is reproducible regardless of which process (or how
many workers) executes it.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from curvlink import nn, privacy, rng
from curvlink.data import MaskSet
from curvlink.errors import ConfigurationError, CurvlinkError, DivergenceError, NumericError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DpConfig:
    clip_norm: float = 1.0
    noise_multiplier: Optional[float] = None
    target_epsilon: Optional[float] = None
    delta: float = 1e-5
    orders: Optional[tuple] = None
    clamp_noise_to_bracket: bool = False

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise ConfigurationError("clip_norm must be > 0")
        if (self.noise_multiplier is None) == (self.target_epsilon is None):
            raise ConfigurationError("set exactly one of noise_multiplier / target_epsilon")
        if self.noise_multiplier is not None and not self.noise_multiplier > 0:
            raise ConfigurationError("noise_multiplier must be > 0")
        if self.target_epsilon is not None and not self.target_epsilon > 0:
            raise ConfigurationError("target_epsilon must be > 0")
        if not 0.0 < self.delta < 1.0:
            raise ConfigurationError("delta must lie in (0, 1)")
        if self.orders is not None:
            object.__setattr__(self, "orders", tuple(float(a) for a in self.orders))

    @property
    def order_grid(self):
        return self.orders if self.orders is not None else privacy.DEFAULT_ORDERS


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.05
    lr_drop_epochs: tuple = (18, 24)
    lr_drop_factor: float = 0.1
    seed: int = 0
    dp: Optional[DpConfig] = None
    # optional hard cap on optimizer steps (budget-truncated DP sweeps)
    max_steps: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "lr_drop_epochs", tuple(int(e) for e in self.lr_drop_epochs))
        if isinstance(self.dp, dict):
            object.__setattr__(self, "dp", DpConfig(**self.dp))
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.lr < 0:
            raise ConfigurationError("lr must be >= 0")
        if self.max_steps is not None and (int(self.max_steps) != self.max_steps or self.max_steps < 0):
            raise ConfigurationError("max_steps must be a non-negative integer")
        drops = self.lr_drop_epochs
        if any(b <= a for a, b in zip(drops, drops[1:])):
            raise ConfigurationError("lr_drop_epochs must be strictly increasing")

    def lr_at(self, epoch):
        n = sum(1 for e in self.lr_drop_epochs if epoch >= e)
        return self.lr * self.lr_drop_factor**n

    def to_dict(self):
        return asdict(self)

    def digest(self):
        return _digest(self.to_dict())


PRESETS = {
    "desk": TrainConfig(epochs=30, batch_size=32, lr=0.05, lr_drop_epochs=(18, 24), lr_drop_factor=0.1),
    "paper-cifar": TrainConfig(epochs=20, batch_size=128, lr=0.001, lr_drop_epochs=(12, 16),
                               lr_drop_factor=0.1),
}


def _digest(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=list).encode("utf-8")).hexdigest()[:16]


@dataclass
class TrainResult:
    model: nn.Model
    history: list
    budget: Optional[privacy.PrivacyBudget] = None


def _param_views(spec, theta):
    """(W, b) views into a flat parameter vector, same order as nn.flatten."""
    out, pos = [], 0
    for fan_in, fan_out in zip(spec.layer_dims[:-1], spec.layer_dims[1:]):
        W = theta[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = theta[pos:pos + fan_out]
        pos += fan_out
        out.append((W, b))
    return out


def _epoch_stats(spec, weights, X, y):
    out, _ = nn._forward(weights, spec.activation, X)
    loss, _ = nn._loss_and_dlogits(spec, out, y, need_grad=False)
    return float(loss.mean()), float(np.mean(np.argmax(out, axis=1) == y))


def train(spec, S, cfg, mask_id=None):
    """Plain mini-batch SGD.  Returns a :class:`TrainResult`."""
    if cfg.dp is not None:
        raise ConfigurationError("cfg.dp is set; use dp_train")
    return _run(spec, S, cfg, mask_id)


def dp_train(spec, S, cfg, mask_id=None):
    """DP-SGD with per-sample clipping and Gaussian noise."""
    if cfg.dp is None:
        raise ConfigurationError("dp_train needs cfg.dp")
    return _run(spec, S, cfg, mask_id)


def _run(spec, S, cfg, mask_id):
    m = len(S)
    if m == 0:
        raise ConfigurationError("empty training set")
    if S.dim != spec.input_dim:
        raise ConfigurationError(f"data dim {S.dim} != model input dim {spec.input_dim}")
    X, y = S.X, S.y
    init = nn.mlp_init(spec, cfg.seed)
    theta = init.flat().copy()
    weights = _param_views(spec, theta)
    history = []
    dp = cfg.dp
    B = min(cfg.batch_size, m)

    accountant = None
    max_steps = None
    if dp is not None:
        steps_per_epoch = m // B
        planned = steps_per_epoch * cfg.epochs
        q = B / m
        sigma = dp.noise_multiplier
        if sigma is None:
            sigma = privacy.calibrate_noise(dp.target_epsilon, dp.delta, q, planned, dp.order_grid,
                                            clamp_to_bracket=dp.clamp_noise_to_bracket)
        accountant = privacy.RdpAccountant(q, sigma, dp.delta, dp.order_grid)
        if dp.target_epsilon is not None:
            max_steps = _max_steps_within(accountant, dp.target_epsilon, planned)
    else:
        steps_per_epoch = math.ceil(m / B)
    if cfg.max_steps is not None:
        max_steps = cfg.max_steps if max_steps is None else min(max_steps, cfg.max_steps)

    step = 0
    stop_reason = "epochs"
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        perm = rng.stream(cfg.seed, "shuffle", epoch).permutation(m)
        batch_losses = []
        for bi in range(steps_per_epoch):
            if max_steps is not None and step >= max_steps:
                stop_reason = "budget"
                break
            idx = perm[bi * B:(bi + 1) * B]
            try:
                if dp is None:
                    loss, grads = nn._batch_grads(spec, weights, X[idx], y[idx])
                    if not np.all(np.isfinite(loss)):
                        raise NumericError("non-finite loss")
                    for (W, b), (dW, db) in zip(weights, grads):
                        W -= lr * dW
                        b -= lr * db
                else:
                    loss, G = nn._per_sample_grads(spec, weights, X[idx], y[idx])
                    if not np.all(np.isfinite(loss)):
                        raise NumericError("non-finite loss")
                    norms = np.sqrt(np.einsum("ij,ij->i", G, G))
                    G *= np.minimum(1.0, dp.clip_norm / np.maximum(norms, 1e-300))[:, None]
                    clipped = np.sqrt(np.einsum("ij,ij->i", G, G))
                    assert np.all(clipped <= dp.clip_norm * (1.0 + 1e-9)), "clipping failed"
                    noise = rng.stream(cfg.seed, "dp-noise", step).standard_normal(theta.size)
                    g = (G.sum(axis=0) + accountant.sigma * dp.clip_norm * noise) / len(idx)
                    theta -= lr * g
                    accountant.step()
            except NumericError as exc:
                raise DivergenceError(f"training diverged at epoch {epoch}, batch {bi}: {exc}",
                                      epoch=epoch, batch=bi) from exc
            batch_losses.append(float(loss.mean()))
            step += 1
        if stop_reason == "budget" and not batch_losses:
            break
        train_loss, train_acc = _epoch_stats(spec, weights, X, y)
        history.append({"epoch": epoch, "lr": lr, "steps": step, "batch_loss": float(np.mean(batch_losses)),
                        "train_loss": train_loss, "train_acc": train_acc})
        if stop_reason == "budget":
            break

    provenance = {"seed": int(cfg.seed), "mask_id": mask_id,
                  "train_config_digest": _digest({"spec": spec.to_dict(), "cfg": cfg.to_dict()})}
    model = nn.Model(spec, tuple((W.copy(), b.copy()) for W, b in weights), provenance)
    budget = None
    if accountant is not None:
        budget = accountant.budget(stop_reason)
        log.debug("dp_train stopped by %s after %d steps, eps=%.4g", stop_reason, step, budget.epsilon)
    return TrainResult(model, history, budget)


def budget_truncation(m, cfg, eps_grid):
    """Noise multiplier and per-eps step caps for a budget-truncated sweep.

    ``sigma`` is calibrated so the full schedule of ``cfg`` spends exactly
    ``max(eps_grid)``; a run at a smaller ``eps`` uses the same ``sigma`` and
    stops at the last step whose accumulated epsilon stays within ``eps``.
    Returns ``(sigma, {eps: steps})``.
    """
    dp = cfg.dp
    if dp is None:
        raise ConfigurationError("budget_truncation needs cfg.dp")
    B = min(cfg.batch_size, m)
    q = B / m
    planned = (m // B) * cfg.epochs
    sigma = privacy.calibrate_noise(max(eps_grid), dp.delta, q, planned, dp.order_grid,
                                    clamp_to_bracket=dp.clamp_noise_to_bracket)
    acc = privacy.RdpAccountant(q, sigma, dp.delta, dp.order_grid)
    return sigma, {float(e): _max_steps_within(acc, float(e), planned) for e in eps_grid}


def _max_steps_within(accountant, target, planned):
    """Largest step count <= planned whose epsilon stays within target."""
    if accountant.epsilon(planned) <= target:
        return planned
    lo, hi = 0, planned
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if accountant.epsilon(mid) <= target:
            lo = mid
        else:
            hi = mid
    return lo


# ----------------------------------------------------------------------------
# ensembles


@dataclass(eq=False)
class EnsembleRecord:
    models: list
    masks: MaskSet
    correct: np.ndarray
    config_digest: str
    budgets: list = field(default_factory=list)
    histories: list = field(default_factory=list)

    def __post_init__(self):
        K, m = self.masks.masks.shape
        if self.correct.shape != (K, m) or len(self.models) != K:
            raise ConfigurationError("ensemble record dimensions disagree")
        for k, model in enumerate(self.models):
            if model.provenance.get("mask_id") != self.masks.mask_id(k):
                raise ConfigurationError(f"model {k} provenance does not match its mask")

    @property
    def K(self):
        return len(self.models)

    def select(self, ks):
        """Sub-ensemble made of members ``ks`` (used for split-half checks)."""
        ks = list(ks)
        masks = MaskSet(self.masks.masks[ks], self.masks.ratio, self.masks.seed, self.masks.frozen_core)
        models = [nn.Model(m.spec, m.weights, dict(m.provenance, mask_id=masks.mask_id(j)))
                  for j, m in enumerate(self.models[i] for i in ks)]
        return EnsembleRecord(models, masks, self.correct[ks], self.config_digest,
                              [self.budgets[i] for i in ks] if self.budgets else [],
                              [self.histories[i] for i in ks] if self.histories else [])


def member_config(cfg, k):
    return replace(cfg, seed=int(cfg.seed) ^ int(k))


def _train_member(args):
    spec, S, mask, cfg, k, mask_id = args
    cfg_k = member_config(cfg, k)
    try:
        fn = dp_train if cfg.dp is not None else train
        res = fn(spec, S.subset(mask), cfg_k, mask_id=mask_id)
    except CurvlinkError as exc:
        raise type(exc)(f"ensemble member {k} (mask {mask_id}) failed: {exc}") from exc
    correct = nn.predict(res.model, S.X) == S.y
    return res.model, correct, res.budget, res.history


def map_tasks(fn, tasks, workers):
    """Order-preserving map over a process pool (inline when workers <= 1)."""
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * workers))))


def train_ensemble(spec, S, masks, cfg, workers=1):
    if masks.m != len(S):
        raise ConfigurationError(f"mask length {masks.m} != dataset size {len(S)}")
    if masks.K < 2:
        raise ConfigurationError("ensemble needs K >= 2")
    tasks = [(spec, S, masks.masks[k], cfg, k, masks.mask_id(k)) for k in range(masks.K)]
    results = map_tasks(_train_member, tasks, workers)
    models = [r[0] for r in results]
    correct = np.stack([r[1] for r in results])
    budgets = [r[2] for r in results if r[2] is not None]
    digest = _digest({"spec": spec.to_dict(), "cfg": cfg.to_dict(), "data": S.genspec_digest,
                      "masks": hashlib.sha256(np.packbits(masks.masks).tobytes()).hexdigest()})
    return EnsembleRecord(models, masks, correct, digest, budgets, [r[3] for r in results])
