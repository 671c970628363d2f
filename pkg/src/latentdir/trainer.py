"""Mini-batch training of direction models against a frozen generator."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from .directions import KINDS, NONLINEAR, DirectionSet, init_direction_models, update_running_stats
from .generators import GeneratorSpec, sample_latents
from .objective import DEFAULT_TAU, contrastive_loss_expr, divergence_expr

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, step: int, direction: int | None = None):
        self.step = step
        self.direction = direction
        super().__init__(message)


@dataclass
class TrainConfig:
    batch_size: int = 16
    K: int = 32
    kind: str = "global"
    hidden_layers: int = 1
    tau: float = DEFAULT_TAU
    alpha: float = 1.0
    latent_dim: int | None = None
    truncation: float = 0.4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    steps: int = 1000
    seed: int = 0
    target_layer: str | None = None

    def validate(self) -> "TrainConfig":
        checks = [
            ("batch_size", isinstance(self.batch_size, int) and self.batch_size >= 2, "must be an integer >= 2"),
            ("K", isinstance(self.K, int) and self.K >= 2, "must be an integer >= 2"),
            ("kind", self.kind in KINDS, f"must be one of {KINDS}"),
            ("hidden_layers", isinstance(self.hidden_layers, int) and 1 <= self.hidden_layers <= 3,
             "must be an integer in 1..3"),
            ("tau", _num(self.tau) and self.tau > 0, "must be positive"),
            ("alpha", _num(self.alpha) and self.alpha != 0 and np.isfinite(self.alpha), "must be finite and non-zero"),
            ("latent_dim", self.latent_dim is None or (isinstance(self.latent_dim, int) and self.latent_dim >= 2),
             "must be an integer >= 2"),
            ("truncation", _num(self.truncation) and self.truncation > 0, "must be positive"),
            ("lr", _num(self.lr) and self.lr > 0, "must be positive"),
            ("beta1", _num(self.beta1) and 0 < self.beta1 < 1, "must lie in (0, 1)"),
            ("beta2", _num(self.beta2) and 0 < self.beta2 < 1, "must lie in (0, 1)"),
            ("adam_eps", _num(self.adam_eps) and self.adam_eps > 0, "must be positive"),
            ("steps", isinstance(self.steps, int) and self.steps >= 1, "must be an integer >= 1"),
            ("seed", isinstance(self.seed, int) and self.seed >= 0, "must be a non-negative integer"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(name, f"{msg}, got {getattr(self, name)!r}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


BIGGAN_REGIME = dict(batch_size=16, K=32, truncation=0.4)
STYLEGAN2_REGIME = dict(batch_size=8, K=100, truncation=0.7)


# -- Adam ------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update.  Returns new params and state; inputs are not mutated."""
    if not (0 < beta1 < 1 and 0 < beta2 < 1):
        raise ValueError("beta1 and beta2 must lie in (0, 1)")
    if set(params) != set(grads):
        raise ValueError("params and grads have different keys")
    t = state.t + 1
    new_p, new_m, new_v = {}, {}, {}
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ValueError(f"{key}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(key, np.zeros_like(p))
        v = state.v.get(key, np.zeros_like(p))
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * (g * g)
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new_p[key] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[key], new_v[key] = m, v
    return new_p, AdamState(new_m, new_v, t)


# -- training --------------------------------------------------------------------

@dataclass
class LossTrace:
    loss: list[float] = field(default_factory=list)
    ms: list[float] = field(default_factory=list)
    config_digest: str = ""
    param_digest: str = ""

    def to_ndjson(self, timing: bool = True) -> str:
        lines = []
        for step, loss in enumerate(self.loss):
            ms = round(self.ms[step], 3) if timing else None
            lines.append(json.dumps({"step": step, "loss": loss, "ms": ms}))
        return "\n".join(lines) + "\n"


def param_digest(dset: DirectionSet) -> str:
    h = hashlib.sha256()
    for m in dset.models:
        for key in sorted(m.params):
            h.update(key.encode())
            h.update(np.ascontiguousarray(m.params[key]).tobytes())
        for key in sorted(m.buffers):
            h.update(np.ascontiguousarray(m.buffers[key]).tobytes())
    return h.hexdigest()


class StepGraph:
    """Loss graph for a fixed (generator, direction set, config); rebinds each step."""

    def __init__(self, gen: GeneratorSpec, dset: DirectionSet, config: TrainConfig):
        self.dset = dset
        self.config = config
        div = divergence_expr(gen, dset, dm.input("z"), config.alpha, training=True)
        self.bn_inputs = div.bn_inputs
        self.loss, self.per_code = contrastive_loss_expr(div.f, config.batch_size, dset.K, config.tau)

    def run(self, batch: np.ndarray) -> tuple[float, dict[str, np.ndarray], dm.Trace]:
        params = self.dset.flat_params()
        tr = dm.trace(self.loss, dict(params, z=batch))
        grads = dm.backward(tr, list(params))
        return float(tr.output), grads, tr


def _check_compat(config: TrainConfig, gen: GeneratorSpec, dset: DirectionSet | None = None):
    if config.latent_dim is not None and config.latent_dim != gen.latent_dim:
        raise ConfigError("latent_dim", f"{config.latent_dim} does not match generator latent dim {gen.latent_dim}")
    if dset is not None and (dset.d != gen.latent_dim or dset.K != config.K):
        raise ConfigError("K", f"direction set has K={dset.K}, d={dset.d}; config/generator expect "
                               f"K={config.K}, d={gen.latent_dim}")


def training_step(gen: GeneratorSpec, dset: DirectionSet, config: TrainConfig,
                  rng: np.random.Generator) -> tuple[float, dict[str, np.ndarray]]:
    """Draw a fresh batch and return the loss and its gradient w.r.t. every direction parameter."""
    config.validate()
    _check_compat(config, gen, dset)
    batch = sample_latents(rng, config.batch_size, gen.latent_dim, config.truncation)
    loss, grads, _ = StepGraph(gen, dset, config).run(batch)
    return loss, grads


def _resolve_generator(config: TrainConfig, gen: GeneratorSpec) -> GeneratorSpec:
    if config.target_layer is not None and config.target_layer != gen.target_layer:
        return gen.with_target(config.target_layer)
    return gen


def train(config: TrainConfig, gen: GeneratorSpec, init: DirectionSet | None = None,
          callback=None) -> tuple[DirectionSet, LossTrace]:
    config.validate()
    _check_compat(config, gen)
    gen = _resolve_generator(config, gen)
    dset = init.copy() if init is not None else init_direction_models(
        config.kind, config.K, gen.latent_dim, config.seed, config.hidden_layers)
    _check_compat(config, gen, dset)
    # batches come from a stream independent of the initialization stream
    rng = np.random.default_rng([config.seed, 1])
    graph = StepGraph(gen, dset, config)
    state = AdamState()
    trace = LossTrace(config_digest=config.digest())
    for step in range(config.steps):
        t0 = time.perf_counter()
        batch = sample_latents(rng, config.batch_size, gen.latent_dim, config.truncation)
        try:
            loss, grads, tr = graph.run(batch)
        except dm.DegenerateDirectionError as exc:
            raise TrainingAborted(f"step {step}: {exc}", step, exc.index) from None
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            per_code = tr[graph.per_code]
            raise TrainingAborted(
                f"step {step}: non-finite loss {loss!r} "
                f"({int(np.sum(~np.isfinite(per_code)))} of {per_code.size} per-code terms non-finite)", step)
        if dset.kind == NONLINEAR:
            for k, layer, node in graph.bn_inputs:
                update_running_stats(dset.models[k], layer, tr[node])
        params, state = adam_step(dset.flat_params(), grads, state, config.lr,
                                  config.beta1, config.beta2, config.adam_eps)
        dset.set_flat_params(params)
        trace.loss.append(loss)
        trace.ms.append((time.perf_counter() - t0) * 1000.0)
        if callback is not None:
            callback(step, loss, dset)
        if step % 500 == 0:
            log.debug("step %d loss %.6f", step, loss)
    dset.metadata = {"steps": config.steps, "config_digest": trace.config_digest}
    trace.param_digest = param_digest(dset)
    return dset, trace
