"""Frozen differentiable generators with a selectable target feature layer.

Two kinds exist.  ``synthetic-mixing`` maps ``z`` to ``tanh(gamma * (W z + b))``
where ``W`` has orthonormal rows, so the latent direction that moves feature
``j`` alone is known exactly (row ``j`` of ``W``).  ``mlp-file`` loads a
stack of dense layers from JSON and exposes any named layer as the target.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffmath as dm

SYNTHETIC = "synthetic-mixing"
MLP_FILE = "mlp-file"
ACTIVATIONS = ("tanh", "relu", "none")


class GeneratorError(ValueError):
    pass


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Layer:
    name: str
    weights: np.ndarray  # (rows, cols): maps cols -> rows
    bias: np.ndarray
    activation: str

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class GeneratorSpec:
    kind: str
    latent_dim: int
    layers: tuple[Layer, ...]
    target_layer: str
    grid: int = 64
    # synthetic-mixing only
    mixing: np.ndarray | None = None
    bias: np.ndarray | None = None
    gamma: float | None = None
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def d(self) -> int:
        return self.latent_dim

    @property
    def layer_names(self) -> list[str]:
        return [layer.name for layer in self.layers]

    @property
    def feature_dim(self) -> int:
        return self.layers[self._target_index()].out_dim

    def _target_index(self) -> int:
        return self.layer_names.index(self.target_layer)

    def with_target(self, name: str) -> "GeneratorSpec":
        if name not in self.layer_names:
            raise GeneratorError(f"unknown layer {name!r}; available: {', '.join(self.layer_names)}")
        return GeneratorSpec(self.kind, self.latent_dim, self.layers, name, self.grid,
                             self.mixing, self.bias, self.gamma, dict(self.meta))

    def digest(self) -> str:
        h = hashlib.sha256()
        for layer in self.layers:
            h.update(layer.weights.tobytes())
            h.update(layer.bias.tobytes())
        return h.hexdigest()


def make_synthetic_generator(seed: int, d: int, F: int, grid: int = 64, gamma: float = 2.0,
                             bias=None, mixing=None) -> GeneratorSpec:
    if not 2 <= F <= d:
        raise GeneratorError(f"need 2 <= F <= d, got F={F}, d={d}")
    if grid < 16:
        raise GeneratorError(f"grid must be >= 16, got {grid}")
    if gamma < 1:
        raise GeneratorError(f"gamma must be >= 1, got {gamma}")
    if mixing is None:
        rng = np.random.default_rng(seed)
        q, r = np.linalg.qr(rng.standard_normal((d, F)))
        # sign-fix so the factorization is unique
        W = (q * np.sign(np.diag(r))).T
    else:
        W = np.asarray(mixing, dtype=np.float64)
        if W.shape != (F, d) or not np.allclose(W @ W.T, np.eye(F), atol=1e-10):
            raise GeneratorError("mixing matrix must be F x d with orthonormal rows")
    b = np.zeros(F) if bias is None else np.broadcast_to(np.asarray(bias, dtype=np.float64), (F,))
    W, b = _frozen(W), _frozen(b)
    layer = Layer("features", _frozen(gamma * W), _frozen(gamma * b), "tanh")
    return GeneratorSpec(SYNTHETIC, d, (layer,), "features", grid, W, b, float(gamma),
                         {"seed": seed, "d": d, "F": F, "grid": grid, "gamma": float(gamma)})


def with_bias(gen: GeneratorSpec, bias) -> GeneratorSpec:
    """Same mixing matrix, different bias: a sibling generator for transfer tests."""
    _require_synthetic(gen)
    F, d = gen.mixing.shape
    out = make_synthetic_generator(gen.meta["seed"], d, F, gen.grid, gen.gamma, bias=bias, mixing=gen.mixing)
    return out


def sample_latent(rng: np.random.Generator, d: int, truncation: float) -> np.ndarray:
    """Standard normal components, each redrawn until |x| <= 2, then scaled by ``truncation``."""
    if truncation <= 0:
        raise ValueError(f"truncation must be positive, got {truncation}")
    x = rng.standard_normal(d)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * truncation


def sample_latents(rng: np.random.Generator, n: int, d: int, truncation: float) -> np.ndarray:
    return np.stack([sample_latent(rng, d, truncation) for _ in range(n)])


def _apply(layer: Layer, x: dm.Expr) -> dm.Expr:
    y = dm.matvec(dm.const(layer.weights), x) + dm.const(layer.bias)
    if layer.activation == "tanh":
        return dm.tanh(y)
    if layer.activation == "relu":
        return dm.relu(y)
    return y


def feature_expr(gen: GeneratorSpec, z: dm.Expr, upto: str | None = None) -> dm.Expr:
    """Graph of the generator up to (and including) the target layer.

    Generator weights enter as constants, so no gradient ever reaches them.
    """
    stop = gen.layer_names.index(upto or gen.target_layer)
    h = z
    for layer in gen.layers[: stop + 1]:
        h = _apply(layer, h)
    return h


def features(gen: GeneratorSpec, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != gen.latent_dim:
        raise GeneratorError(f"latent has length {z.shape[-1]}, generator expects {gen.latent_dim}")
    return dm.evaluate(feature_expr(gen, dm.input("z")), {"z": z})


def render(gen: GeneratorSpec, z) -> np.ndarray:
    """Grayscale blob image (grid x grid, uint8) driven by the first four features."""
    if gen.kind == SYNTHETIC:
        h = features(gen, z)
    else:
        h = np.clip(features(gen.with_target(gen.layer_names[-1]), z), -1.0, 1.0)
    h = np.concatenate([np.ravel(h)[:4], np.zeros(max(0, 4 - np.size(h)))])
    G = gen.grid
    cx = (h[0] + 1) / 2 * (G - 1)
    cy = (h[1] + 1) / 2 * (G - 1)
    sigma = G * (0.05 + 0.10 * (h[2] + 1) / 2)
    amp = (h[3] + 1) / 2
    p = np.arange(G, dtype=np.float64)
    # rows are y (q), columns are x (p)
    d2 = (p[None, :] - cx) ** 2 + (p[:, None] - cy) ** 2
    img = amp * np.exp(-d2 / (2 * sigma * sigma))
    return np.clip(np.round(255 * img), 0, 255).astype(np.uint8)


def _require_synthetic(gen: GeneratorSpec):
    if gen.kind != SYNTHETIC:
        raise GeneratorError(f"ground truth is only known for {SYNTHETIC} generators, not {gen.kind}")


def ground_truth_directions(gen: GeneratorSpec) -> np.ndarray:
    """Rows of the mixing matrix, one unit latent direction per factor (F x d)."""
    _require_synthetic(gen)
    return np.array(gen.mixing)


# -- mlp-file format ---------------------------------------------------------

def mlp_generator_from_dict(doc: dict, target_layer: str | None = None, grid: int = 64) -> GeneratorSpec:
    try:
        d = int(doc["latent_dim"])
        raw_layers = doc["layers"]
    except (KeyError, TypeError, ValueError) as exc:
        raise GeneratorError(f"malformed generator file: {exc!r}") from None
    if d < 2 or not raw_layers:
        raise GeneratorError("generator needs latent_dim >= 2 and at least one layer")
    layers, names, width = [], set(), d
    for pos, raw in enumerate(raw_layers):
        try:
            name, rows, cols = str(raw["name"]), int(raw["rows"]), int(raw["cols"])
            W = np.asarray(raw["weights"], dtype=np.float64)
            b = np.asarray(raw["bias"], dtype=np.float64)
            act = raw.get("activation", "none")
        except (KeyError, TypeError, ValueError) as exc:
            raise GeneratorError(f"malformed layer {pos}: {exc!r}") from None
        if name in names:
            raise GeneratorError(f"duplicate layer name {name!r}")
        if act not in ACTIVATIONS:
            raise GeneratorError(f"layer {name!r}: unknown activation {act!r}")
        if W.size != rows * cols or b.shape != (rows,):
            raise GeneratorError(f"layer {name!r}: weights/bias do not match {rows}x{cols}")
        if cols != width:
            raise GeneratorError(f"layer {name!r}: expects input width {cols}, previous width is {width}")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise GeneratorError(f"layer {name!r}: non-finite parameter")
        names.add(name)
        layers.append(Layer(name, _frozen(W.reshape(rows, cols)), _frozen(b), act))
        width = rows
    gen = GeneratorSpec(MLP_FILE, d, tuple(layers), layers[-1].name, grid)
    return gen.with_target(target_layer) if target_layer is not None else gen


def load_mlp_generator(path, target_layer: str | None = None, grid: int = 64) -> GeneratorSpec:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise GeneratorError(f"{path}: not valid JSON ({exc})") from None
    gen = mlp_generator_from_dict(doc, target_layer, grid)
    gen.meta["path"] = str(path)
    return gen


def mlp_generator_to_dict(gen: GeneratorSpec) -> dict:
    return {
        "latent_dim": gen.latent_dim,
        "layers": [
            {"name": l.name, "rows": l.weights.shape[0], "cols": l.weights.shape[1],
             "weights": l.weights.ravel().tolist(), "bias": l.bias.tolist(), "activation": l.activation}
            for l in gen.layers
        ],
    }
