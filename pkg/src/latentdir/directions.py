"""Direction models: maps ``(z, alpha) -> z + alpha * u(z)`` with ``||u(z)|| = 1``.

``global`` learns one vector, ``linear`` a matrix applied to ``z`` and
``nonlinear`` a small ReLU/batch-norm network.  Parameters live in plain
dicts of float64 arrays so the trainer and optimizer can treat all kinds alike.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm

GLOBAL, LINEAR, NONLINEAR = "global", "linear", "nonlinear"
KINDS = (GLOBAL, LINEAR, NONLINEAR)
FORMAT_VERSION = 1
DEGENERATE_NORM = 1e-10
BN_MOMENTUM = 0.1


class DirectionError(ValueError):
    pass


@dataclass
class DirectionModel:
    kind: str
    index: int
    params: dict[str, np.ndarray]
    # batch-norm running statistics (nonlinear only); not trained by gradient
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def param_name(self, key: str) -> str:
        return f"k{self.index}.{key}"

    @property
    def n_hidden(self) -> int:
        return sum(1 for key in self.params if key.startswith("W") and key != "Wout")


@dataclass
class DirectionSet:
    kind: str
    d: int
    models: list[DirectionModel]
    seed: int = 0
    hidden_layers: int = 1
    metadata: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return len(self.models)

    def flat_params(self) -> dict[str, np.ndarray]:
        return {m.param_name(key): v for m in self.models for key, v in m.params.items()}

    def set_flat_params(self, flat: dict[str, np.ndarray]) -> None:
        for m in self.models:
            for key in m.params:
                m.params[key] = flat[m.param_name(key)]

    def copy(self) -> "DirectionSet":
        models = [DirectionModel(m.kind, m.index,
                                 {k: v.copy() for k, v in m.params.items()},
                                 {k: v.copy() for k, v in m.buffers.items()}) for m in self.models]
        return DirectionSet(self.kind, self.d, models, self.seed, self.hidden_layers, dict(self.metadata))


def init_direction_models(kind: str, K: int, d: int, seed: int = 0, hidden_layers: int = 1,
                          width: int | None = None) -> DirectionSet:
    """Seeded initial parameters for ``K`` models of one kind.

    For ``nonlinear`` the net has ``hidden_layers`` blocks of
    affine -> ReLU -> batch norm (width ``d`` or ``2d``) followed by an
    affine output layer of width ``d``.
    """
    if kind not in KINDS:
        raise DirectionError(f"unknown direction kind {kind!r}; expected one of {KINDS}")
    if K < 2:
        raise DirectionError(f"need K >= 2 directions for contrastive training, got {K}")
    if d < 1:
        raise DirectionError(f"latent dimension must be positive, got {d}")
    if kind == NONLINEAR and not 1 <= hidden_layers <= 3:
        raise DirectionError(f"nonlinear models take 1 to 3 hidden layers, got {hidden_layers}")
    width = d if width is None else width
    if kind == NONLINEAR and width not in (d, 2 * d):
        raise DirectionError(f"hidden width must be d or 2d, got {width}")
    rng = np.random.default_rng(seed)
    models = []
    for k in range(K):
        params, buffers = {}, {}
        if kind == GLOBAL:
            theta = rng.standard_normal(d)
            params["theta"] = theta / np.linalg.norm(theta)
        elif kind == LINEAR:
            params["M"] = np.eye(d) + 0.1 * rng.standard_normal((d, d))
        else:
            fan_in = d
            for i in range(hidden_layers):
                params[f"W{i}"] = rng.standard_normal((width, fan_in)) * np.sqrt(2.0 / fan_in)
                params[f"b{i}"] = np.zeros(width)
                params[f"g{i}"] = np.ones(width)
                params[f"s{i}"] = np.zeros(width)
                buffers[f"rm{i}"] = np.zeros(width)
                buffers[f"rv{i}"] = np.ones(width)
                fan_in = width
            params["Wout"] = rng.standard_normal((d, fan_in)) * np.sqrt(1.0 / fan_in)
            # a non-zero output bias keeps the edit defined where every hidden unit is off (e.g. z = 0)
            params["bout"] = rng.standard_normal(d) / np.sqrt(d)
        models.append(DirectionModel(kind, k, params, buffers))
    return DirectionSet(kind, d, models, seed, hidden_layers if kind == NONLINEAR else 0)


# -- graph builders ------------------------------------------------------------

@dataclass
class EditGraph:
    edited: dm.Expr
    # (model index, hidden layer index, batchnorm input node) for running-stat updates
    bn_inputs: list[tuple[int, int, dm.Expr]] = field(default_factory=list)


def direction_expr(model: DirectionModel, z: dm.Expr, training: bool,
                   bn_inputs: list | None = None) -> dm.Expr:
    """Unnormalized direction: theta, M z, or NN(z); parameters are graph inputs."""
    p = lambda key: dm.input(model.param_name(key))  # noqa: E731
    if model.kind == GLOBAL:
        return p("theta")
    if model.kind == LINEAR:
        return dm.matvec(p("M"), z)
    h = z
    for i in range(model.n_hidden):
        pre = dm.relu(dm.matvec(p(f"W{i}"), h) + p(f"b{i}"))
        if bn_inputs is not None:
            bn_inputs.append((model.index, i, pre))
        h = dm.batchnorm(pre, p(f"g{i}"), p(f"s{i}"), training=training,
                         running_mean=model.buffers[f"rm{i}"], running_var=model.buffers[f"rv{i}"])
    return dm.matvec(p("Wout"), h) + p("bout")


def edit_expr(model: DirectionModel, z: dm.Expr, alpha: float, training: bool = False,
              bn_inputs: list | None = None) -> dm.Expr:
    raw = direction_expr(model, z, training, bn_inputs)
    u = dm.l2_normalize(raw, min_norm=DEGENERATE_NORM, tag=model.index)
    return z + dm.scale(u, alpha)


def edit(model: DirectionModel, z, alpha: float, training: bool = False) -> np.ndarray:
    """Apply one direction model to a latent (d,) or a batch (n, d).

    Nonlinear models use running batch-norm statistics unless ``training``.
    """
    z = np.asarray(z, dtype=np.float64)
    if model.kind == NONLINEAR and z.ndim == 1:
        out = edit(model, z[None, :], alpha, training)
        return out[0]
    bindings = {model.param_name(k): v for k, v in model.params.items()}
    bindings["z"] = z
    return dm.evaluate(edit_expr(model, dm.input("z"), alpha, training), bindings)


def unit_direction(model: DirectionModel, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return edit(model, z, 1.0) - z


def update_running_stats(model: DirectionModel, layer: int, batch: np.ndarray,
                         momentum: float = BN_MOMENTUM) -> None:
    n = batch.shape[0]
    var = batch.var(axis=0, ddof=1) if n > 1 else np.zeros(batch.shape[1])
    rm, rv = f"rm{layer}", f"rv{layer}"
    model.buffers[rm] = (1 - momentum) * model.buffers[rm] + momentum * batch.mean(axis=0)
    model.buffers[rv] = (1 - momentum) * model.buffers[rv] + momentum * var


# -- file format ---------------------------------------------------------------

def set_to_dict(dset: DirectionSet) -> dict:
    doc = {
        "version": FORMAT_VERSION,
        "kind": dset.kind,
        "d": dset.d,
        "K": dset.K,
        "seed": dset.seed,
        "hidden_layers": dset.hidden_layers,
        "metadata": dset.metadata,
        "models": [
            {"index": m.index, "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                                          for k, v in m.params.items()}}
            for m in dset.models
        ],
    }
    if dset.kind == NONLINEAR:
        doc["bn_running_stats"] = [
            {"index": m.index, "stats": {k: v.tolist() for k, v in m.buffers.items()}} for m in dset.models
        ]
    return doc


def serialize_direction_set(dset: DirectionSet) -> bytes:
    return (json.dumps(set_to_dict(dset), indent=1, sort_keys=True) + "\n").encode()


def _array(entry, what: str, index: int) -> np.ndarray:
    try:
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DirectionError(f"model {index}: malformed {what} ({exc})") from None
    if not np.all(np.isfinite(arr)):
        raise DirectionError(f"model {index}: non-finite value in {what}")
    return arr


def _expected_shapes(kind: str, d: int, params: dict) -> dict:
    if kind == GLOBAL:
        return {"theta": (d,)}
    if kind == LINEAR:
        return {"M": (d, d)}
    shapes, fan_in = {}, d
    n_hidden = sum(1 for k in params if k.startswith("W") and k != "Wout")
    for i in range(n_hidden):
        w = params.get(f"W{i}", np.empty((0,))).shape[0] if f"W{i}" in params else 0
        shapes.update({f"W{i}": (w, fan_in), f"b{i}": (w,), f"g{i}": (w,), f"s{i}": (w,)})
        fan_in = w
    shapes.update({"Wout": (d, fan_in), "bout": (d,)})
    return shapes


def dict_to_set(doc: dict) -> DirectionSet:
    if not isinstance(doc, dict):
        raise DirectionError("direction file must be a JSON object")
    if doc.get("version") != FORMAT_VERSION:
        raise DirectionError(f"unsupported direction file version {doc.get('version')!r}; expected {FORMAT_VERSION}")
    try:
        kind, d, K = doc["kind"], int(doc["d"]), int(doc["K"])
        raw_models = doc["models"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DirectionError(f"malformed direction file: missing {exc}") from None
    if kind not in KINDS:
        raise DirectionError(f"unknown kind {kind!r}")
    if K < 2:
        raise DirectionError(f"direction set needs K >= 2, file has K={K}")
    if len(raw_models) != K:
        raise DirectionError(f"file declares K={K} but holds {len(raw_models)} models")
    stats = {e["index"]: e["stats"] for e in doc.get("bn_running_stats", [])}
    models = []
    for pos, raw in enumerate(raw_models):
        index = int(raw.get("index", pos))
        if index != pos:
            raise DirectionError(f"model at position {pos} has index {index}")
        params = {k: _array(v, k, index) for k, v in raw["params"].items()}
        expected = _expected_shapes(kind, d, params)
        if set(expected) != set(params) or any(params[k].shape != s for k, s in expected.items()):
            raise DirectionError(f"model {index}: parameters inconsistent with kind={kind}, d={d}")
        buffers = {}
        if kind == NONLINEAR:
            if index not in stats:
                raise DirectionError(f"model {index}: missing batch-norm running statistics")
            buffers = {k: np.asarray(v, dtype=np.float64) for k, v in stats[index].items()}
            for k, v in buffers.items():
                if not np.all(np.isfinite(v)):
                    raise DirectionError(f"model {index}: non-finite value in {k}")
        models.append(DirectionModel(kind, index, params, buffers))
    return DirectionSet(kind, d, models, int(doc.get("seed", 0)), int(doc.get("hidden_layers", 0)),
                        dict(doc.get("metadata", {})))


def parse_direction_set(data: bytes | str) -> DirectionSet:
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise DirectionError(f"direction file is not valid JSON ({exc})") from None
    return dict_to_set(doc)
