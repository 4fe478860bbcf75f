"""Dense layers, parameter registry, Adam, and checkpoint serialization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import kernels


class NNError(Exception):
    pass


class NonFiniteGradientError(NNError):
    pass


def _identity(t: ad.Tensor) -> ad.Tensor:
    return t


ACTIVATIONS: dict[str, Callable[[ad.Tensor], ad.Tensor]] = {
    "relu": ad.relu,
    "sigmoid": ad.sigmoid,
    "identity": _identity,
}


@dataclass(frozen=True)
class LayerSpec:
    """One dense layer: weight [d_in, d_out], bias [d_out], activation."""

    name: str
    d_in: int
    d_out: int
    activation: str = "identity"

    def __post_init__(self):
        if self.d_in <= 0 or self.d_out <= 0:
            raise NNError(f"layer '{self.name}': dims must be positive")
        if self.activation not in ACTIVATIONS:
            raise NNError(f"layer '{self.name}': unknown activation '{self.activation}'")

    @property
    def param_count(self) -> int:
        return (self.d_in + 1) * self.d_out

    @property
    def group(self) -> str:
        return self.name.split(".")[0]


class ParameterStore:
    """Named leaf tensors grouped by sub-network; names are unique."""

    def __init__(self):
        self._tensors: dict[str, ad.Tensor] = {}
        self._groups: dict[str, list[str]] = {}

    def register(self, group: str, name: str, array: np.ndarray) -> ad.Tensor:
        if name in self._tensors:
            raise NNError(f"parameter '{name}' registered twice")
        t = ad.Tensor(np.ascontiguousarray(array, dtype=np.float64))
        self._tensors[name] = t
        self._groups.setdefault(group, []).append(name)
        return t

    def tensor(self, name: str) -> ad.Tensor:
        return self._tensors[name]

    def names(self) -> list[str]:
        return list(self._tensors)

    def group_names(self, group: str) -> list[str]:
        return list(self._groups.get(group, []))

    def groups(self) -> list[str]:
        return list(self._groups)

    def items(self):
        return self._tensors.items()

    def param_count(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._tensors.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]):
        for name, t in self._tensors.items():
            if name not in state:
                raise NNError(f"state is missing parameter '{name}'")
            arr = np.ascontiguousarray(state[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise NNError(f"shape mismatch for '{name}': {arr.shape} vs {t.data.shape}")
            t.data = arr.copy()


def param_count(store: ParameterStore) -> int:
    return store.param_count()


def init_parameters(layers: Sequence[LayerSpec], seed: int) -> ParameterStore:
    """Uniform(-s, s) weights with s = sqrt(6/(in+out)), zero biases.

    Draw order follows layer order, so a seed pins every tensor.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    store = ParameterStore()
    for spec in layers:
        s = np.sqrt(6.0 / (spec.d_in + spec.d_out))
        w = rng.uniform(-s, s, size=(spec.d_in, spec.d_out))
        b = np.zeros(spec.d_out)
        store.register(spec.group, spec.name + ".W", w)
        store.register(spec.group, spec.name + ".b", b)
    return store


def dense_forward(store: ParameterStore, spec: LayerSpec, x: ad.Tensor) -> ad.Tensor:
    w = store.tensor(spec.name + ".W")
    b = store.tensor(spec.name + ".b")
    return ACTIVATIONS[spec.activation](ad.add(ad.matmul(x, w), b))


def mlp_forward(store: ParameterStore, layers: Sequence[LayerSpec], x: ad.Tensor) -> ad.Tensor:
    out = x
    for spec in layers:
        out = dense_forward(store, spec, out)
    return out


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, store: ParameterStore, lr: float, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name, t in store.items():
            state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        return state


def adam_step(state: AdamState, store: ParameterStore,
              grads: "ad.GradientMap | Mapping[str, np.ndarray]"):
    """One bias-corrected Adam update over every registered parameter.

    A non-finite gradient aborts before any parameter is touched.
    """
    arrays: dict[str, np.ndarray] = {}
    for name, t in store.items():
        if isinstance(grads, ad.GradientMap):
            g = grads.wrt(t).data
        else:
            g = np.asarray(grads.get(name, np.zeros_like(t.data)), dtype=np.float64)
        if g.shape != t.data.shape:
            raise NNError(f"gradient shape mismatch for '{name}': {g.shape} vs {t.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for '{name}'")
        arrays[name] = g
    state.step += 1
    for name, t in store.items():
        kernels.adam_update(t.data, arrays[name], state.m[name], state.v[name],
                            state.step, state.lr, state.beta1, state.beta2, state.eps)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    meta: dict
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    extra_arrays: dict[str, np.ndarray]


def save_checkpoint(path, *, meta: dict, params: Mapping[str, np.ndarray],
                    adam_m: Mapping[str, np.ndarray] | None = None,
                    adam_v: Mapping[str, np.ndarray] | None = None,
                    extra_arrays: Mapping[str, np.ndarray] | None = None):
    """Versioned binary container; the write/read round trip is bit-exact.

    ``meta`` must be JSON-serializable and carries the architecture spec,
    optimizer scalars, RNG states, and the config digest.
    """
    payload: dict[str, np.ndarray] = {}
    meta = dict(meta)
    meta["checkpoint_version"] = CHECKPOINT_VERSION
    payload["__meta__"] = np.asarray(json.dumps(meta, sort_keys=True))
    for k, v in params.items():
        payload["p/" + k] = np.asarray(v)
    for prefix, group in (("m/", adam_m), ("v/", adam_v), ("x/", extra_arrays)):
        if group:
            for k, v in group.items():
                payload[prefix + k] = np.asarray(v)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
            raise NNError(f"unsupported checkpoint version in {path}")
        params, adam_m, adam_v, extra = {}, {}, {}, {}
        for key in data.files:
            if key == "__meta__":
                continue
            prefix, name = key.split("/", 1)
            target = {"p": params, "m": adam_m, "v": adam_v, "x": extra}[prefix]
            target[name] = data[key]
    return Checkpoint(meta=meta, params=params, adam_m=adam_m, adam_v=adam_v,
                      extra_arrays=extra)
