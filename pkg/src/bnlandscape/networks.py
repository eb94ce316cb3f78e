"""Model families: the deep linear regression network and a small ReLU MLP.

Layers are described by small frozen records (:class:`Dense`,
:class:`BatchNorm`, ...).  A :class:`NetworkState` pairs a layer list with
its parameter arrays and owns a lazily built :class:`Model`, the autodiff
graph that evaluates loss and gradients.  Batches use the row convention:
``H_i = H_{i-1} @ W_i`` with ``W_i`` of shape ``(fan_in, fan_out)``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import norm_layers  # noqa: F401  (registers the fused normalization ops)
from .norm_layers import NoiseConfig, noise_arrays
from .tensor_core import Graph, Rng, ShapeError

__all__ = [
    "Dense",
    "BatchNorm",
    "NoisyBatchNorm",
    "Noise",
    "LpNorm",
    "ReLU",
    "LayerSpec",
    "NORM_KINDS",
    "Batch",
    "DatasetSpec",
    "Dataset",
    "NetworkState",
    "Model",
    "glorot_init",
    "build_dln",
    "build_mlp",
    "make_dataset",
]


@dataclass(frozen=True)
class Dense:
    n_in: int
    n_out: int
    bias: bool = False


@dataclass(frozen=True)
class BatchNorm:
    units: int
    eps: float = 1e-5


@dataclass(frozen=True)
class NoisyBatchNorm:
    units: int
    eps: float = 1e-5
    noise: NoiseConfig = field(default_factory=NoiseConfig)


@dataclass(frozen=True)
class Noise:
    """The noise of :class:`NoisyBatchNorm` without the normalization."""

    units: int
    noise: NoiseConfig = field(default_factory=NoiseConfig)


@dataclass(frozen=True)
class LpNorm:
    units: int
    p: float = 2
    eps: float = 1e-5


@dataclass(frozen=True)
class ReLU:
    pass


LayerSpec = Union[Dense, BatchNorm, NoisyBatchNorm, Noise, LpNorm, ReLU]

# norm kind name -> factory(units, noise, eps)
NORM_KINDS = {
    "none": None,
    "bn": lambda u, noise, eps: BatchNorm(u, eps),
    "noisy_bn": lambda u, noise, eps: NoisyBatchNorm(u, eps, noise),
    "noise": lambda u, noise, eps: Noise(u, noise),
    "lp1": lambda u, noise, eps: LpNorm(u, 1, eps),
    "lp2": lambda u, noise, eps: LpNorm(u, 2, eps),
    "lpinf": lambda u, noise, eps: LpNorm(u, np.inf, eps),
}


@dataclass(frozen=True)
class Batch:
    X: np.ndarray
    T: np.ndarray

    @property
    def size(self) -> int:
        return self.X.shape[0]


# -- data ---------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSpec:
    kind: str  # "dln" or "gaussmix"
    dim: int
    n: int
    seed: int
    classes: int = 0
    separation: float = 1.0
    spread: float = 1.0

    def __post_init__(self):
        if self.kind not in ("dln", "gaussmix"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.n <= 0 or self.dim <= 0:
            raise ValueError("n and dim must be positive")
        if self.kind == "gaussmix" and self.classes < 2:
            raise ValueError("a mixture needs at least 2 classes")


@dataclass
class Dataset:
    spec: DatasetSpec
    X: np.ndarray
    T: np.ndarray
    A: np.ndarray | None = None
    labels: np.ndarray | None = None

    def full_batch(self) -> Batch:
        return Batch(self.X, self.T)

    @property
    def linear_targets(self) -> bool:
        return self.A is not None

    def moment_batch(self) -> Batch:
        """A ``2 * dim`` row batch with the same input mean and covariance.

        For regression targets ``T = X A^T`` and a network whose output is
        affine in its input once batch statistics are fixed, the mean squared
        error and every per-unit batch statistic depend on the data only
        through these two moments, so this batch reproduces full-batch loss
        and gradients exactly.
        """
        if self.A is None:
            raise ValueError("moment batch needs targets linear in the inputs")
        n, d = self.X.shape
        mean = self.X.sum(axis=0) / n
        centered = self.X - mean
        cov = centered.T @ centered / n
        evals, evecs = np.linalg.eigh(cov)
        root = evecs * np.sqrt(np.clip(evals, 0.0, None))
        offsets = np.sqrt(d) * root.T
        X = np.vstack([mean + offsets, mean - offsets])
        return Batch(X, X @ self.A.T)


def make_dataset(spec: DatasetSpec) -> Dataset:
    rng = Rng(spec.seed).split("data")
    if spec.kind == "dln":
        A = rng.split("A").normal(size=(spec.dim, spec.dim))
        X = rng.split("x").normal(size=(spec.n, spec.dim))
        return Dataset(spec, X, X @ A.T, A=A)
    means = rng.split("means").normal(0.0, spec.separation, size=(spec.classes, spec.dim))
    labels = rng.split("labels").permutation(np.arange(spec.n) % spec.classes)
    X = means[labels] + spec.spread * rng.split("x").normal(size=(spec.n, spec.dim))
    return Dataset(spec, X, np.eye(spec.classes)[labels], labels=labels)


# -- parameters ---------------------------------------------------------------

def glorot_init(fan_in: int, fan_out: int, rng: Rng) -> np.ndarray:
    if fan_in < 1 or fan_out < 1:
        raise ValueError("fans must be >= 1")
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def _param_prefix(idx: int) -> str:
    return f"L{idx:02d}"


def _check_chain(layers):
    width = None
    for idx, layer in enumerate(layers):
        if isinstance(layer, Dense):
            if width is not None and layer.n_in != width:
                raise ShapeError(f"layer {idx}: Dense expects {layer.n_in} inputs, gets {width}")
            width = layer.n_out
        elif isinstance(layer, ReLU):
            continue
        else:
            if width is None or layer.units != width:
                raise ShapeError(f"layer {idx}: {type(layer).__name__} has "
                                 f"{layer.units} units after width {width}")


def init_params(layers, rng: Rng) -> dict[str, np.ndarray]:
    """Glorot weights (stream keyed by the Dense ordinal), zero biases, unit gammas."""
    params = {}
    dense_no = 0
    for idx, layer in enumerate(layers):
        pre = _param_prefix(idx)
        if isinstance(layer, Dense):
            params[pre + ".W"] = glorot_init(layer.n_in, layer.n_out, rng.split("dense", dense_no))
            if layer.bias:
                params[pre + ".b"] = np.zeros(layer.n_out)
            dense_no += 1
        elif isinstance(layer, (BatchNorm, NoisyBatchNorm, LpNorm)):
            params[pre + ".gamma"] = np.ones(layer.units)
            params[pre + ".beta"] = np.zeros(layer.units)
    return params


# -- graph model ----------------------------------------------------------------

class Model:
    """Autodiff graph for one layer structure.

    Parameters are grouped into "layers" for the layer-wise procedures: each
    Dense starts a group, and normalization parameters join the group of the
    preceding Dense unless ``bundle_norm`` is false.
    """

    def __init__(self, layers, loss: str = "mse", bundle_norm: bool = True):
        self.layers = tuple(layers)
        g = Graph()
        self._units = _units_per_layer(layers)
        x = g.root("input", requires_grad=False)
        t = g.root("target", requires_grad=False)
        self.param_names: list[str] = []
        self.groups: list[list[str]] = []
        self.group_start: list[int] = []
        self.layer_out: list[int] = []
        self.noise_layers: list[tuple[int, NoiseConfig, str, str]] = []

        def param(name, new_group):
            node = g.root(name)
            if new_group or not self.groups:
                self.groups.append([])
                self.group_start.append(node.id)
            self.groups[-1].append(name)
            self.param_names.append(name)
            return node

        def add_noise(h, idx, cfg):
            pre = _param_prefix(idx)
            mult = g.root(pre + ".noise_mult", requires_grad=False)
            add = g.root(pre + ".noise_add", requires_grad=False)
            self.noise_layers.append((idx, cfg, pre + ".noise_mult", pre + ".noise_add"))
            return h * mult + add

        h = x
        for idx, layer in enumerate(layers):
            pre = _param_prefix(idx)
            if isinstance(layer, Dense):
                h = h @ param(pre + ".W", True)
                if layer.bias:
                    h = g.apply("add_row", h, param(pre + ".b", False))
            elif isinstance(layer, (BatchNorm, NoisyBatchNorm)):
                gamma = param(pre + ".gamma", not bundle_norm)
                beta = param(pre + ".beta", False)
                h = g.apply("batchnorm", h, gamma, beta, eps=layer.eps)
                if isinstance(layer, NoisyBatchNorm):
                    h = add_noise(h, idx, layer.noise)
            elif isinstance(layer, Noise):
                h = add_noise(h, idx, layer.noise)
            elif isinstance(layer, LpNorm):
                gamma = param(pre + ".gamma", not bundle_norm)
                beta = param(pre + ".beta", False)
                h = g.apply("lpnorm", h, gamma, beta, p=layer.p, eps=layer.eps)
            elif isinstance(layer, ReLU):
                h = h.relu()
            else:
                raise TypeError(f"unknown layer {layer!r}")
            self.layer_out.append(h.id)
        if loss == "mse":
            out = g.apply("sum", g.apply("mean_rows", (h - t).square()))
        elif loss == "softmax_ce":
            out = g.apply("softmax_ce", h, t)
        else:
            raise ValueError(f"unknown loss {loss!r}")
        g.set_output(out)
        self.graph = g
        self.loss = loss
        self.output_node = h.id
        self.moment_closed = loss == "mse" and all(
            isinstance(l, (Dense, BatchNorm)) or (isinstance(l, LpNorm) and l.p == 2)
            for l in layers)
        self._token = None
        self._noise_cache: tuple = (None, None)

    def noise_bindings(self, batch: Batch, step: int, seed: int) -> dict:
        if not self.noise_layers:
            return {}
        key = (step, batch.size, seed)
        if self._noise_cache[0] == key:
            return self._noise_cache[1]
        rng = Rng(seed)
        out = {}
        for idx, cfg, mult_name, add_name in self.noise_layers:
            mult, add = noise_arrays(cfg, rng, step, (batch.size, self._units[idx]), layer=idx)
            out[mult_name] = mult
            out[add_name] = add
        self._noise_cache = (key, out)
        return out

    def evaluate(self, params: dict, batch: Batch, step: int = 0, noise_seed: int = 0,
                 *, grads: bool = True, from_group: int = 0, grads_from_group: int = 0):
        """Loss (and gradients, keyed by parameter name) at ``params``.

        ``from_group > 0`` promises that only parameters of groups
        ``>= from_group`` changed since the previous call on the same batch
        and step, so the forward pass restarts there.  ``grads_from_group``
        skips backward work below that group; gradients of earlier groups are
        then absent from the result.
        """
        g = self.graph
        token = (id(batch), step, noise_seed)
        start = 0
        if from_group and self._token == token:
            start = self.group_start[from_group]
        bindings = {name: params[name] for name in self.param_names}
        if start == 0:
            bindings["input"] = batch.X
            bindings["target"] = batch.T
            bindings.update(self.noise_bindings(batch, step, noise_seed))
        self._token = None
        loss = g.forward(bindings, start=start)
        self._token = token
        if not grads:
            return loss, None
        stop = self.group_start[grads_from_group] if grads_from_group else 0
        all_grads = g.backward(stop=stop)
        names = self.param_names if not grads_from_group else [
            n for grp in self.groups[grads_from_group:] for n in grp]
        return loss, {n: all_grads[n] for n in names}

    def layer_output(self, idx: int) -> np.ndarray:
        """Activations after layer ``idx`` from the most recent forward pass."""
        return self.graph.value(self.layer_out[idx])


@dataclass
class NetworkState:
    layers: tuple
    params: dict
    loss: str = "mse"
    noise_seed: int = 0
    bundle_norm: bool = True
    _model: Model | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.layers = tuple(self.layers)
        if self._model is None or self._model.layers is not self.layers:
            _check_chain(self.layers)

    @property
    def model(self) -> Model:
        if self._model is None:
            self._model = Model(self.layers, self.loss, self.bundle_norm)
        return self._model

    @property
    def groups(self) -> list[list[str]]:
        return self.model.groups

    @property
    def depth(self) -> int:
        return sum(isinstance(l, Dense) for l in self.layers)

    def clone(self) -> "NetworkState":
        return NetworkState(self.layers, copy.deepcopy(self.params), self.loss,
                            self.noise_seed, self.bundle_norm)

    def with_params(self, params: dict) -> "NetworkState":
        """New state with other parameter values; shares the (stateless) model."""
        return NetworkState(self.layers, params, self.loss, self.noise_seed,
                            self.bundle_norm, self._model)

    def evaluate(self, batch: Batch, step: int = 0, grads: bool = True):
        return self.model.evaluate(self.params, batch, step, self.noise_seed, grads=grads)

    def flat_params(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n in self.model.param_names])

    def unflatten(self, vec: np.ndarray) -> dict:
        out, pos = {}, 0
        for n in self.model.param_names:
            shape = self.params[n].shape
            size = int(np.prod(shape))
            out[n] = vec[pos:pos + size].reshape(shape)
            pos += size
        if pos != vec.size:
            raise ShapeError(f"flat vector has {vec.size} entries, expected {pos}")
        return out


def _units_per_layer(layers):
    units, width = [], None
    for layer in layers:
        if isinstance(layer, Dense):
            width = layer.n_out
        units.append(width)
    return units


def _norm_layer(norm, units, noise, eps):
    if norm not in NORM_KINDS:
        raise ValueError(f"unknown norm {norm!r}; choose from {sorted(NORM_KINDS)}")
    factory = NORM_KINDS[norm]
    return None if factory is None else factory(units, noise or NoiseConfig(), eps)


def build_dln(depth: int = 25, dim: int = 10, seed: int = 0, norm: str = "none", *,
              n: int = 1000, norm_last: bool = False, eps: float = 1e-5,
              noise: NoiseConfig | None = None, bundle_norm: bool = True):
    """Deep linear network fitting ``x -> A x`` with mean squared error.

    Dense weights depend only on ``seed`` and the layer ordinal, so variants
    with different normalization start from identical weights.
    """
    if depth < 1 or dim < 1:
        raise ValueError("depth and dim must be >= 1")
    layers = []
    for i in range(depth):
        layers.append(Dense(dim, dim))
        if i < depth - 1 or norm_last:
            extra = _norm_layer(norm, dim, noise, eps)
            if extra is not None:
                layers.append(extra)
    rng = Rng(seed)
    net = NetworkState(layers, init_params(layers, rng.split("init")), "mse", noise_seed=seed,
                       bundle_norm=bundle_norm)
    data = make_dataset(DatasetSpec("dln", dim, n, seed))
    return net, data


def build_mlp(layer_dims=(16, 32, 32, 10, 3), norm: str = "none", seed: int = 0, *,
              n: int = 1024, eps: float = 1e-5, noise: NoiseConfig | None = None,
              separation: float = 1.0, spread: float = 1.0, bundle_norm: bool = True):
    """Dense -> [norm] -> ReLU blocks, then a final Dense into softmax cross-entropy.

    ``layer_dims[0]`` is the input dimension and ``layer_dims[-1]`` the
    number of classes of the Gaussian-mixture data.
    """
    dims = list(layer_dims)
    if len(dims) < 2:
        raise ValueError("need at least input and output dims")
    layers = []
    for i in range(len(dims) - 1):
        layers.append(Dense(dims[i], dims[i + 1], bias=True))
        if i < len(dims) - 2:
            extra = _norm_layer(norm, dims[i + 1], noise, eps)
            if extra is not None:
                layers.append(extra)
            layers.append(ReLU())
    rng = Rng(seed)
    net = NetworkState(layers, init_params(layers, rng.split("init")), "softmax_ce",
                       noise_seed=seed, bundle_norm=bundle_norm)
    data = make_dataset(DatasetSpec("gaussmix", dims[0], n, seed, classes=dims[-1],
                                    separation=separation, spread=spread))
    return net, data
