"""Small dense feed-forward networks with manual backpropagation.

A network is an ordered list of :class:`LayerSpec`.  The first spec is the
input layer: it has no affine map, only an optional batch normalization of
the raw features.  Every later layer computes ``act(BN(a W + b))`` where BN
is present only when the layer enables it.

Supported activations are ``linear``, ``relu`` and ``clamped_pow10``; the
latter maps ``a`` to ``10 ** clip(a, -3, -1)`` and therefore always lies in
``[1e-3, 1e-1]``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InvalidArgument, NumericalFailure

ACTIVATIONS = ("linear", "relu", "clamped_pow10")
BN_EPS = 1e-5
BN_MOMENTUM = 0.9
LN10 = np.log(10.0)

FORMAT_MAGIC = b"MTNN"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    width: int
    activation: str = "linear"
    batch_norm: bool = False

    def __post_init__(self):
        if self.width < 1:
            raise InvalidArgument("layer width must be positive")
        if self.activation not in ACTIVATIONS:
            raise InvalidArgument(f"unknown activation {self.activation!r}")


def clamped_pow10(a):
    return np.power(10.0, np.clip(a, -3.0, -1.0))


def _activate(kind: str, z):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "clamped_pow10":
        return clamped_pow10(z)
    return z


def _activation_grad(kind: str, z, out):
    if kind == "relu":
        return (z > 0).astype(float)
    if kind == "clamped_pow10":
        return np.where((z > -3.0) & (z < -1.0), LN10 * out, 0.0)
    return np.ones_like(z)


def count_parameters(layers) -> int:
    """Analytic trainable-parameter count implied by the layer dimensions."""
    n = 2 * layers[0].width if layers[0].batch_norm else 0
    for prev, cur in zip(layers[:-1], layers[1:]):
        n += prev.width * cur.width + cur.width
        if cur.batch_norm:
            n += 2 * cur.width
    return n


class DenseNet:
    """Feed-forward network with a flat, ordered parameter store."""

    def __init__(self, layers, rng: np.random.Generator | None = None, *,
                 zero_output: bool = False):
        layers = [l if isinstance(l, LayerSpec) else LayerSpec(*l) for l in layers]
        if len(layers) < 2:
            raise InvalidArgument("need an input layer and at least one more")
        if layers[0].activation != "linear":
            raise InvalidArgument("the input layer must be linear")
        self.layers = layers
        self.params: dict[str, np.ndarray] = {}
        self.bn_stats: dict[int, list[np.ndarray]] = {}
        rng = np.random.default_rng(0) if rng is None else rng
        if layers[0].batch_norm:
            self._add_bn(0, layers[0].width)
        for i in range(1, len(layers)):
            fan_in, width = layers[i - 1].width, layers[i].width
            scale = np.sqrt((2.0 if layers[i].activation == "relu" else 1.0) / fan_in)
            last = i == len(layers) - 1
            W = np.zeros((fan_in, width)) if (last and zero_output) else rng.normal(0.0, scale, (fan_in, width))
            self.params[f"W{i}"] = W
            self.params[f"b{i}"] = np.zeros(width)
            if layers[i].batch_norm:
                self._add_bn(i, width)
        if self.n_params != count_parameters(layers):
            raise AssertionError("parameter store does not match the layer dimensions")
        self._cache = None

    def _add_bn(self, i: int, width: int):
        self.params[f"gamma{i}"] = np.ones(width)
        self.params[f"beta{i}"] = np.zeros(width)
        self.bn_stats[i] = [np.zeros(width), np.ones(width)]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    @property
    def in_width(self) -> int:
        return self.layers[0].width

    @property
    def out_width(self) -> int:
        return self.layers[-1].width

    def copy(self) -> "DenseNet":
        other = DenseNet.__new__(DenseNet)
        other.layers = list(self.layers)
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.bn_stats = {k: [m.copy(), s.copy()] for k, (m, s) in self.bn_stats.items()}
        other._cache = None
        return other

    # -- flat parameter access ----------------------------------------------
    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params.values()])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.n_params:
            raise InvalidArgument("flat parameter vector has the wrong length")
        i = 0
        for k, p in self.params.items():
            self.params[k] = flat[i:i + p.size].reshape(p.shape).copy()
            i += p.size

    def flatten_grads(self, grads: dict) -> np.ndarray:
        return np.concatenate([grads[k].ravel() for k in self.params])

    # -- forward / backward ---------------------------------------------------
    def _bn_forward(self, i, z, mode, update_stats):
        g, b = self.params[f"gamma{i}"], self.params[f"beta{i}"]
        if mode == "train":
            mu = z.mean(axis=0)
            var = z.var(axis=0)
            if update_stats:
                stats = self.bn_stats[i]
                stats[0] = BN_MOMENTUM * stats[0] + (1 - BN_MOMENTUM) * mu
                stats[1] = BN_MOMENTUM * stats[1] + (1 - BN_MOMENTUM) * var
        else:
            mu, var = self.bn_stats[i]
        inv = 1.0 / np.sqrt(var + BN_EPS)
        zhat = (z - mu) * inv
        return g * zhat + b, (zhat, inv, mode)

    @staticmethod
    def _bn_backward(g, dout, cache):
        zhat, inv, mode = cache
        dgamma = np.sum(dout * zhat, axis=0)
        dbeta = dout.sum(axis=0)
        dzhat = dout * g
        if mode == "train":
            n = dout.shape[0]
            dz = inv / n * (n * dzhat - dzhat.sum(axis=0) - zhat * np.sum(dzhat * zhat, axis=0))
        else:
            dz = dzhat * inv
        return dz, dgamma, dbeta

    def forward(self, x, mode: str = "infer", *, update_stats: bool = True) -> np.ndarray:
        """Evaluate the network on a batch ``x`` of shape ``(n, in_width)``.

        ``mode="train"`` normalizes with batch statistics (and, by default,
        updates the running statistics); ``mode="infer"`` uses the running
        statistics.
        """
        if mode not in ("train", "infer"):
            raise InvalidArgument(f"unknown mode {mode!r}")
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.in_width:
            raise InvalidArgument(f"expected {self.in_width} input columns, got {x.shape[1]}")
        caches = []
        a = x
        if self.layers[0].batch_norm:
            a, bn = self._bn_forward(0, a, mode, update_stats)
            caches.append(bn)
        else:
            caches.append(None)
        for i in range(1, len(self.layers)):
            spec = self.layers[i]
            z = a @ self.params[f"W{i}"] + self.params[f"b{i}"]
            bn = None
            if spec.batch_norm:
                z, bn = self._bn_forward(i, z, mode, update_stats)
            out = _activate(spec.activation, z)
            caches.append((a, z, out, bn))
            a = out
        self._cache = caches
        return a

    def backward(self, upstream):
        """Gradients of ``sum(upstream * output)`` for the last forward batch.

        Returns ``(param_grads, input_grad)``.
        """
        if self._cache is None:
            raise InvalidArgument("backward called before forward")
        caches = self._cache
        grads = {}
        d = np.asarray(upstream, dtype=float)
        for i in range(len(self.layers) - 1, 0, -1):
            spec = self.layers[i]
            a_prev, z, out, bn = caches[i]
            d = d * _activation_grad(spec.activation, z, out)
            if spec.batch_norm:
                d, grads[f"gamma{i}"], grads[f"beta{i}"] = self._bn_backward(
                    self.params[f"gamma{i}"], d, bn)
            grads[f"W{i}"] = a_prev.T @ d
            grads[f"b{i}"] = d.sum(axis=0)
            d = d @ self.params[f"W{i}"].T
        if self.layers[0].batch_norm:
            d, grads["gamma0"], grads["beta0"] = self._bn_backward(self.params["gamma0"], d, caches[0])
        return {k: grads[k] for k in self.params}, d

    def op_counts(self, elementwise_combination: int = 0) -> dict:
        """Per-sample arithmetic operations at inference.

        Batch normalization folds into one multiplication and one addition
        per feature; ``elementwise_combination`` adds the multiply and add of
        an output-side ``w * h + b`` for that many indicators.
        """
        mult = add = comp = exp = 0
        if self.layers[0].batch_norm:
            mult += self.layers[0].width
            add += self.layers[0].width
        for prev, cur in zip(self.layers[:-1], self.layers[1:]):
            mult += prev.width * cur.width
            add += cur.width
            if cur.batch_norm:
                mult += cur.width
                add += cur.width
            if cur.activation == "relu":
                comp += cur.width
            elif cur.activation == "clamped_pow10":
                comp += 2 * cur.width
                exp += cur.width
        return {"multiplication": mult + elementwise_combination,
                "addition": add + elementwise_combination,
                "comparative": comp, "exponential": exp, "trainable": self.n_params}


# ---------------------------------------------------------------------------
# standard topologies
# ---------------------------------------------------------------------------

def eta_net(rng: np.random.Generator | None = None, *, init_rate: float | None = None) -> DenseNet:
    """Step-size network: inputs ``[v, grad]``, 8 ReLU units, one clamped
    ``10**x`` output."""
    net = DenseNet([LayerSpec(2), LayerSpec(8, "relu"), LayerSpec(1, "clamped_pow10")], rng)
    if init_rate is not None:
        net.params["b2"][:] = np.log10(init_rate)
    return net


def pp_net(n_inputs: int, n_outputs: int, hidden: int = 1, width: int = 32,
           rng: np.random.Generator | None = None, zero_output: bool = True) -> DenseNet:
    """Performance-prediction trunk: input BN, ``hidden`` BN+ReLU layers, linear head."""
    layers = [LayerSpec(n_inputs, "linear", True)]
    layers += [LayerSpec(width, "relu", True) for _ in range(hidden)]
    layers.append(LayerSpec(n_outputs, "linear", False))
    return DenseNet(layers, rng, zero_output=zero_output)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

LossFn = Callable[[np.ndarray, np.ndarray, object], tuple]


def squared_error(out, target, aux=None):
    """Mean over rows of the summed squared error, and its output gradient."""
    diff = out - target
    n = out.shape[0]
    return float(np.sum(diff**2) / n), 2.0 * diff / n


@dataclass
class TrainingTrace:
    losses: list = field(default_factory=list)  # full-set loss, index 0 = before training
    epochs: int = 0
    stopped_early: bool = False


def _take(aux, idx):
    if aux is None:
        return None
    if isinstance(aux, tuple):
        return tuple(a[idx] for a in aux)
    return aux[idx]


def dataset_loss(net: DenseNet, x, y, loss: LossFn = squared_error, aux=None) -> float:
    out = net.forward(x, "infer")
    return loss(out, y, aux)[0]


def train_mbgd(net: DenseNet, x, y, *, lr: float = 1e-3, batch_size: int = 64,
               epochs: int = 2000, rng: np.random.Generator | None = None,
               loss: LossFn = squared_error, aux=None, tol: float = 1e-6,
               patience: int = 20) -> TrainingTrace:
    """Plain mini-batch gradient descent.

    The full-set loss (inference mode) is recorded before training and
    after every epoch.  Training stops early once the loss has improved by
    less than ``tol`` for ``patience`` consecutive epochs.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.shape[0]
    if n == 0:
        raise InvalidArgument("empty dataset")
    rng = np.random.default_rng(0) if rng is None else rng
    trace = TrainingTrace(losses=[dataset_loss(net, x, y, loss, aux)])
    stall = 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            if idx.size < 2 and n >= 2:
                continue  # batch statistics need two rows
            out = net.forward(x[idx], "train")
            _, dout = loss(out, y[idx], _take(aux, idx))
            grads, _ = net.backward(dout)
            for k, g in grads.items():
                net.params[k] -= lr * g
        cur = dataset_loss(net, x, y, loss, aux)
        if not np.isfinite(cur):
            raise NumericalFailure(f"loss became {cur} at epoch {epoch}")
        trace.epochs = epoch
        prev = trace.losses[-1]
        trace.losses.append(cur)
        stall = stall + 1 if prev - cur < tol else 0
        if stall >= patience:
            trace.stopped_early = True
            break
    return trace


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

_ACT_CODE = {name: i for i, name in enumerate(ACTIVATIONS)}


def save_net(net: DenseNet, path) -> None:
    """Write the layer specs, parameters and BN running statistics.

    Layout: ``b"MTNN"``, version (u32), layer count (u32), then per layer
    width (u32), activation code (u8), batch-norm flag (u8); then all
    parameters in declaration order and the BN statistics (mean, variance
    per normalized layer) as little-endian float64.
    """
    with open(path, "wb") as fh:
        fh.write(FORMAT_MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(net.layers)))
        for spec in net.layers:
            fh.write(struct.pack("<IBB", spec.width, _ACT_CODE[spec.activation], int(spec.batch_norm)))
        fh.write(net.get_flat().astype("<f8").tobytes())
        for i in sorted(net.bn_stats):
            for arr in net.bn_stats[i]:
                fh.write(arr.astype("<f8").tobytes())


def load_net(path) -> DenseNet:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != FORMAT_MAGIC:
        raise InvalidArgument("not a network file")
    version, n_layers = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise InvalidArgument(f"unsupported network file version {version}")
    off = 12
    layers = []
    for _ in range(n_layers):
        width, act, bn = struct.unpack_from("<IBB", data, off)
        off += 6
        layers.append(LayerSpec(width, ACTIVATIONS[act], bool(bn)))
    net = DenseNet(layers)
    n = net.n_params
    net.set_flat(np.frombuffer(data, "<f8", n, off))
    off += 8 * n
    for i in sorted(net.bn_stats):
        w = net.layers[i].width
        mean = np.frombuffer(data, "<f8", w, off).copy()
        var = np.frombuffer(data, "<f8", w, off + 8 * w).copy()
        net.bn_stats[i] = [mean, var]
        off += 16 * w
    if off != len(data):
        raise InvalidArgument("trailing bytes in network file")
    return net
