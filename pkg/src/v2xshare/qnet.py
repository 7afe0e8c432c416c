"""Fully connected Q-value approximator with hand-rolled backprop.

Float64 throughout so gradient checks and cross-run determinism stay
exact. Hidden layers are rectified-linear, the output layer is linear,
and updates use an RMSProp rule with per-parameter running squared
gradients.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class QNetwork:
    sizes: tuple[int, ...]
    weights: list[np.ndarray]  # (fan_in, fan_out) per layer
    biases: list[np.ndarray]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "QNetwork":
        return QNetwork(
            sizes=self.sizes,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )

    def params(self):
        """Yield (layer index, 'W'|'b', array) in canonical order."""
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield i, "W", w
            yield i, "b", b


def init_network(layer_sizes, seed) -> QNetwork:
    """Uniform init scaled by 1/sqrt(fan_in), zero biases, seed-deterministic."""
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2:
        raise ValueError("need at least input and output layers")
    if any(s < 1 for s in sizes):
        raise ValueError("zero-size layer")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return QNetwork(sizes=sizes, weights=weights, biases=biases)


def forward(net: QNetwork, x: np.ndarray) -> np.ndarray:
    """Batch forward pass; x is (B, in) or (in,)."""
    squeeze = x.ndim == 1
    a = np.atleast_2d(np.asarray(x, dtype=float))
    if a.shape[1] != net.sizes[0]:
        raise ValueError(f"input width {a.shape[1]} != network input {net.sizes[0]}")
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        a = a @ w + b
        if i != last:
            np.maximum(a, 0.0, out=a)
    return a[0] if squeeze else a


def _forward_cached(net: QNetwork, x: np.ndarray):
    acts = [x]
    pre = []
    a = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w + b
        pre.append(z)
        a = z if i == last else np.maximum(z, 0.0)
        acts.append(a)
    return acts, pre


def backward(net: QNetwork, x: np.ndarray, output_gradient: np.ndarray):
    """Gradients of mean_b sum_j output_gradient[b,j] * y[b,j] w.r.t. parameters.

    Returns a list of (dW, db) per layer.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    gy = np.atleast_2d(np.asarray(output_gradient, dtype=float))
    if gy.shape != (x.shape[0], net.sizes[-1]):
        raise ValueError(f"output gradient shape {gy.shape} != {(x.shape[0], net.sizes[-1])}")
    acts, pre = _forward_cached(net, x)
    batch = x.shape[0]
    d = gy / batch
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(net.weights)
    for i in range(len(net.weights) - 1, -1, -1):
        grads[i] = (acts[i].T @ d, d.sum(axis=0))
        if i > 0:
            d = (d @ net.weights[i].T) * (pre[i - 1] > 0.0)
    return grads


@dataclass
class OptimizerState:
    """RMSProp running squared-gradient averages, one per parameter array."""

    learning_rate: float
    decay: float
    epsilon: float
    sq_avg: list[tuple[np.ndarray, np.ndarray]]

    @classmethod
    def for_network(cls, net: QNetwork, learning_rate=1e-3, decay=0.99, epsilon=1e-8):
        if not 0.0 < decay < 1.0:
            raise ValueError("decay must lie in (0, 1)")
        sq = [(np.zeros_like(w), np.zeros_like(b)) for w, b in zip(net.weights, net.biases)]
        return cls(learning_rate=learning_rate, decay=decay, epsilon=epsilon, sq_avg=sq)


def rmsprop_step(net: QNetwork, grads, opt: OptimizerState):
    """In-place RMSProp update; returns the mutated (net, opt) pair."""
    lr, d, e = opt.learning_rate, opt.decay, opt.epsilon
    for i, (gw, gb) in enumerate(grads):
        vw, vb = opt.sq_avg[i]
        vw *= d
        vw += (1.0 - d) * gw * gw
        vb *= d
        vb += (1.0 - d) * gb * gb
        net.weights[i] -= lr * gw / (np.sqrt(vw) + e)
        net.biases[i] -= lr * gb / (np.sqrt(vb) + e)
    return net, opt


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    passed: bool
    worst: tuple[int, str, int]  # layer, 'W'|'b', flat index

    def __str__(self) -> str:
        layer, kind, idx = self.worst
        status = "ok" if self.passed else "FAIL"
        return (
            f"grad check {status}: max rel error {self.max_rel_error:.3e} "
            f"(tol {self.tolerance:.1e}) at layer {layer} {kind}[{idx}]"
        )


def grad_check(
    net: QNetwork,
    x: np.ndarray,
    tolerance: float = 1e-4,
    fd_step: float = 1e-5,
    inject: tuple[int, str, int] | None = None,
) -> GradCheckReport:
    """Compare backward() against central finite differences, coordinate-wise.

    ``inject`` flips the sign of one analytic gradient coordinate, for
    validating that the check actually catches faults.
    """
    if net.n_params >= 10_000:
        raise ValueError("grad check is for small networks (< 1e4 parameters)")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    gy = np.ones((x.shape[0], net.sizes[-1]))
    analytic = backward(net, x, gy)
    if inject is not None:
        layer, kind, idx = inject
        arr = analytic[layer][0 if kind == "W" else 1]
        arr.flat[idx] = -arr.flat[idx]

    def scalar() -> float:
        return float(np.sum(gy * forward(net, x))) / x.shape[0]

    worst = (0, "W", 0)
    max_rel = 0.0
    for layer, kind, arr in net.params():
        g = analytic[layer][0 if kind == "W" else 1]
        for idx in range(arr.size):
            orig = arr.flat[idx]
            arr.flat[idx] = orig + fd_step
            up = scalar()
            arr.flat[idx] = orig - fd_step
            down = scalar()
            arr.flat[idx] = orig
            fd = (up - down) / (2.0 * fd_step)
            rel = abs(g.flat[idx] - fd) / (max(abs(g.flat[idx]), abs(fd)) + 1e-6)
            if rel > max_rel:
                max_rel = rel
                worst = (layer, kind, idx)
    return GradCheckReport(
        max_rel_error=max_rel, tolerance=tolerance, passed=max_rel < tolerance, worst=worst
    )


# ---------------------------------------------------------------------------
# checkpoint container: several networks plus metadata and a content checksum

CHECKPOINT_VERSION = 1


def _digest(nets: list[QNetwork]) -> str:
    h = hashlib.sha256()
    for net in nets:
        h.update(np.asarray(net.sizes, dtype=np.int64).tobytes())
        for _, _, arr in net.params():
            h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def save_checkpoint(path, nets: list[QNetwork], extra: dict | None = None) -> None:
    """Atomically write networks to a versioned .npz container."""
    path = Path(path)
    meta = {
        "version": CHECKPOINT_VERSION,
        "n_networks": len(nets),
        "layer_sizes": [list(n.sizes) for n in nets],
        "checksum": _digest(nets),
        "extra": extra or {},
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for i, net in enumerate(nets):
        for layer, kind, arr in net.params():
            arrays[f"net{i}_{kind}{layer}"] = arr
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[list[QNetwork], dict]:
    """Load and verify a checkpoint; returns (networks, extra metadata)."""
    with np.load(Path(path)) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
        nets = []
        for i, sizes in enumerate(meta["layer_sizes"]):
            sizes = tuple(sizes)
            weights = [data[f"net{i}_W{l}"] for l in range(len(sizes) - 1)]
            biases = [data[f"net{i}_b{l}"] for l in range(len(sizes) - 1)]
            nets.append(QNetwork(sizes=sizes, weights=weights, biases=biases))
    if _digest(nets) != meta["checksum"]:
        raise ValueError("checkpoint checksum mismatch")
    return nets, meta.get("extra", {})
