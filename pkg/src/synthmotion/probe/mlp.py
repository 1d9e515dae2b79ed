"""Small numpy MLP with batch norm, dropout, analytic gradients and AdamW."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
CHECKPOINT_MAGIC = b"SMLP"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class Layer:
    """Linear map, then optional batch norm, activation and dropout (in that order)."""

    weight: np.ndarray  # (n_in, n_out)
    bias: np.ndarray
    activation: str = "relu"  # "relu" or "none"
    batchnorm: bool = False
    dropout: float = 0.0
    gamma: Optional[np.ndarray] = None
    beta: Optional[np.ndarray] = None
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None
    trainable: bool = True

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator, activation="relu",
             batchnorm=False, dropout=0.0) -> "Layer":
        # PyTorch's default Linear init: U(-1/sqrt(n_in), 1/sqrt(n_in))
        bound = 1.0 / np.sqrt(n_in)
        layer = cls(rng.uniform(-bound, bound, (n_in, n_out)), rng.uniform(-bound, bound, n_out),
                    activation, batchnorm, dropout)
        if batchnorm:
            layer.gamma = np.ones(n_out)
            layer.beta = np.zeros(n_out)
            layer.running_mean = np.zeros(n_out)
            layer.running_var = np.ones(n_out)
        return layer

    def params(self) -> dict[str, np.ndarray]:
        p = {"weight": self.weight, "bias": self.bias}
        if self.batchnorm:
            p["gamma"] = self.gamma
            p["beta"] = self.beta
        return p

    def buffers(self) -> dict[str, np.ndarray]:
        if not self.batchnorm:
            return {}
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def copy(self) -> "Layer":
        cp = lambda a: None if a is None else a.copy()
        return Layer(self.weight.copy(), self.bias.copy(), self.activation, self.batchnorm, self.dropout,
                     cp(self.gamma), cp(self.beta), cp(self.running_mean), cp(self.running_var), self.trainable)


@dataclass
class MlpModel:
    layers: list[Layer]
    output: str = "softmax"  # "softmax" or "none"
    input_mean: Optional[np.ndarray] = None
    input_scale: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def build(cls, sizes: Sequence[int], seed: int, batchnorm: Sequence[bool] | None = None,
              dropout: Sequence[float] | None = None, output: str = "softmax") -> "MlpModel":
        """Layers ``sizes[0] -> ... -> sizes[-1]``; ReLU everywhere except the last layer."""
        rng = np.random.default_rng(seed)
        n = len(sizes) - 1
        batchnorm = batchnorm or [False] * n
        dropout = dropout or [0.0] * n
        layers = [Layer.init(sizes[i], sizes[i + 1], rng,
                             activation="relu" if i < n - 1 else "none",
                             batchnorm=batchnorm[i], dropout=dropout[i]) for i in range(n)]
        return cls(layers, output)

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0].weight.shape[0]] + [l.weight.shape[1] for l in self.layers]

    def copy(self) -> "MlpModel":
        return MlpModel([l.copy() for l in self.layers], self.output,
                        None if self.input_mean is None else self.input_mean.copy(),
                        None if self.input_scale is None else self.input_scale.copy(), dict(self.meta))

    def standardize(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.input_mean is None:
            return x
        return (x - self.input_mean) / self.input_scale

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params().items():
                yield f"{i}.{name}", layer, name, arr

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        if self.input_mean is not None:
            out += [("input_mean", self.input_mean), ("input_scale", self.input_scale)]
        for i, layer in enumerate(self.layers):
            out += [(f"{i}.{k}", v) for k, v in {**layer.params(), **layer.buffers()}.items()]
        return out

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.state_arrays():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(m: MlpModel, x: np.ndarray, mode: str = "eval", rng: np.random.Generator | None = None,
            update_stats: bool = True, standardize: bool = True):
    """Run the network. Returns ``(output, cache)``.

    ``output`` is a probability batch for softmax models, else raw activations.
    Train mode uses batch statistics (and updates the running ones when
    ``update_stats``) and applies dropout if ``rng`` is given.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    h = m.standardize(x) if standardize else np.asarray(x, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != m.layers[0].weight.shape[0]:
        raise ValueError(f"expected input (batch, {m.layers[0].weight.shape[0]}), got {h.shape}")
    cache = []
    for layer in m.layers:
        c = {"in": h}
        z = h @ layer.weight + layer.bias
        if layer.batchnorm:
            if mode == "train":
                if z.shape[0] < 2:
                    raise ValueError("batch norm in train mode needs a batch of at least 2")
                mu = z.mean(axis=0)
                var = z.var(axis=0)
                if update_stats:
                    n = z.shape[0]
                    layer.running_mean = (1 - BN_MOMENTUM) * layer.running_mean + BN_MOMENTUM * mu
                    layer.running_var = (1 - BN_MOMENTUM) * layer.running_var + BN_MOMENTUM * var * n / (n - 1)
            else:
                mu, var = layer.running_mean, layer.running_var
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (z - mu) * inv_std
            c["xhat"], c["inv_std"] = xhat, inv_std
            z = layer.gamma * xhat + layer.beta
        c["pre_act"] = z
        if layer.activation == "relu":
            z = np.maximum(z, 0.0)
        if mode == "train" and layer.dropout > 0 and rng is not None:
            keep = (rng.uniform(size=z.shape) >= layer.dropout) / (1.0 - layer.dropout)
            c["drop"] = keep
            z = z * keep
        cache.append(c)
        h = z
    logits = h
    out = softmax(logits) if m.output == "softmax" else logits
    return out, {"layers": cache, "logits": logits, "mode": mode}


def backward(m: MlpModel, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of the loss w.r.t. every parameter, given dL/dlogits."""
    grads = {}
    g = dlogits
    for i in range(len(m.layers) - 1, -1, -1):
        layer, c = m.layers[i], cache["layers"][i]
        if "drop" in c:
            g = g * c["drop"]
        if layer.activation == "relu":
            g = g * (c["pre_act"] > 0)
        if layer.batchnorm:
            xhat = c["xhat"]
            grads[f"{i}.gamma"] = (g * xhat).sum(axis=0)
            grads[f"{i}.beta"] = g.sum(axis=0)
            dxhat = g * layer.gamma
            if cache["mode"] == "train":
                n = g.shape[0]
                g = c["inv_std"] / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            else:
                g = dxhat * c["inv_std"]
        grads[f"{i}.weight"] = c["in"].T @ g
        grads[f"{i}.bias"] = g.sum(axis=0)
        g = g @ layer.weight.T
    grads["input"] = g
    return grads


def kl_loss_and_grad(probs: np.ndarray, targets: np.ndarray, eps: float = 1e-12):
    """Mean KL(target || probs) over the batch and its gradient at the logits."""
    q = np.maximum(probs, eps)
    t = targets
    terms = np.where(t > 0, t * (np.log(np.where(t > 0, t, 1.0)) - np.log(q)), 0.0)
    loss = float(terms.sum(axis=1).mean())
    return loss, (probs - t) / probs.shape[0]


def ce_loss_and_grad(probs: np.ndarray, labels: np.ndarray, weights: np.ndarray | None = None, eps: float = 1e-12):
    """(Optionally class-weighted) mean cross-entropy and its logit gradient."""
    n, k = probs.shape
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    w = np.ones(n) if weights is None else np.asarray(weights)[labels]
    loss = float((-w * np.log(np.maximum(probs[np.arange(n), labels], eps))).sum() / w.sum())
    return loss, w[:, None] * (probs - onehot) / w.sum()


class AdamW:
    """Adam with decoupled weight decay applied to every trainable parameter."""

    def __init__(self, model: MlpModel, lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.model = model
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1 - self.b1 ** self.t
        bc2 = 1 - self.b2 ** self.t
        for key, layer, name, arr in self.model.named_params():
            if not layer.trainable:
                continue
            g = grads[key]
            m = self.m.get(key, np.zeros_like(arr))
            v = self.v.get(key, np.zeros_like(arr))
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            self.m[key], self.v[key] = m, v
            arr *= 1 - self.lr * self.weight_decay
            arr -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(m: MlpModel, path, extra: dict | None = None) -> None:
    """Write ``<path>`` (little-endian binary arrays) and ``<path>.json`` (descriptor)."""
    path = Path(path)
    arrays = m.state_arrays()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(arrays)))
        for name, arr in arrays:
            a = np.ascontiguousarray(arr, dtype="<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(a.tobytes())
    desc = {
        "format_version": CHECKPOINT_VERSION,
        "sizes": m.sizes,
        "activations": [l.activation for l in m.layers],
        "batchnorm": [l.batchnorm for l in m.layers],
        "dropout": [l.dropout for l in m.layers],
        "output": m.output,
        "arrays": [name for name, _ in arrays],
        "meta": m.meta,
        **(extra or {}),
    }
    Path(str(path) + ".json").write_text(json.dumps(desc, indent=1))


def load_checkpoint(path) -> MlpModel:
    path = Path(path)
    desc = json.loads(Path(str(path) + ".json").read_text())
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    layers = []
    for i, (act, bn, dr) in enumerate(zip(desc["activations"], desc["batchnorm"], desc["dropout"])):
        layers.append(Layer(arrays[f"{i}.weight"], arrays[f"{i}.bias"], act, bn, dr,
                            arrays.get(f"{i}.gamma"), arrays.get(f"{i}.beta"),
                            arrays.get(f"{i}.running_mean"), arrays.get(f"{i}.running_var")))
    return MlpModel(layers, desc["output"], arrays.get("input_mean"), arrays.get("input_scale"), desc.get("meta", {}))
