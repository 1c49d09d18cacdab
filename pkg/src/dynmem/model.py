"""Small multi-scale convolutional binary classifier.

Four blocks of [conv3x3 -> norm -> ReLU -> conv3x3 stride 2 -> norm -> ReLU]
with 8/16/32/64 channels, global average pooling and a dense head producing
one logit. The stride-2 conv output of each block is exported as a tap for
gram signatures (one tap per scale, before the channel count next increases).
"""
from __future__ import annotations

import copy
import json

import numpy as np

from . import nn
from .validation import ConfigError, StateError, check_images, check_labels

CHECKPOINT_MAGIC = b"DMCKPT1\n"


class ConvNetClassifier:
    """Binary image classifier with tap exports, norm-mode switches and
    EWC support (Fisher diagonal + parameter anchor).

    Follows the usual estimator conventions: hyperparameters are constructor
    keywords, `get_params` returns them, `fit`/`predict` do the work.
    """

    def __init__(self, image_size=32, channels=(8, 16, 32, 64),
                 learning_rate=1e-4, beta1=0.9, beta2=0.999, adam_epsilon=1e-8,
                 bn_momentum=0.1, bn_epsilon=1e-5, dtype=np.float32, random_state=0):
        self.image_size = image_size
        self.channels = tuple(channels)
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.adam_epsilon = adam_epsilon
        self.bn_momentum = bn_momentum
        self.bn_epsilon = bn_epsilon
        self.dtype = np.dtype(dtype).type
        self.random_state = random_state
        self._build(np.random.default_rng(random_state))
        self.norm_frozen = False
        self.version = 0
        self._anchor = None
        self._fisher = None
        self.optimizer = self._new_optimizer()

    # -- construction ------------------------------------------------------

    def _build(self, rng):
        dtype = self.dtype
        self.layers = []
        self.layer_names = []
        self.tap_indices = []
        in_ch = 1
        for b, ch in enumerate(self.channels, start=1):
            for tag, stride, cin in (("conv1", 1, in_ch), ("conv2", 2, ch)):
                conv = nn.Conv2d(cin, ch, 3, stride=stride, padding=1, rng=rng, dtype=dtype)
                self.layers.append(conv)
                self.layer_names.append(f"b{b}.{tag}")
                if tag == "conv2":
                    self.tap_indices.append(len(self.layers) - 1)
                self.layers.append(nn.BatchNorm2d(ch, self.bn_momentum, self.bn_epsilon, dtype))
                self.layer_names.append(f"b{b}.{tag.replace('conv', 'norm')}")
                self.layers.append(nn.ReLU())
                self.layer_names.append(f"b{b}.{tag.replace('conv', 'relu')}")
            in_ch = ch
        self.layers.append(nn.GlobalAvgPool())
        self.layer_names.append("pool")
        self.layers.append(nn.Dense(self.channels[-1], 1, rng=rng, dtype=dtype))
        self.layer_names.append("head")

    def _new_optimizer(self):
        return nn.Adam(self.named_params(), learning_rate=self.learning_rate,
                       beta1=self.beta1, beta2=self.beta2, epsilon=self.adam_epsilon)

    def reset_optimizer(self):
        self.optimizer = self._new_optimizer()

    def get_params(self, deep=True):
        return {
            "image_size": self.image_size, "channels": self.channels,
            "learning_rate": self.learning_rate, "beta1": self.beta1,
            "beta2": self.beta2, "adam_epsilon": self.adam_epsilon,
            "bn_momentum": self.bn_momentum, "bn_epsilon": self.bn_epsilon,
            "dtype": np.dtype(self.dtype).name, "random_state": self.random_state,
        }

    # -- parameter access --------------------------------------------------

    def named_params(self):
        out = {}
        for lname, layer in zip(self.layer_names, self.layers):
            for pname, p in layer.params.items():
                out[f"{lname}.{pname}"] = p
        return out

    def named_grads(self):
        out = {}
        for lname, layer in zip(self.layer_names, self.layers):
            for pname, g in layer.grads.items():
                out[f"{lname}.{pname}"] = g
        return out

    @property
    def n_params(self):
        return sum(p.size for p in self.named_params().values())

    def zero_grads(self):
        for layer in self.layers:
            layer.zero_grads()

    def norm_layers(self):
        return [l for l in self.layers if isinstance(l, nn.BatchNorm2d)]

    def running_stats(self):
        out = {}
        for lname, layer in zip(self.layer_names, self.layers):
            if isinstance(layer, nn.BatchNorm2d):
                out[f"{lname}.running_mean"] = layer.running_mean
                out[f"{lname}.running_var"] = layer.running_var
        return out

    def clone(self):
        return copy.deepcopy(self)

    # -- forward / backward ------------------------------------------------

    def _mode(self, train):
        if not train:
            return "eval"
        return "frozen" if self.norm_frozen else "train"

    def forward_with_taps(self, X, train=False):
        """One forward pass returning (logits (N,), taps list of (N,C,H,W))."""
        X = check_images(X, self.image_size).astype(self.dtype, copy=False)
        mode = self._mode(train)
        taps = []
        out = X
        for i, layer in enumerate(self.layers):
            out = layer.forward(out, mode)
            if i in self.tap_indices:
                taps.append(out)
        return out[:, 0], taps

    def decision_function(self, X):
        logits, _ = self.forward_with_taps(X, train=False)
        return logits

    def predict(self, X):
        """Label 1 iff sigmoid(logit) > 0.5 (strict; a zero logit maps to 0)."""
        return (self.decision_function(X) > 0).astype(np.int64)

    def backward(self, dlogits, train=True):
        """Backpropagate d(loss)/d(logits); accumulates into layer grads."""
        mode = self._mode(train)
        grad = np.asarray(dlogits, dtype=self.dtype)[:, None]
        for layer in reversed(self.layers):
            grad = layer.backward(grad, mode)
        return grad

    # -- training ----------------------------------------------------------

    def train_step(self, X, y, penalty_grads=None, penalty_loss=0.0):
        """One forward/backward/Adam update on a batch. Returns (loss, acc).

        penalty_grads, when given, is a dict of extra per-parameter gradients
        (e.g. an EWC penalty) added before the optimizer step.
        """
        X = check_images(X, self.image_size)
        y = check_labels(y, X.shape[0])
        self.zero_grads()
        logits, _ = self.forward_with_taps(X, train=True)
        losses, dlogits = nn.bce_loss(logits, y)
        self.backward(dlogits / len(y), train=True)
        grads = self.named_grads()
        if penalty_grads:
            for name, g in penalty_grads.items():
                grads[name] = grads[name] + g
        if self.norm_frozen:
            grads = {n: g for n, g in grads.items()
                     if not (".norm" in n and (n.endswith("scale") or n.endswith("shift")))}
        self.optimizer.step(grads)
        self.version += 1
        acc = float(np.mean((logits > 0).astype(np.int64) == y))
        return float(losses.mean() + penalty_loss), acc

    def fit(self, X, y, epochs=1, batch_size=8, rng=None):
        """Multi-epoch shuffled mini-batch training. Returns per-epoch mean loss."""
        X = check_images(X, self.image_size)
        y = check_labels(y, X.shape[0])
        rng = rng or np.random.default_rng(self.random_state)
        history = []
        for _ in range(epochs):
            order = rng.permutation(len(y))
            losses = []
            for start in range(0, len(y) - batch_size + 1, batch_size):
                idx = order[start : start + batch_size]
                loss, _ = self.train_step(X[idx], y[idx])
                losses.append(loss)
            history.append(float(np.mean(losses)) if losses else float("nan"))
        return history

    # -- EWC support -------------------------------------------------------

    def fisher_diagonal(self, X, y, sample_count=None, rng=None):
        """Empirical Fisher diagonal: mean squared per-sample gradient of the
        ground-truth-label log-likelihood. Running stats are excluded (they
        are not trainable parameters)."""
        X = check_images(X, self.image_size)
        y = check_labels(y, X.shape[0])
        if len(y) == 0:
            raise ConfigError("fisher_diagonal needs a non-empty dataset")
        idx = np.arange(len(y))
        if sample_count is not None and sample_count < len(y):
            rng = rng or np.random.default_rng(self.random_state)
            idx = rng.choice(len(y), size=sample_count, replace=False)
        fisher = {name: np.zeros_like(p, dtype=np.float64) for name, p in self.named_params().items()}
        for i in idx:
            self.zero_grads()
            logits, _ = self.forward_with_taps(X[i : i + 1], train=False)
            _, dlogit = nn.bce_loss(logits, y[i : i + 1])
            self.backward(dlogit, train=False)
            for name, g in self.named_grads().items():
                fisher[name] += g.astype(np.float64) ** 2
        self._fisher = {name: (f / len(idx)).astype(self.dtype) for name, f in fisher.items()}
        return self._fisher

    @property
    def fisher(self):
        return self._fisher

    @property
    def anchor(self):
        return self._anchor

    def snapshot_anchor(self):
        """Store an immutable copy of the current parameters. One-shot."""
        if self._anchor is not None:
            raise StateError("anchor already snapshotted")
        anchor = {}
        for name, p in self.named_params().items():
            a = p.copy()
            a.setflags(write=False)
            anchor[name] = a
        self._anchor = anchor
        return anchor

    # -- checkpoint IO -----------------------------------------------------

    def _checkpoint_arrays(self):
        arrays = dict(self.named_params())
        arrays.update(self.running_stats())
        if self._fisher is not None:
            arrays.update({f"fisher.{n}": a for n, a in self._fisher.items()})
        if self._anchor is not None:
            arrays.update({f"anchor.{n}": a for n, a in self._anchor.items()})
        return arrays

    def save(self, path, seed_provenance=None):
        """Write a self-describing binary checkpoint (bit-exact round trip)."""
        arrays = self._checkpoint_arrays()
        names = sorted(arrays)
        header = {
            "format": "dynmem-checkpoint",
            "version": 1,
            "hyper": self.get_params(),
            "model_version": self.version,
            "norm_frozen": self.norm_frozen,
            "has_fisher": self._fisher is not None,
            "has_anchor": self._anchor is not None,
            "seed_provenance": seed_provenance,
            "arrays": [
                {"name": n, "shape": list(arrays[n].shape), "dtype": arrays[n].dtype.name}
                for n in names
            ],
        }
        blob = json.dumps(header, sort_keys=True).encode() + b"\n"
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(len(blob).to_bytes(8, "little"))
            f.write(blob)
            for n in names:
                f.write(np.ascontiguousarray(arrays[n]).tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            magic = f.read(len(CHECKPOINT_MAGIC))
            if magic != CHECKPOINT_MAGIC:
                raise ConfigError(f"{path} is not a model checkpoint")
            hlen = int.from_bytes(f.read(8), "little")
            header = json.loads(f.read(hlen))
            arrays = {}
            for spec in header["arrays"]:
                shape = tuple(spec["shape"])
                dt = np.dtype(spec["dtype"])
                n_bytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
                arrays[spec["name"]] = np.frombuffer(f.read(n_bytes), dtype=dt).reshape(shape).copy()
        hyper = dict(header["hyper"])
        hyper["channels"] = tuple(hyper["channels"])
        model = cls(**hyper)
        for name, p in model.named_params().items():
            p[...] = arrays[name]
        for name, s in model.running_stats().items():
            s[...] = arrays[name]
        model.version = header["model_version"]
        model.norm_frozen = header["norm_frozen"]
        if header["has_fisher"]:
            model._fisher = {n[len("fisher."):]: a for n, a in arrays.items()
                             if n.startswith("fisher.")}
        if header["has_anchor"]:
            anchor = {}
            for n, a in arrays.items():
                if n.startswith("anchor."):
                    a.setflags(write=False)
                    anchor[n[len("anchor."):]] = a
            model._anchor = anchor
        model.reset_optimizer()
        return model


def gradient_check(model, X, y, n_coords=50, h=1e-5, rng=None):
    """Check the model's analytic gradients against central differences.

    Builds a float64 copy of the model so the oracle runs in double
    precision; running statistics are restored around every loss evaluation.
    Returns the max relative error over sampled coordinates.
    """
    m = ConvNetClassifier(**{**model.get_params(), "dtype": "float64"})
    for name, p in m.named_params().items():
        p[...] = model.named_params()[name].astype(np.float64)
    X = check_images(X, m.image_size).astype(np.float64)
    y = check_labels(y, X.shape[0])
    stats = {n: s.copy() for n, s in m.running_stats().items()}

    def loss_fn():
        for n, s in m.running_stats().items():
            s[...] = stats[n]
        logits, _ = m.forward_with_taps(X, train=True)
        losses, _ = nn.bce_loss(logits, y)
        return float(losses.mean())

    loss_fn()
    m.zero_grads()
    logits, _ = m.forward_with_taps(X, train=True)
    _, dlogits = nn.bce_loss(logits, y)
    m.backward(dlogits / len(y), train=True)
    analytic = m.named_grads()
    for n, s in m.running_stats().items():
        s[...] = stats[n]
    return nn.finite_diff_check(loss_fn, m.named_params(), analytic,
                                n_coords=n_coords, h=h, rng=rng)
