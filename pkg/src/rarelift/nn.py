"""Dense-network core shared by the neural learners and the meta model.

Everything is plain numpy in float64: affine layers, ReLU between them,
weighted binary cross-entropy on a sigmoid head, mini-batch gradient descent.
Initialization is He-style (std = sqrt(2 / fan_in)) from a seeded generator,
so identical seeds give identical weights.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, log_expit
from scipy.stats import rankdata

from .errors import ConfigError, TrainingError


class DenseStack:
    """Affine layers with ReLU activations.

    `sizes` runs input width to output width. All layers but the last apply
    ReLU; the last is linear unless `final_relu` is set (branch stacks that
    produce hidden representations want ReLU there too).
    """

    def __init__(self, sizes: list[int], rng: np.random.Generator, final_relu: bool = False):
        if len(sizes) < 2:
            raise ConfigError("a dense stack needs an input and an output width")
        if any(s < 1 for s in sizes):
            raise ConfigError(f"layer widths must be positive, got {sizes}")
        self.sizes = list(sizes)
        self.final_relu = final_relu
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            scale = np.sqrt(2.0 / fan_in)
            self.weights.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def _relu_at(self, layer: int) -> bool:
        return layer < self.n_layers - 1 or self.final_relu

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        """Returns (output, cache); cache holds each layer's (input, pre-activation)."""
        cache = []
        h = x
        for l in range(self.n_layers):
            pre = h @ self.weights[l] + self.biases[l]
            cache.append((h, pre))
            h = np.maximum(pre, 0.0) if self._relu_at(l) else pre
        return h, cache

    def backward(
        self, cache: list, grad_out: np.ndarray
    ) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
        """Gradients of all (W, b) plus the gradient w.r.t. the stack input.

        `grad_out` is d(loss)/d(stack output), post-activation.
        """
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * self.n_layers
        d = grad_out
        for l in range(self.n_layers - 1, -1, -1):
            inp, pre = cache[l]
            if self._relu_at(l):
                d = d * (pre > 0.0)
            grads[l] = (inp.T @ d, d.sum(axis=0))
            d = d @ self.weights[l].T
        return grads, d

    def param_arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def weight_flags(self) -> list[bool]:
        """True for weight matrices (L2 applies), False for biases."""
        return [True, False] * self.n_layers


def flatten_grads(grads: list[tuple[np.ndarray, np.ndarray]]) -> list[np.ndarray]:
    out = []
    for dw, db in grads:
        out.extend((dw, db))
    return out


class SigmoidNet:
    """A dense stack ending in one logit; `predict_proba` applies the sigmoid."""

    def __init__(self, sizes: list[int], seed: int):
        if sizes[-1] != 1:
            raise ConfigError("classifier stack must end in a single unit")
        self.stack = DenseStack(sizes, np.random.default_rng(seed))

    def forward(self, x: np.ndarray):
        z, cache = self.stack.forward(x)
        return z[:, 0], cache

    def backward(self, cache, dz: np.ndarray) -> list[np.ndarray]:
        grads, _ = self.stack.backward(cache, dz[:, None])
        return flatten_grads(grads)

    def param_arrays(self) -> list[np.ndarray]:
        return self.stack.param_arrays()

    def weight_flags(self) -> list[bool]:
        return self.stack.weight_flags()

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        z, _ = self.forward(x)
        return expit(z)


class TwoBranchNet:
    """Two parallel stacks over a column split, fused by concatenation.

    The first `n_first` input columns feed the first branch, the rest feed the
    second. Branch outputs are ReLU hidden representations; their
    concatenation passes through a head stack ending in one logit.
    """

    def __init__(self, n_first, n_second, first_hidden, second_hidden, head_hidden, seed):
        if n_first < 1 or n_second < 1:
            raise ConfigError("both input blocks need at least one column")
        rng = np.random.default_rng(seed)
        self.n_first = n_first
        self.n_second = n_second
        self.first = DenseStack([n_first, *first_hidden], rng, final_relu=True)
        self.second = DenseStack([n_second, *second_hidden], rng, final_relu=True)
        head_in = self.first.sizes[-1] + self.second.sizes[-1]
        self.head = DenseStack([head_in, *head_hidden, 1], rng)

    def forward(self, x: np.ndarray):
        if x.shape[1] != self.n_first + self.n_second:
            raise ConfigError(
                f"expected {self.n_first + self.n_second} input columns, got {x.shape[1]}"
            )
        h1, c1 = self.first.forward(x[:, : self.n_first])
        h2, c2 = self.second.forward(x[:, self.n_first :])
        z, c3 = self.head.forward(np.concatenate([h1, h2], axis=1))
        return z[:, 0], (c1, c2, c3)

    def backward(self, cache, dz: np.ndarray) -> list[np.ndarray]:
        c1, c2, c3 = cache
        head_grads, d_h = self.head.backward(c3, dz[:, None])
        k = self.first.sizes[-1]
        first_grads, _ = self.first.backward(c1, d_h[:, :k])
        second_grads, _ = self.second.backward(c2, d_h[:, k:])
        return (
            flatten_grads(first_grads)
            + flatten_grads(second_grads)
            + flatten_grads(head_grads)
        )

    def param_arrays(self) -> list[np.ndarray]:
        return (
            self.first.param_arrays()
            + self.second.param_arrays()
            + self.head.param_arrays()
        )

    def weight_flags(self) -> list[bool]:
        return (
            self.first.weight_flags()
            + self.second.weight_flags()
            + self.head.weight_flags()
        )

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        z, _ = self.forward(x)
        return expit(z)


def weighted_bce_from_logits(z: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    """Weighted binary cross-entropy, normalized by the total weight."""
    per_row = -y * log_expit(z) - (1.0 - y) * log_expit(-z)
    return float(np.sum(w * per_row) / np.sum(w))


def logit_loss_value(net, x, y, w, l2: float) -> float:
    z, _ = net.forward(x)
    loss = weighted_bce_from_logits(z, y, w)
    if l2 > 0:
        for arr, is_w in zip(net.param_arrays(), net.weight_flags()):
            if is_w:
                loss += 0.5 * l2 * float(np.sum(arr * arr))
    return loss


def logit_loss_grads(net, x, y, w, l2: float) -> list[np.ndarray]:
    """Analytic gradients of `logit_loss_value` w.r.t. every parameter array."""
    z, cache = net.forward(x)
    p = expit(z)
    dz = w * (p - y) / np.sum(w)
    grads = net.backward(cache, dz)
    if l2 > 0:
        for g, arr, is_w in zip(grads, net.param_arrays(), net.weight_flags()):
            if is_w:
                g += l2 * arr
    return grads


def plain_log_loss(p: np.ndarray, y: np.ndarray) -> float:
    p = np.clip(p, 1e-15, 1.0 - 1e-15)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def _rank_auc(p: np.ndarray, y: np.ndarray) -> float:
    """Mann-Whitney AUC with tie credit; 0.5 when a class is absent."""
    pos = y == 1.0
    n1 = int(pos.sum())
    n0 = y.shape[0] - n1
    if n1 == 0 or n0 == 0:
        return 0.5
    r = rankdata(p)
    return float((r[pos].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def fit_binary_net(
    net,
    x: np.ndarray,
    y: np.ndarray,
    *,
    learning_rate: float,
    epochs: int,
    batch_size: int,
    l2: float,
    pos_weight: float,
    early_stopping_rounds: int | None,
    seed: int,
    valid: tuple[np.ndarray, np.ndarray] | None = None,
    momentum: float = 0.9,
    monitor: str = "logloss",
) -> dict:
    """Mini-batch gradient descent (heavy-ball momentum) on weighted BCE.

    Early stopping watches the validation slice under `monitor`: "logloss"
    checkpoints on validation log loss, "auc" on validation AUC (tracked as
    1 - AUC so lower is better either way). Validation log loss is recorded
    every epoch regardless. Mutates `net` in place, returns a history dict.

    Batch gradients are normalized by the batch's total sample weight, which
    keeps step sizes comparable when positives carry weights in the hundreds.
    A non-finite training loss aborts with the epoch named.
    """
    if epochs < 0:
        raise ConfigError("epochs must be >= 0")
    if batch_size < 1:
        raise ConfigError("batch_size must be positive")
    if learning_rate <= 0 and epochs > 0:
        raise ConfigError("learning_rate must be positive")
    if not (0.0 <= momentum < 1.0):
        raise ConfigError(f"momentum must lie in [0, 1), got {momentum}")
    if monitor not in ("logloss", "auc"):
        raise ConfigError(f"monitor must be 'logloss' or 'auc', got {monitor!r}")
    n = x.shape[0]
    y = np.asarray(y, dtype=np.float64)
    w = np.where(y == 1.0, pos_weight, 1.0)
    rng = np.random.default_rng(seed)
    params = net.param_arrays()
    flags = net.weight_flags()
    velocity = [np.zeros_like(a) for a in params]

    history: dict = {"train_loss": [], "val_logloss": [], "val_metric": [], "best_epoch": None}
    best_val = np.inf
    best_snapshot = None
    stall = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        epoch_weight = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb, yb, wb = x[idx], y[idx], w[idx]
            z, cache = net.forward(xb)
            p = expit(z)
            denom = float(np.sum(wb))
            dz = wb * (p - yb) / denom
            grads = net.backward(cache, dz)
            batch_loss = weighted_bce_from_logits(z, yb, wb)
            epoch_loss += batch_loss * denom
            epoch_weight += denom
            for arr, g, v, is_w in zip(params, grads, velocity, flags):
                if l2 > 0 and is_w:
                    g = g + l2 * arr
                v *= momentum
                v += g
                arr -= learning_rate * v
        train_loss = epoch_loss / epoch_weight
        if not np.isfinite(train_loss):
            raise TrainingError(f"non-finite training loss at epoch {epoch}")
        history["train_loss"].append(train_loss)

        if valid is not None:
            vz, _ = net.forward(valid[0])
            vp = expit(vz)
            val_ll = plain_log_loss(vp, valid[1])
            history["val_logloss"].append(val_ll)
            val = val_ll if monitor == "logloss" else 1.0 - _rank_auc(vp, valid[1])
            history["val_metric"].append(val)
            if val < best_val:
                best_val = val
                best_snapshot = [a.copy() for a in params]
                history["best_epoch"] = epoch
                stall = 0
            else:
                stall += 1
                if early_stopping_rounds and stall >= early_stopping_rounds:
                    break
    if best_snapshot is not None:
        for arr, saved in zip(params, best_snapshot):
            arr[...] = saved
    return history
