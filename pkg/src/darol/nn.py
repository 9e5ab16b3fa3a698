"""Bounded-output ReLU operator networks.

An :class:`MlpOperator` stacks ``d_a`` independent scalar subnetworks.  Each
subnetwork has ``L`` ReLU layers of width ``p`` followed by an affine output
layer, and its output is clamped to ``[-M, M]``; so each subnetwork carries
``L + 1`` weight matrices.  Parameters of all subnetworks are stored in
stacked arrays with a leading axis of length ``d_a``.
"""

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import fileformat
from .rng import substream

__all__ = [
    "MlpOperator",
    "TrainConfig",
    "TrainHistory",
    "TrainingDiverged",
    "init_network",
    "forward",
    "loss_and_grad",
    "train",
    "frobenius_profile",
    "project_frobenius",
    "save_checkpoint",
    "load_checkpoint",
]


class TrainingDiverged(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass
class MlpOperator:
    d_in: int
    d_out: int
    depth: int
    width: int
    clamp: float
    weights: list = field(repr=False)
    biases: list = field(repr=False)
    seed: int = 0

    @property
    def n_weight_layers(self):
        return self.depth + 1

    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def with_params(self, params):
        return dataclasses.replace(self, weights=list(params[0::2]), biases=list(params[1::2]))

    def copy(self):
        return self.with_params([p.copy() for p in self.params()])

    def subnetwork(self, i):
        """Subnetwork ``i`` as a standalone single-output operator."""
        return dataclasses.replace(
            self, d_out=1,
            weights=[w[i:i + 1].copy() for w in self.weights],
            biases=[b[i:i + 1].copy() for b in self.biases],
        )

    def __call__(self, x):
        return forward(self, x)


def init_network(d_m, d_a, p, L, M, seed=0) -> MlpOperator:
    """Glorot-uniform weights, zero biases."""
    if min(d_m, d_a, p, L) < 1:
        raise ValueError("d_m, d_a, p and L must all be >= 1")
    if not M > 0:
        raise ValueError("output clamp M must be positive")
    rng = substream(seed, "init")
    dims = [d_m] + [p] * L + [1]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-lim, lim, size=(d_a, fan_out, fan_in)))
        biases.append(np.zeros((d_a, fan_out)))
    return MlpOperator(d_m, d_a, L, p, float(M), weights, biases, int(seed))


def _check_input(net, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != net.d_in:
        raise ValueError(f"input has dimension {x.shape[1]}, network expects {net.d_in}")
    return x, single


def _forward_cache(net, x):
    pre, act = [], [None]
    h = np.matmul(x, net.weights[0].transpose(0, 2, 1)) + net.biases[0][:, None, :]
    pre.append(h)
    for w, b in zip(net.weights[1:], net.biases[1:]):
        a = np.maximum(h, 0.0)
        act.append(a)
        h = np.matmul(a, w.transpose(0, 2, 1)) + b[:, None, :]
        pre.append(h)
    z = h[:, :, 0]  # (d_a, n)
    return pre, act, z


def forward(net: MlpOperator, x):
    """Clamped stacked output; ``(d_a,)`` for one input, ``(n, d_a)`` for a batch."""
    x, single = _check_input(net, x)
    _, _, z = _forward_cache(net, x)
    y = np.clip(z, -net.clamp, net.clamp).T
    return y[0] if single else y


def loss_and_grad(net: MlpOperator, x, target):
    """Mean over the batch of ``||target - net(x)||^2`` and its gradient.

    Gradients follow the parameter order of :meth:`MlpOperator.params`.  The
    clamp passes gradient only strictly inside ``(-M, M)`` and ReLU has
    derivative 0 at 0.
    """
    x, _ = _check_input(net, x)
    target = np.atleast_2d(np.asarray(target, dtype=float))
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    pre, act, z = _forward_cache(net, x)
    y = np.clip(z, -net.clamp, net.clamp)
    r = y - target.T
    loss = float(np.sum(r * r) / n)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss in forward pass")

    dz = (2.0 / n) * r * (np.abs(z) < net.clamp)  # (d_a, n)
    dh = dz[:, :, None]  # gradient w.r.t. the last pre-activation
    grads = [None] * (2 * len(net.weights))
    for layer in range(len(net.weights) - 1, -1, -1):
        inp = act[layer] if layer > 0 else None
        if layer > 0:
            grads[2 * layer] = np.matmul(dh.transpose(0, 2, 1), inp)
        else:
            grads[0] = np.matmul(dh.transpose(0, 2, 1), x)
        grads[2 * layer + 1] = dh.sum(axis=1)
        if layer > 0:
            da = np.matmul(dh, net.weights[layer])
            dh = da * (pre[layer - 1] > 0.0)
    return loss, grads


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    step_size: float = 1e-3
    batch_size: int = 32
    epochs: int = 100
    seed: int = 0
    frobenius_cap: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not self.step_size > 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("step_size and batch_size must be positive, epochs >= 0")
        if self.frobenius_cap is not None and not self.frobenius_cap > 0:
            raise ValueError("frobenius_cap must be positive")


@dataclass
class TrainHistory:
    epoch_loss: list = field(default_factory=list)
    final_loss: float = float("nan")
    frobenius: np.ndarray | None = None


def frobenius_profile(net: MlpOperator):
    """Per-layer, per-subnetwork Frobenius norms ``(L + 1, d_a)`` and their max."""
    norms = np.array([np.sqrt(np.sum(w * w, axis=(1, 2))) for w in net.weights])
    return norms, float(norms.max())


def project_frobenius(net: MlpOperator, cap):
    """Rescale, in place, every weight matrix to Frobenius norm ``<= cap``."""
    for w in net.weights:
        norms = np.sqrt(np.sum(w * w, axis=(1, 2)))
        scale = np.minimum(1.0, cap / np.maximum(norms, np.finfo(float).tiny))
        w *= scale[:, None, None]
    return net


def _full_loss(net, x, y):
    pred = forward(net, x)
    return float(np.mean(np.sum((pred - y) ** 2, axis=1)))


def train(net: MlpOperator, x, y, cfg: TrainConfig):
    """Seeded mini-batch training on the mean square loss.

    Returns a trained copy and the history; ``net`` is not modified.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if x.shape[0] == 0 or x.shape[0] != y.shape[0]:
        raise ValueError("training data must be nonempty with matching pair counts")
    if x.shape[1] != net.d_in or y.shape[1] != net.d_out:
        raise ValueError("training data dimensions do not match the network")
    net = net.copy()
    if cfg.frobenius_cap is not None:
        project_frobenius(net, cfg.frobenius_cap)
    params = net.params()
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    hist = TrainHistory()
    n = x.shape[0]
    step = 0
    for epoch in range(cfg.epochs):
        order = substream(cfg.seed, "shuffle", epoch).permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            try:
                _, grads = loss_and_grad(net, x[idx], y[idx])
            except FloatingPointError as exc:
                raise TrainingDiverged(str(exc), hist) from exc
            step += 1
            if cfg.optimizer == "adam":
                c1 = 1.0 - cfg.beta1**step
                c2 = 1.0 - cfg.beta2**step
                for p, g, a, b in zip(params, grads, m1, m2):
                    a *= cfg.beta1
                    a += (1.0 - cfg.beta1) * g
                    b *= cfg.beta2
                    b += (1.0 - cfg.beta2) * g * g
                    p -= cfg.step_size * (a / c1) / (np.sqrt(b / c2) + cfg.eps)
            else:
                for p, g in zip(params, grads):
                    p -= cfg.step_size * g
            if cfg.frobenius_cap is not None:
                project_frobenius(net, cfg.frobenius_cap)
        loss = _full_loss(net, x, y)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"loss became non-finite at epoch {epoch}", hist)
        hist.epoch_loss.append(loss)
    hist.final_loss = _full_loss(net, x, y)
    hist.frobenius = frobenius_profile(net)[0]
    return net, hist


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(net: MlpOperator, path, metadata=None):
    header = {
        "d_in": net.d_in, "d_out": net.d_out, "depth": net.depth, "width": net.width,
        "clamp": net.clamp, "seed": net.seed,
        "shapes": [list(p.shape) for p in net.params()],
        "metadata": metadata or {},
    }
    return fileformat.write(path, "checkpoint", header, [p.ravel() for p in net.params()])


def load_checkpoint(path):
    """Returns ``(net, metadata)``."""
    _, h, rows = fileformat.read(path, "checkpoint")
    params = [r.reshape(s) for r, s in zip(rows, h["shapes"])]
    net = MlpOperator(h["d_in"], h["d_out"], h["depth"], h["width"], h["clamp"],
                      list(params[0::2]), list(params[1::2]), h["seed"])
    return net, h["metadata"]
