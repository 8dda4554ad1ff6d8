"""Dense three-layer networks with hand-written reverse passes and Adam/AdamW.

Everything runs in float64. Batches are row-major: an input of shape
``(B, input_dim)`` maps to an output of shape ``(B, output_dim)``.
"""
from __future__ import annotations

import numpy as np

SELU_ALPHA = 1.6732632423543772
SELU_SCALE = 1.0507009873554805

PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def selu(z):
    return SELU_SCALE * np.where(z > 0, z, SELU_ALPHA * np.expm1(np.minimum(z, 0.0)))


def selu_grad(z):
    return SELU_SCALE * np.where(z > 0, 1.0, SELU_ALPHA * np.exp(np.minimum(z, 0.0)))


def softplus(z):
    # max(z, 0) + log1p(exp(-|z|)) never overflows
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


class Mlp:
    """Three affine layers with SELU between them and an optional softplus head.

    Parameters
    ----------
    input_dim, hidden_dim, output_dim : int
        Layer widths; the layers chain input -> hidden -> hidden -> output.
    head : {"linear", "softplus"}
        Output nonlinearity. A softplus head makes every output nonnegative.
    rng : numpy.random.Generator, optional
        Source for the Glorot-uniform weight init. Biases start at zero.
        Without an rng all weights are zero.
    """

    def __init__(self, input_dim, hidden_dim, output_dim, head="linear", rng=None, trainable=True):
        if head not in ("linear", "softplus"):
            raise ValueError(f"unknown head {head!r}")
        self.input_dim = int(input_dim)
        self.hidden_dim = int(hidden_dim)
        self.output_dim = int(output_dim)
        self.head = head
        self.trainable = trainable
        shapes = self.param_shapes()
        self.params = []
        for name, shape in zip(PARAM_NAMES, shapes):
            if name.startswith("W") and rng is not None:
                limit = np.sqrt(6.0 / (shape[0] + shape[1]))
                self.params.append(rng.uniform(-limit, limit, size=shape))
            else:
                self.params.append(np.zeros(shape))

    def param_shapes(self):
        i, h, o = self.input_dim, self.hidden_dim, self.output_dim
        return [(i, h), (h,), (h, h), (h,), (h, o), (o,)]

    def copy(self) -> "Mlp":
        other = Mlp(self.input_dim, self.hidden_dim, self.output_dim, self.head, trainable=self.trainable)
        other.params = [p.copy() for p in self.params]
        return other

    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(
                f"input has shape {x.shape}, network expects (batch, {self.input_dim})"
            )
        return x

    def forward(self, x):
        return self.forward_cached(x)[0]

    __call__ = forward

    def forward_cached(self, x):
        """Forward pass that also returns the activations needed by ``backward``."""
        x = self._check_input(x)
        W1, b1, W2, b2, W3, b3 = self.params
        z1 = x @ W1 + b1
        a1 = selu(z1)
        z2 = a1 @ W2 + b2
        a2 = selu(z2)
        z3 = a2 @ W3 + b3
        out = softplus(z3) if self.head == "softplus" else z3
        return out, (x, z1, a1, z2, a2, z3)

    def backward(self, cache, grad_out):
        """Reverse pass for the scalar ``sum(grad_out * forward(x))``.

        Returns ``(param_grads, grad_input)`` where ``param_grads`` follows the
        order of ``self.params``.
        """
        x, z1, a1, z2, a2, z3 = cache
        grad_out = np.asarray(grad_out, dtype=np.float64)
        if grad_out.shape != z3.shape:
            raise ShapeError(f"upstream gradient {grad_out.shape} does not match output {z3.shape}")
        W1, _, W2, _, W3, _ = self.params
        dz3 = grad_out * sigmoid(z3) if self.head == "softplus" else grad_out
        dW3 = a2.T @ dz3
        db3 = dz3.sum(axis=0)
        dz2 = (dz3 @ W3.T) * selu_grad(z2)
        dW2 = a1.T @ dz2
        db2 = dz2.sum(axis=0)
        dz1 = (dz2 @ W2.T) * selu_grad(z1)
        dW1 = x.T @ dz1
        db1 = dz1.sum(axis=0)
        dx = dz1 @ W1.T
        grads = [dW1, db1, dW2, db2, dW3, db3]
        # report the first layer reached by the reverse pass
        for layer, g in reversed(list(zip((1, 1, 2, 2, 3, 3), grads))):
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient in layer {layer}")
        return grads, dx

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "output_dim": self.output_dim,
            "head": self.head,
            "trainable": self.trainable,
            "params": {n: encode_array(p) for n, p in zip(PARAM_NAMES, self.params)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        net = cls(d["input_dim"], d["hidden_dim"], d["output_dim"], d["head"], trainable=d["trainable"])
        params = []
        for name, shape in zip(PARAM_NAMES, net.param_shapes()):
            p = decode_array(d["params"][name])
            if p.shape != tuple(shape):
                raise ShapeError(f"{name} stored with shape {p.shape}, expected {tuple(shape)}")
            params.append(p)
        net.params = params
        return net


def zeros_like_params(params):
    return [np.zeros_like(p) for p in params]


def add_grads(acc, grads):
    for a, g in zip(acc, grads):
        a += g
    return acc


def encode_array(a) -> dict:
    # repr of a Python float is the shortest string that round-trips exactly
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": [repr(float(v)) for v in a.ravel()]}


def decode_array(d: dict):
    data = np.array([float(s) for s in d["data"]], dtype=np.float64)
    return data.reshape(d["shape"])


class Adam:
    """Adam with bias correction. ``weight_decay > 0`` gives decoupled AdamW.

    Decay is applied to matrices only; bias vectors are never decayed.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    @property
    def kind(self) -> str:
        return "AdamW" if self.weight_decay > 0 else "Adam"

    def step(self, params, grads):
        if len(params) != len(grads) or len(params) != len(self.m):
            raise ShapeError("parameter, gradient and state lists differ in length")
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if p.shape != g.shape or p.shape != m.shape:
                raise ShapeError(f"gradient {g.shape} does not match parameter {p.shape}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay > 0 and p.ndim == 2:
                p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "lr": self.lr,
            "betas": list(self.betas),
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "step": self.step_count,
            "m": [encode_array(a) for a in self.m],
            "v": [encode_array(a) for a in self.v],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Adam":
        m = [decode_array(a) for a in d["m"]]
        opt = cls(m, lr=d["lr"], betas=tuple(d["betas"]), eps=d["eps"], weight_decay=d["weight_decay"])
        opt.m = m
        opt.v = [decode_array(a) for a in d["v"]]
        opt.step_count = d["step"]
        return opt


def AdamW(params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-5):
    return Adam(params, lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)


def optim_step(net: Mlp, grads, opt: Adam):
    """Apply one optimizer update unless the network is frozen."""
    if net.trainable:
        opt.step(net.params, grads)
