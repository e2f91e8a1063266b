"""Minimal reverse-mode differentiation over float64 numpy arrays.

Each op computes its forward value eagerly and records a vector-Jacobian
closure on the owning :class:`Tape`. Records are appended in creation order,
which is already a topological order (an op can only consume values that
exist), so the backward sweep is a single reversed pass.

Only the handful of ops the toy encoder needs are provided: ``dense``,
``gelu``, ``group_norm``, ``splice``, ``softmax_xent`` plus ``add`` and
``half_sum_sq`` for tests and regularisers.
"""

from __future__ import annotations

import math

import numpy as np

from dppt.errors import DegenerateBatchError, ShapeError, ConfigError, NumericError

# tanh-approximate GELU constants
GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


class Var:
    """A value on a tape. ``grad`` is filled in by :meth:`Tape.backward`."""

    __slots__ = ("value", "grad", "needs_grad", "tape")

    def __init__(self, tape, value, needs_grad):
        self.tape = tape
        self.value = value
        self.needs_grad = needs_grad
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, needs_grad={self.needs_grad})"


class Tape:
    def __init__(self):
        self._records = []

    def __len__(self):
        return len(self._records)

    def param(self, value):
        return Var(self, np.asarray(value, dtype=np.float64), True)

    def constant(self, value):
        return Var(self, np.asarray(value, dtype=np.float64), False)

    def record(self, value, inputs, vjp, name="op"):
        if not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite output from {name}")
        needs = any(v.needs_grad for v in inputs)
        out = Var(self, value, needs)
        if needs:
            self._records.append((out, inputs, vjp))
        return out

    def backward(self, loss):
        if loss.value.size != 1:
            raise ShapeError("backward needs a scalar loss")
        loss.grad = np.ones_like(loss.value)
        for out, inputs, vjp in reversed(self._records):
            if out.grad is None:
                continue
            for v, g in zip(inputs, vjp(out.grad)):
                if g is None or not v.needs_grad:
                    continue
                v.grad = g if v.grad is None else v.grad + g


def _tape_of(*vs):
    return vs[0].tape


def dense(x, w, b):
    """Per-frame affine map ``x @ w + b`` for ``x`` of shape [B, T, D_in]."""
    if x.value.ndim != 3:
        raise ShapeError(f"dense expects rank-3 input, got shape {x.shape}")
    d_in = x.shape[-1]
    if w.value.ndim != 2 or w.shape[0] != d_in or b.shape != (w.shape[1],):
        raise ShapeError(
            f"dense: input {x.shape}, weight {w.shape}, bias {b.shape} do not conform"
        )
    xv, wv = x.value, w.value
    out = xv @ wv + b.value

    def vjp(g):
        gx = g @ wv.T
        gw = xv.reshape(-1, d_in).T @ g.reshape(-1, g.shape[-1])
        gb = g.sum(axis=(0, 1))
        return gx, gw, gb

    return _tape_of(x).record(out, (x, w, b), vjp, "dense")


def gelu(x):
    xv = x.value
    inner = GELU_C * (xv + GELU_A * xv**3)
    t = np.tanh(inner)
    out = 0.5 * xv * (1.0 + t)

    def vjp(g):
        dinner = GELU_C * (1.0 + 3.0 * GELU_A * xv**2)
        d = 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t**2) * dinner
        return (g * d,)

    return x.tape.record(out, (x,), vjp, "gelu")


def group_norm(x, gamma, beta, num_groups=1, eps=1e-4):
    """Group normalisation of a rank-3 input [B, T, C].

    Statistics are taken per example and per channel group over the time and
    in-group channel axes, so nothing is shared between examples.
    """
    if x.value.ndim != 3:
        raise ShapeError(f"group_norm expects rank-3 input, got shape {x.shape}")
    if eps <= 0:
        raise ConfigError("group_norm eps must be positive")
    B, T, C = x.shape
    if num_groups < 1 or C % num_groups:
        raise ConfigError(f"{C} channels not divisible into {num_groups} groups")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError("gamma/beta must have one entry per channel")
    G = num_groups
    xg = x.value.reshape(B, T, G, C // G)
    n = T * (C // G)
    mu = xg.mean(axis=(1, 3), keepdims=True)
    xc = xg - mu
    var = (xc**2).mean(axis=(1, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(B, T, C)
    out = xhat * gamma.value + beta.value
    gv = gamma.value

    def vjp(g):
        ggamma = (g * xhat).sum(axis=(0, 1))
        gbeta = g.sum(axis=(0, 1))
        dxhat = (g * gv).reshape(B, T, G, C // G)
        xh = xhat.reshape(B, T, G, C // G)
        s1 = dxhat.sum(axis=(1, 3), keepdims=True)
        s2 = (dxhat * xh).sum(axis=(1, 3), keepdims=True)
        gx = inv / n * (n * dxhat - s1 - xh * s2)
        return gx.reshape(B, T, C), ggamma, gbeta

    return x.tape.record(out, (x, gamma, beta), vjp, "group_norm")


def splice(x, context):
    """Stack each frame with ``context`` neighbours on either side (zero padded).

    [B, T, D] -> [B, T, (2*context+1)*D]. Parameter free.
    """
    if x.value.ndim != 3:
        raise ShapeError(f"splice expects rank-3 input, got shape {x.shape}")
    if context == 0:
        return x
    B, T, D = x.shape
    padded = np.zeros((B, T + 2 * context, D))
    padded[:, context : context + T] = x.value
    out = np.concatenate([padded[:, k : k + T] for k in range(2 * context + 1)], axis=-1)

    def vjp(g):
        gp = np.zeros_like(padded)
        for k in range(2 * context + 1):
            gp[:, k : k + T] += g[..., k * D : (k + 1) * D]
        return (gp[:, context : context + T],)

    return x.tape.record(out, (x,), vjp, "splice")


def softmax_xent(logits, targets, mask):
    """Mean cross-entropy over masked positions.

    ``logits`` is [B, T, K]; ``targets`` holds int codes [B, T]; ``mask`` is a
    boolean [B, T]. Unmasked positions contribute nothing.
    """
    lv = logits.value
    if lv.ndim != 3:
        raise ShapeError(f"softmax_xent expects [B, T, K] logits, got {lv.shape}")
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    if targets.shape != lv.shape[:2] or mask.shape != lv.shape[:2]:
        raise ShapeError("targets/mask must match the leading logits dims")
    K = lv.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= K):
        raise ShapeError(f"targets must lie in [0, {K})")
    count = int(mask.sum())
    if count == 0:
        raise DegenerateBatchError("no masked positions to score")
    shifted = lv - lv.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    picked = np.take_along_axis(shifted, targets[..., None], axis=-1)[..., 0]
    nll = lse - picked
    out = np.array(nll[mask].sum() / count)

    def vjp(g):
        p = np.exp(shifted - lse[..., None])
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        grad = (p - onehot) * (mask[..., None] / count)
        return (grad * g,)

    return logits.tape.record(out, (logits,), vjp, "softmax_xent")


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return a.tape.record(a.value + b.value, (a, b), lambda g: (g, g), "add")


def half_sum_sq(x):
    """0.5 * sum(x**2) as a scalar."""
    xv = x.value
    return x.tape.record(np.array(0.5 * np.sum(xv * xv)), (x,), lambda g: (g * xv,), "half_sum_sq")


def value_and_grad(loss_fn, tree, example):
    """Evaluate ``loss_fn(params, example)`` and its gradient.

    ``params`` maps layer names to tape variables; frozen layers enter as
    constants and are absent from the returned gradient dict.
    """
    tape = Tape()
    params = {
        layer.name: tape.constant(layer.value) if layer.frozen else tape.param(layer.value)
        for layer in tree.layers
    }
    loss = loss_fn(params, example)
    tape.backward(loss)
    grads = {}
    for layer in tree.layers:
        if layer.frozen:
            continue
        g = params[layer.name].grad
        if g is None:
            g = np.zeros_like(layer.value)
        elif not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in layer {layer.name!r}")
        grads[layer.name] = g
    return float(loss.value), grads


def grad(loss_fn, tree, example):
    return value_and_grad(loss_fn, tree, example)[1]


def loss_value(loss_fn, tree, example):
    """Forward pass only; every layer enters as a constant."""
    tape = Tape()
    params = {layer.name: tape.constant(layer.value) for layer in tree.layers}
    return float(loss_fn(params, example).value)
