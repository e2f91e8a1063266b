"""Per-example clipping, Gaussian noising and the DP-Adam update.

Three clipping modes are supported:

``global``
    scale each example's full gradient by ``min(1, C / ||g||)``.
``uniform``
    per-layer clipping with ``c_l = C / sqrt(L)``.
``dim``
    per-layer clipping with ``c_l = C * sqrt(dim_l / sum(dim))``.

Both per-layer splits are made in squared-norm space so that
``sum(c_l**2) == C**2`` and a single example still moves the summed gradient
by at most ``C`` in L2, which is what the accountant assumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from dppt.errors import ConfigError, SensitivityError, ShapeError
from dppt.params import ParamTree, flat_norm, sum_grads

CLIP_MODES = ("global", "uniform", "dim")
DEFAULT_GLOBAL_BOUND = 1.5
DEFAULT_PER_LAYER_BOUND = 0.1
SENSITIVITY_TOL = 1e-9


@dataclass(frozen=True)
class ClipSpec:
    mode: str = "global"
    bound: float = DEFAULT_GLOBAL_BOUND

    def __post_init__(self):
        if self.mode not in CLIP_MODES:
            raise ConfigError(f"clip mode must be one of {CLIP_MODES}, got {self.mode!r}")
        if not (self.bound > 0 and math.isfinite(self.bound)):
            raise ConfigError(f"clip bound must be positive and finite, got {self.bound}")

    @property
    def per_layer(self) -> bool:
        return self.mode != "global"

    @classmethod
    def default(cls, mode="global"):
        return cls(mode, DEFAULT_GLOBAL_BOUND if mode == "global" else DEFAULT_PER_LAYER_BOUND)


@dataclass(frozen=True)
class NoiseSpec:
    multiplier: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not (self.multiplier >= 0 and math.isfinite(self.multiplier)):
            raise ConfigError(f"noise multiplier must be >= 0, got {self.multiplier}")


def clip_global(g, C):
    norm = flat_norm(g)
    if norm <= C:
        return {k: v.copy() for k, v in g.items()}
    scale = C / norm
    return {k: v * scale for k, v in g.items()}


def per_layer_bounds(tree: ParamTree, spec: ClipSpec) -> dict[str, float]:
    return layer_bounds(tree.dims(trainable_only=True), spec)


def layer_bounds(dims, spec: ClipSpec) -> dict[str, float]:
    """Per-layer bounds from a ``{name: dim}`` mapping of trainable layers."""
    if not spec.per_layer:
        raise ConfigError("global clipping has no per-layer bounds")
    if not dims:
        raise ConfigError("no trainable layers to clip")
    C = spec.bound
    if spec.mode == "uniform":
        c = C / math.sqrt(len(dims))
        return {name: c for name in dims}
    total = sum(dims.values())
    return {name: C * math.sqrt(d / total) for name, d in dims.items()}


def clip_per_layer(g, bounds):
    out = {}
    for name, v in g.items():
        norm = float(np.sqrt(np.sum(v * v)))
        c = bounds[name]
        out[name] = v.copy() if norm <= c else v * (c / norm)
    return out


def layer_norms(g) -> dict[str, float]:
    return {k: float(np.sqrt(np.sum(v * v))) for k, v in g.items()}


def clip_example(g, spec: ClipSpec, bounds=None):
    if spec.per_layer:
        return clip_per_layer(g, bounds)
    return clip_global(g, spec.bound)


def clip_fraction(norms, bounds) -> float:
    """Fraction of norms strictly above their bound.

    Global mode: ``norms`` is a list of floats and ``bounds`` a float.
    Per-layer: ``norms`` is a list of ``{layer: norm}`` and ``bounds`` a dict;
    every (example, layer) pair counts once.
    """
    if not norms:
        raise ConfigError("clip_fraction needs at least one example")
    if isinstance(bounds, dict):
        pairs = [(n[k], bounds[k]) for n in norms for k in n]
    else:
        pairs = [(n, bounds) for n in norms]
    return sum(1 for n, c in pairs if n > c) / len(pairs)


def gaussian_noise(shapes, seed, step):
    """Standard normal arrays keyed by (seed, step) via a counter-based generator."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(step)])))
    sizes = [int(np.prod(s)) for s in shapes.values()]
    flat = rng.standard_normal(sum(sizes))
    out, pos = {}, 0
    for (name, shape), size in zip(shapes.items(), sizes):
        out[name] = flat[pos : pos + size].reshape(shape)
        pos += size
    return out


def aggregate_and_noise(clipped, C, noise: NoiseSpec, batch_size, step=0):
    """``(sum(clipped) + N(0, (z*C)^2 I)) / batch_size``.

    Raises :class:`SensitivityError` if any input exceeds ``C`` in L2, which
    would void the privacy guarantee. Noise is drawn once for the aggregate.
    """
    if not clipped:
        raise ConfigError("nothing to aggregate")
    for i, g in enumerate(clipped):
        n = flat_norm(g)
        if n > C * (1 + SENSITIVITY_TOL):
            raise SensitivityError(f"example {i} has norm {n} > bound {C}")
    total = sum_grads(clipped)
    if noise.multiplier > 0:
        std = noise.multiplier * C
        draws = gaussian_noise({k: v.shape for k, v in total.items()}, noise.seed, step)
        total = {k: v + std * draws[k] for k, v in total.items()}
    return {k: v / batch_size for k, v in total.items()}


def privatize(per_example, tree: ParamTree, clip: ClipSpec, noise: NoiseSpec, step=0):
    """Clip every example, aggregate and noise. Returns ``(noisy_grad, stats)``."""
    bounds = per_layer_bounds(tree, clip) if clip.per_layer else None
    clipped, norms, totals = [], [], []
    for g in per_example:
        totals.append(flat_norm(g))
        norms.append(layer_norms(g) if clip.per_layer else totals[-1])
        clipped.append(clip_example(g, clip, bounds))
    noisy = aggregate_and_noise(clipped, clip.bound, noise, len(per_example), step)
    stats = {
        "clip_fraction": clip_fraction(norms, bounds if clip.per_layer else clip.bound),
        "grad_norm_mean": float(np.mean(totals)),
    }
    return noisy, stats


class DPAdam:
    """Adam over the trainable layers of a tree, fed with privatised gradients.

    Nothing private happens here; the privacy comes from the gradient it is
    given. Frozen layers are never touched.
    """

    def __init__(self, tree: ParamTree, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.reset(tree)

    def reset(self, tree: ParamTree):
        """Zero both moments for the current trainable layers (step count kept)."""
        self.m = {l.name: np.zeros_like(l.value) for l in tree if not l.frozen}
        self.v = {l.name: np.zeros_like(l.value) for l in tree if not l.frozen}

    def sync(self, tree: ParamTree, reset=True):
        """Follow a change of frozen flags: drop moments of newly frozen layers."""
        if reset:
            self.reset(tree)
            return
        keep = set(tree.trainable_names)
        self.m = {k: v for k, v in self.m.items() if k in keep}
        self.v = {k: v for k, v in self.v.items() if k in keep}

    def step(self, tree: ParamTree, grad) -> ParamTree:
        if set(grad) != set(self.m):
            raise ShapeError("gradient layers do not match optimizer state")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, g in grad.items():
            layer = tree[name]
            if layer.frozen:
                raise ShapeError(f"gradient supplied for frozen layer {name!r}")
            if g.shape != layer.value.shape:
                raise ShapeError(f"layer {name!r}: gradient {g.shape} vs param {layer.value.shape}")
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            layer.value = layer.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return tree
