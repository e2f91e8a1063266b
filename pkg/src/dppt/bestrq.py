"""Toy BEST-RQ style masked prediction.

A frozen random projection followed by nearest-neighbour lookup in a frozen,
row-normalised codebook turns each clean feature frame into a discrete
target. Spans of input frames are replaced by Gaussian noise and a small
dense encoder is trained to predict the targets at the masked positions.

The synthetic "speech" is a sticky Markov chain over a few latent states
(phone analogues); each frame is the state's mean plus AR(1) noise. The
latent state doubles as the label of the downstream frame-classification
probe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dppt import autodiff as ad
from dppt.errors import ConfigError, ShapeError
from dppt.params import Layer, ParamTree

# stream tags for seeded generators
_TAG_MEANS, _TAG_CODEBOOK, _TAG_INIT = 2, 3, 4
SPLITS = {"pretrain": 0, "probe": 1, "eval": 6}


def stream(*keys) -> np.random.Generator:
    """Counter-style generator keyed by a tuple of non-negative ints."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in keys])))


@dataclass(frozen=True)
class DataSpec:
    seed: int = 0
    n_examples: int = 2000
    frames: int = 32
    d_feat: int = 8
    n_states: int = 4
    stay_prob: float = 0.95
    ar_coef: float = 0.7
    noise_scale: float = 1.2

    def __post_init__(self):
        if self.n_examples < 1 or self.frames < 2 or self.d_feat < 1 or self.n_states < 1:
            raise ConfigError("dataset sizes must be positive")
        if not (0 <= self.stay_prob <= 1 and -1 < self.ar_coef < 1):
            raise ConfigError("stay_prob must lie in [0, 1] and |ar_coef| < 1")


@dataclass(frozen=True)
class SynthBatch:
    features: np.ndarray  # [B, T, D_feat]
    ids: tuple
    labels: np.ndarray  # [B, T] latent state per frame


def state_means(spec: DataSpec) -> np.ndarray:
    return stream(spec.seed, _TAG_MEANS).standard_normal((spec.n_states, spec.d_feat))


def make_example(spec: DataSpec, idx, split="pretrain", means=None):
    """One sequence ``(features [T, D], labels [T])``, independent per id."""
    rng = stream(spec.seed, SPLITS[split], idx)
    means = state_means(spec) if means is None else means
    T, S = spec.frames, spec.n_states
    states = np.empty(T, dtype=np.int64)
    states[0] = rng.integers(S)
    moves = rng.random(T)
    jumps = rng.integers(1, max(S, 2), size=T)
    for t in range(1, T):
        states[t] = states[t - 1] if (S == 1 or moves[t] < spec.stay_prob) else (states[t - 1] + jumps[t]) % S
    rho, sigma = spec.ar_coef, spec.noise_scale
    xi = rng.standard_normal((T, spec.d_feat))
    e = np.empty_like(xi)
    e[0] = sigma * xi[0]
    scale = sigma * np.sqrt(1.0 - rho * rho)
    for t in range(1, T):
        e[t] = rho * e[t - 1] + scale * xi[t]
    return means[states] + e, states


def make_batch(spec: DataSpec, ids, split="pretrain") -> SynthBatch:
    means = state_means(spec)
    pairs = [make_example(spec, i, split, means) for i in ids]
    return SynthBatch(
        np.stack([p[0] for p in pairs]), tuple(int(i) for i in ids), np.stack([p[1] for p in pairs])
    )


@dataclass(frozen=True)
class Codebook:
    projection: np.ndarray  # [D_feat, D_code]
    entries: np.ndarray  # [K, D_code], unit rows
    seed: int

    @property
    def size(self) -> int:
        return self.entries.shape[0]


def make_codebook(d_feat, d_code, size, seed) -> Codebook:
    rng = stream(seed, _TAG_CODEBOOK)
    proj = rng.standard_normal((d_feat, d_code)) / np.sqrt(d_feat)
    entries = rng.standard_normal((size, d_code))
    entries /= np.linalg.norm(entries, axis=1, keepdims=True)
    proj.flags.writeable = False
    entries.flags.writeable = False
    return Codebook(proj, entries, seed)


def _normalize(v, eps=1e-12):
    return v / np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), eps)


def quantize_targets(features, cb: Codebook) -> np.ndarray:
    """Index of the nearest codebook row to each normalised projected frame."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[-1] != cb.projection.shape[0]:
        raise ShapeError(f"feature dim {features.shape[-1]} vs projection {cb.projection.shape}")
    z = _normalize(features @ cb.projection)
    d2 = ((z[..., None, :] - cb.entries) ** 2).sum(axis=-1)
    return np.argmin(d2, axis=-1)  # first minimum wins ties


@dataclass(frozen=True)
class MaskSpec:
    mask_prob: float = 0.1
    span_len: int = 2
    fill: str = "noise"

    def __post_init__(self):
        if not 0 < self.mask_prob < 1:
            raise ConfigError("mask_prob must lie in (0, 1)")
        if self.span_len < 1:
            raise ConfigError("span_len must be >= 1")
        if self.fill not in ("noise", "zero"):
            raise ConfigError("fill must be 'noise' or 'zero'")


def apply_mask(features, spec: MaskSpec, rng):
    """Replace random spans with fill frames. Returns ``(masked, mask)``.

    Each frame in ``[0, T - span_len]`` starts a span with probability
    ``mask_prob``; if an example draws no start, one start is picked
    uniformly so every example has at least one masked span.
    """
    features = np.asarray(features, dtype=np.float64)
    B, T, D = features.shape
    L = spec.span_len
    if T <= L:
        raise ConfigError(f"need more frames ({T}) than span_len ({L})")
    mask = np.zeros((B, T), dtype=bool)
    n_starts = T - L + 1
    for b in range(B):
        starts = np.flatnonzero(rng.random(n_starts) < spec.mask_prob)
        if starts.size == 0:
            starts = np.array([rng.integers(n_starts)])
        for s in starts:
            mask[b, s : s + L] = True
    out = features.copy()
    if spec.fill == "noise":
        out[mask] = rng.standard_normal((int(mask.sum()), D))
    else:
        out[mask] = 0.0
    return out, mask


@dataclass(frozen=True)
class ModelDims:
    d_feat: int = 8
    context: int = 2
    hidden: int = 144
    depth: int = 3
    codebook_size: int = 16
    code_dim: int = 8
    num_groups: int = 1
    norm_eps: float = 1e-4

    def __post_init__(self):
        if min(self.d_feat, self.hidden, self.depth, self.codebook_size, self.code_dim) < 1:
            raise ConfigError("model dims must be positive")
        if self.context < 0:
            raise ConfigError("context must be >= 0")
        if self.hidden % self.num_groups:
            raise ConfigError("hidden width not divisible by num_groups")


def init_encoder(dims: ModelDims, seed) -> ParamTree:
    """Random init of ``depth`` dense-groupnorm-gelu blocks plus a code head."""
    rng = stream(seed, _TAG_INIT)
    layers = []
    width = dims.d_feat * (2 * dims.context + 1)
    for i in range(dims.depth):
        p = f"block{i}"
        layers += [
            Layer(f"{p}.dense.w", rng.standard_normal((width, dims.hidden)) / np.sqrt(width)),
            Layer(f"{p}.dense.b", np.zeros(dims.hidden)),
            Layer(f"{p}.norm.gamma", np.ones(dims.hidden)),
            Layer(f"{p}.norm.beta", np.zeros(dims.hidden)),
        ]
        width = dims.hidden
    # small head so the untrained model sits at chance level
    layers += [
        Layer("head.w", 0.1 * rng.standard_normal((width, dims.codebook_size)) / np.sqrt(width)),
        Layer("head.b", np.zeros(dims.codebook_size)),
    ]
    return ParamTree(layers)


def encode(params, x, dims: ModelDims):
    h = ad.splice(x, dims.context)
    for i in range(dims.depth):
        p = f"block{i}"
        h = ad.dense(h, params[f"{p}.dense.w"], params[f"{p}.dense.b"])
        h = ad.group_norm(h, params[f"{p}.norm.gamma"], params[f"{p}.norm.beta"], dims.num_groups, dims.norm_eps)
        h = ad.gelu(h)
    return h


@dataclass(frozen=True)
class SSLExample:
    """Model-ready masked-prediction input: arrays with a leading batch axis."""

    inputs: np.ndarray  # [B, T, D] with masked spans filled
    codes: np.ndarray  # [B, T]
    mask: np.ndarray  # [B, T]

    def split(self):
        return [SSLExample(self.inputs[i : i + 1], self.codes[i : i + 1], self.mask[i : i + 1])
                for i in range(self.inputs.shape[0])]


def prepare_ssl(batch: SynthBatch, cb: Codebook, spec: MaskSpec, rng) -> SSLExample:
    codes = quantize_targets(batch.features, cb)
    masked, mask = apply_mask(batch.features, spec, rng)
    return SSLExample(masked, codes, mask)


def make_ssl_loss(dims: ModelDims):
    def loss_fn(params, ex: SSLExample):
        x = params["head.w"].tape.constant(ex.inputs)
        logits = ad.dense(encode(params, x, dims), params["head.w"], params["head.b"])
        return ad.softmax_xent(logits, ex.codes, ex.mask)

    return loss_fn


def ssl_loss(tree: ParamTree, batch: SynthBatch, cb: Codebook, spec: MaskSpec, rng, dims: ModelDims) -> float:
    """Masked-position cross-entropy of the code head on one batch."""
    return ad.loss_value(make_ssl_loss(dims), tree, prepare_ssl(batch, cb, spec, rng))


# --- downstream probe -------------------------------------------------------


@dataclass(frozen=True)
class ProbeSpec:
    n_train: int = 16
    n_test: int = 64
    steps: int = 200
    batch_size: int = 8
    lr: float = 0.01
    finetune_encoder: bool = False
    shuffle_labels: bool = False
    seed: int = 0


@dataclass(frozen=True)
class ProbeResult:
    accuracy: float
    loss: float


def _features(tree, x, dims):
    tape = ad.Tape()
    params = {l.name: tape.constant(l.value) for l in tree}
    return encode(params, tape.constant(x), dims).value


def finetune_probe(tree: ParamTree, data: DataSpec, dims: ModelDims, spec: ProbeSpec) -> ProbeResult:
    """Fit a fresh linear state classifier on top of the encoder.

    The code head is discarded. Only held-out probe examples are used, never
    the pre-training set. With ``finetune_encoder`` the encoder is trained
    along with the head.
    """
    train = make_batch(data, range(spec.n_train), split="probe")
    test = make_batch(data, range(spec.n_train, spec.n_train + spec.n_test), split="probe")
    labels = train.labels.copy()
    rng = stream(spec.seed, 5)
    if spec.shuffle_labels:
        flat = labels.reshape(-1)
        labels = flat[rng.permutation(flat.size)].reshape(labels.shape)

    enc = ParamTree(Layer(l.name, l.value.copy(), not spec.finetune_encoder)
                    for l in tree if not l.name.startswith("head."))
    n_cls = data.n_states
    layers = list(enc.layers) + [
        Layer("probe.w", np.zeros((dims.hidden, n_cls))),
        Layer("probe.b", np.zeros(n_cls)),
    ]
    model = ParamTree(layers)

    if spec.finetune_encoder:
        def loss_fn(params, ex):
            h = encode(params, params["probe.w"].tape.constant(ex[0]), dims)
            return ad.softmax_xent(ad.dense(h, params["probe.w"], params["probe.b"]), ex[1], ex[2])
        train_x = train.features
    else:
        def loss_fn(params, ex):
            h = params["probe.w"].tape.constant(ex[0])
            return ad.softmax_xent(ad.dense(h, params["probe.w"], params["probe.b"]), ex[1], ex[2])
        train_x = _features(enc, train.features, dims)

    from dppt.dp import DPAdam  # plain Adam: no clipping, no noise

    opt = DPAdam(model, lr=spec.lr)
    full = np.ones(labels.shape, dtype=bool)
    for _ in range(spec.steps):
        idx = rng.choice(spec.n_train, size=min(spec.batch_size, spec.n_train), replace=False)
        ex = (train_x[idx], labels[idx], full[idx])
        _, g = ad.value_and_grad(loss_fn, model, ex)
        opt.step(model, g)

    h = _features(model, test.features, dims)
    logits = h @ model["probe.w"].value + model["probe.b"].value
    pred = logits.argmax(axis=-1)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    nll = -np.take_along_axis(logp, test.labels[..., None], axis=-1).mean()
    return ProbeResult(float((pred == test.labels).mean()), float(nll))
