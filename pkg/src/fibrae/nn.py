"""Fully-connected components and the fibered auto-encoder assembly.

The latent space is split into a fiber block (per-sample variation, produced
by a sine-bottleneck encoder, so every coordinate lies in [-1, 1]) and a base
block (one learned embedding row per condition). The decoder receives both
blocks, with the latent pair re-concatenated into every layer beyond the
first (skip wiring), and ends in a configurable output activation (sigmoid by
default, matching data normalized to [0, 1]).

A model is immutable during inference and safe for concurrent reads;
training mutates parameters and requires exclusive access.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor

__all__ = [
    "ACTIVATIONS",
    "DenseLayer",
    "GradientReversal",
    "ModelConfig",
    "FiberedAutoencoder",
    "DecoderAdapter",
    "init_model",
    "encode",
    "embed",
    "decode",
    "grl_apply",
    "classifier_logits",
    "discriminator_prob",
]

ACTIVATIONS = ("sine", "relu", "sigmoid", "identity")


@dataclass
class DenseLayer:
    """Affine map plus elementwise activation. weights has shape (out, in)."""

    weights: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise ValueError("weights must be 2-D and bias 1-D")
        if self.weights.shape[0] != self.bias.shape[0]:
            raise ValueError(
                f"bias length {self.bias.shape[0]} does not match output dim {self.weights.shape[0]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation '{self.activation}', expected one of {ACTIVATIONS}")


@dataclass
class GradientReversal:
    """Identity on the forward pass; multiplies the upstream gradient by -lam."""

    lam: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("gradient reversal factor must be nonnegative")


@dataclass
class ModelConfig:
    input_dim: int
    fiber_dim: int
    base_dim: int
    conditions: int
    encoder_hidden: list = field(default_factory=lambda: [64, 32])
    decoder_hidden: list = field(default_factory=lambda: [32, 64])
    adv_hidden: list = field(default_factory=lambda: [32])
    cond_hidden: list = field(default_factory=lambda: [32])
    disc_hidden: list = field(default_factory=lambda: [32])
    omega0: float = 1.0
    decoder_output_activation: str = "sigmoid"

    def __post_init__(self):
        for name in ("input_dim", "fiber_dim", "base_dim", "conditions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.decoder_output_activation not in ("sigmoid", "identity"):
            raise ValueError("decoder output activation must be 'sigmoid' or 'identity'")


@dataclass
class FiberedAutoencoder:
    """Parameter bundle: encoder, condition embedding, decoder, and the three heads."""

    config: ModelConfig
    encoder: list            # DenseLayer, input_dim -> fiber_dim, sine throughout
    embedding: np.ndarray    # (conditions, base_dim)
    decoder: list            # DenseLayer with skip wiring, (fiber+base) -> input_dim
    adv_classifier: list     # DenseLayer over fiber coords, preceded by the GRL
    cond_classifier: list    # DenseLayer over sample space
    discriminator: list      # DenseLayer over sample space, final layer emits a logit
    grl: GradientReversal = field(default_factory=GradientReversal)
    condition_labels: list = None

    @property
    def fiber_dim(self):
        return self.config.fiber_dim

    @property
    def base_dim(self):
        return self.config.base_dim

    @property
    def latent_dim(self):
        return self.config.fiber_dim + self.config.base_dim

    @property
    def conditions(self):
        return self.config.conditions

    # Parameter groups, in the order used by optimizer states and archives.
    GROUPS = ("encoder", "embedding", "decoder", "adv_classifier",
              "cond_classifier", "discriminator")

    def group_params(self, group: str) -> list:
        if group == "embedding":
            return [self.embedding]
        layers = getattr(self, group)
        out = []
        for layer in layers:
            out.append(layer.weights)
            out.append(layer.bias)
        return out

    def set_group_params(self, group: str, arrays: list):
        if group == "embedding":
            (self.embedding,) = arrays
            return
        layers = getattr(self, group)
        if len(arrays) != 2 * len(layers):
            raise ValueError(f"expected {2 * len(layers)} arrays for group '{group}'")
        for i, layer in enumerate(layers):
            layer.weights = arrays[2 * i]
            layer.bias = arrays[2 * i + 1]

    def all_params(self) -> list:
        out = []
        for group in self.GROUPS:
            out.extend(self.group_params(group))
        return out

    def resolve_condition(self, label) -> int:
        """Map a condition label (original name or integer id) to its dense index."""
        if self.condition_labels is not None:
            text = str(label)
            for i, known in enumerate(self.condition_labels):
                if str(known) == text:
                    return i
        try:
            idx = int(label)
        except (TypeError, ValueError):
            idx = -1
        if 0 <= idx < self.conditions:
            return idx
        raise ValueError(f"unknown condition {label!r} (model has {self.conditions} conditions)")


# -- initialization ---------------------------------------------------------


def _init_layers(rng, dims, hidden_activation, final_activation, first_scale=1.0):
    layers = []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        if i == 0 and first_scale != 1.0:
            w = w * first_scale
        b = np.zeros(fan_out)
        act = final_activation if i == len(dims) - 2 else hidden_activation
        layers.append(DenseLayer(w, b, act))
    return layers


def init_model(config: ModelConfig, seed: int) -> FiberedAutoencoder:
    """Deterministic initialization: identical seed gives bit-identical parameters.

    Weights are uniform in +-sqrt(6/fan_in); the first encoder layer is scaled
    by the frequency omega0; embedding rows are normal(0, 0.1).
    """
    rng = np.random.default_rng(seed)
    cfg = config
    d_latent = cfg.fiber_dim + cfg.base_dim
    encoder = _init_layers(
        rng, [cfg.input_dim, *cfg.encoder_hidden, cfg.fiber_dim],
        "sine", "sine", first_scale=cfg.omega0,
    )
    embedding = rng.normal(0.0, 0.1, size=(cfg.conditions, cfg.base_dim))
    # Decoder layers beyond the first also receive the latent pair (skip wiring).
    dec_dims_in = [d_latent] + [h + d_latent for h in cfg.decoder_hidden]
    dec_dims_out = [*cfg.decoder_hidden, cfg.input_dim]
    decoder = []
    for i, (din, dout) in enumerate(zip(dec_dims_in, dec_dims_out)):
        bound = np.sqrt(6.0 / din)
        w = rng.uniform(-bound, bound, size=(dout, din))
        act = cfg.decoder_output_activation if i == len(dec_dims_out) - 1 else "sine"
        decoder.append(DenseLayer(w, np.zeros(dout), act))
    adv = _init_layers(rng, [cfg.fiber_dim, *cfg.adv_hidden, cfg.conditions], "relu", "identity")
    cond = _init_layers(rng, [cfg.input_dim, *cfg.cond_hidden, cfg.conditions], "relu", "identity")
    disc = _init_layers(rng, [cfg.input_dim, *cfg.disc_hidden, 1], "relu", "identity")
    return FiberedAutoencoder(
        config=cfg, encoder=encoder, embedding=embedding, decoder=decoder,
        adv_classifier=adv, cond_classifier=cond, discriminator=disc,
    )


# -- graph builders (tape-level) ---------------------------------------------


def wrap_layer_params(layers, requires_grad: bool) -> list:
    """[W0, b0, W1, b1, ...] as Tensors sharing the layer arrays."""
    out = []
    for layer in layers:
        out.append(Tensor(layer.weights, requires_grad=requires_grad))
        out.append(Tensor(layer.bias, requires_grad=requires_grad))
    return out


def _apply_activation(tape: Tape, x: Tensor, activation: str) -> Tensor:
    if activation == "sine":
        return tape.sin(x)
    if activation == "relu":
        return tape.relu(x)
    if activation == "sigmoid":
        return tape.sigmoid(x)
    return x


def dense_forward(tape: Tape, x: Tensor, w: Tensor, b: Tensor, activation: str) -> Tensor:
    pre = tape.add(tape.matmul(x, w, transpose_b=True), b)
    return _apply_activation(tape, pre, activation)


def mlp_forward(tape: Tape, x: Tensor, layers, params) -> Tensor:
    h = x
    for i, layer in enumerate(layers):
        h = dense_forward(tape, h, params[2 * i], params[2 * i + 1], layer.activation)
    return h


def encode_graph(tape: Tape, model: FiberedAutoencoder, x: Tensor, params=None) -> Tensor:
    if params is None:
        params = wrap_layer_params(model.encoder, requires_grad=False)
    return mlp_forward(tape, x, model.encoder, params)


def embed_graph(tape: Tape, embedding: Tensor, conditions: np.ndarray) -> Tensor:
    return tape.slice(embedding, (np.asarray(conditions, dtype=np.intp),))


def clamp_graph(tape: Tape, x: Tensor, low: float = -1.0, high: float = 1.0) -> Tensor:
    # clamp(x) = x - relu(x - high) + relu(low - x); gradient 1 inside, 0 outside
    neg1 = tape.constant(-1.0)
    over = tape.relu(tape.add(x, tape.constant(-high)))
    under = tape.relu(tape.add(tape.mul(x, neg1), tape.constant(low)))
    return tape.add(tape.add(x, tape.mul(over, neg1)), under)


def decode_graph(tape: Tape, model: FiberedAutoencoder, f: Tensor, b: Tensor,
                 params=None, clamp: bool = True) -> Tensor:
    if params is None:
        params = wrap_layer_params(model.decoder, requires_grad=False)
    if clamp and np.any(np.abs(f.values) > 1.0):
        f = clamp_graph(tape, f)
    latent = tape.concat([f, b], axis=1)
    h = latent
    for i, layer in enumerate(model.decoder):
        inp = h if i == 0 else tape.concat([h, latent], axis=1)
        h = dense_forward(tape, inp, params[2 * i], params[2 * i + 1], layer.activation)
    return h


def classifier_graph(tape: Tape, layers, x: Tensor, params=None) -> Tensor:
    if params is None:
        params = wrap_layer_params(layers, requires_grad=False)
    return mlp_forward(tape, x, layers, params)


def discriminator_logit_graph(tape: Tape, layers, x: Tensor, params=None) -> Tensor:
    return classifier_graph(tape, layers, x, params)


def grl_apply(layer_or_model, x, tape: Tape = None):
    """Forward identity; the reverse sweep scales the upstream gradient by -lam."""
    grl = layer_or_model.grl if isinstance(layer_or_model, FiberedAutoencoder) else layer_or_model
    if tape is None:
        return np.array(np.asarray(x, dtype=np.float64), copy=True)
    return tape.scale_grad(x, -grl.lam)


# -- array-level operations ---------------------------------------------------


def _as_batch(x, dim, what):
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ValueError(f"{what} must have length {dim}, got shape {np.shape(x)}")
    return arr, single


def encode(model: FiberedAutoencoder, x) -> np.ndarray:
    """Fiber coordinates of a sample (or batch); every component in [-1, 1]."""
    arr, single = _as_batch(x, model.config.input_dim, "sample")
    tape = Tape(record=False)
    out = encode_graph(tape, model, tape.constant(arr)).values
    return out[0] if single else out


def embed(model: FiberedAutoencoder, c) -> np.ndarray:
    """Base coordinate of a condition id: row c of the embedding table."""
    c_arr = np.asarray(c)
    if np.any(c_arr < 0) or np.any(c_arr >= model.conditions):
        raise ValueError(f"condition id {c} out of range [0, {model.conditions})")
    return np.array(model.embedding[c_arr], copy=True)


def decode(model: FiberedAutoencoder, f, b) -> np.ndarray:
    """Reconstruction from latent coordinates; fiber block clamped to [-1, 1] if needed."""
    f_arr, single_f = _as_batch(f, model.fiber_dim, "fiber coordinates")
    b_arr, single_b = _as_batch(b, model.base_dim, "base coordinates")
    if f_arr.shape[0] != b_arr.shape[0]:
        raise ValueError("fiber and base batches differ in length")
    if np.any(np.abs(f_arr) > 1.0):
        warnings.warn("fiber coordinates outside [-1, 1] were clamped before decoding")
    tape = Tape(record=False)
    out = decode_graph(tape, model, tape.constant(f_arr), tape.constant(b_arr)).values
    return out[0] if (single_f and single_b) else out


def reconstruct(model: FiberedAutoencoder, x, c) -> np.ndarray:
    arr, single = _as_batch(x, model.config.input_dim, "sample")
    c_arr = np.atleast_1d(np.asarray(c))
    f = encode(model, arr)
    b = embed(model, c_arr)
    out = decode(model, f, b)
    return out[0] if single else out


def classifier_logits(layers, x) -> np.ndarray:
    """Unnormalized scores; the loss applies log-softmax, not this op."""
    in_dim = layers[0].weights.shape[1]
    arr, single = _as_batch(x, in_dim, "classifier input")
    tape = Tape(record=False)
    out = classifier_graph(tape, layers, tape.constant(arr)).values
    return out[0] if single else out


def discriminator_prob(layers, x) -> np.ndarray:
    """Probability that a sample is real, strictly inside (0, 1)."""
    in_dim = layers[0].weights.shape[1]
    arr, single = _as_batch(x, in_dim, "discriminator input")
    tape = Tape(record=False)
    logit = discriminator_logit_graph(tape, layers, tape.constant(arr))
    prob = tape.sigmoid(logit).values[:, 0]
    return float(prob[0]) if single else prob


class DecoderAdapter:
    """Batched decoder surface consumed by the geometry and geodesic modules.

    Wraps a model's decoder with frozen parameters; fiber coordinates outside
    [-1, 1] are clamped before decoding (out-of-cube path samples are allowed
    transiently and counted by the solver).
    """

    def __init__(self, model: FiberedAutoencoder):
        self.model = model
        self.latent_dim = model.latent_dim
        self.output_dim = model.config.input_dim
        self.fiber_dim = model.fiber_dim

    def forward(self, tape: Tape, z: Tensor) -> Tensor:
        m = self.fiber_dim
        f = tape.slice(z, (np.s_[:], np.s_[:m]))
        b = tape.slice(z, (np.s_[:], np.s_[m:]))
        params = wrap_layer_params(self.model.decoder, requires_grad=False)
        return decode_graph(tape, self.model, f, b, params=params, clamp=True)
