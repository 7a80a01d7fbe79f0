"""Losses, Adam, the four per-batch update routines, and the epoch loop.

Each update routine touches exactly its own parameter groups:

  reconstruction : encoder + embedding + decoder descend the MSE
  cond_adv       : adversarial head descends the condition cross-entropy on
                   fiber coordinates; the encoder ASCENDS the same loss
  cond_fitting   : condition head descends cross-entropy on real samples;
                   decoder + embedding then descend cross-entropy of the
                   head on reconstructions
  gan            : discriminator ascends log D(x) + log(1 - D(xhat));
                   encoder + embedding + decoder descend log(1 - D(xhat))

The epoch loop runs them in that order per batch, recomputing the
reconstruction before the fitting and GAN steps.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import NumericalError, Tape, Tensor
from .nn import (
    FiberedAutoencoder,
    classifier_graph,
    decode_graph,
    discriminator_logit_graph,
    embed_graph,
    encode_graph,
    wrap_layer_params,
)

__all__ = [
    "AdamState",
    "TrainConfig",
    "mse_loss",
    "cross_entropy",
    "adam_step",
    "reconstruction_update",
    "cond_adv_update",
    "cond_fitting_update",
    "gan_update",
    "train",
    "write_loss_trace",
]


# -- losses -------------------------------------------------------------------


def mse_loss(x, xhat) -> float:
    """Mean over the batch of squared Euclidean reconstruction errors."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    xhat = np.atleast_2d(np.asarray(xhat, dtype=np.float64))
    if x.shape != xhat.shape:
        raise ValueError(f"batch shapes differ: {x.shape} vs {xhat.shape}")
    diff = x - xhat
    return float(np.sum(diff * diff) / x.shape[0])


def cross_entropy(logits, c: int) -> float:
    """-log softmax(logits)[c], computed with log-sum-exp stabilization."""
    ell = np.asarray(logits, dtype=np.float64)
    if ell.ndim != 1:
        raise ValueError("cross_entropy expects a single score vector")
    if not 0 <= int(c) < ell.shape[0]:
        raise ValueError(f"class id {c} out of range [0, {ell.shape[0]})")
    shift = ell - ell.max()
    return float(np.log(np.sum(np.exp(shift))) - shift[int(c)])


def _mse_graph(tape: Tape, x_const: Tensor, xhat: Tensor) -> Tensor:
    n = x_const.shape[0]
    diff = tape.add(xhat, tape.mul(x_const, tape.constant(-1.0)))
    return tape.mul(tape.sqnorm(diff), tape.constant(1.0 / n))


def _xent_graph(tape: Tape, logits: Tensor, classes: np.ndarray) -> Tensor:
    classes = np.asarray(classes, dtype=np.intp)
    n = classes.shape[0]
    ls = tape.log_softmax(logits, axis=-1)
    picked = tape.slice(ls, (np.arange(n), classes))
    return tape.mul(tape.sum(picked), tape.constant(-1.0 / n))


def _log_d_pair_graph(tape: Tape, logit: Tensor) -> Tensor:
    """Columns [log D, log(1-D)] from discriminator logits, via 2-class log-softmax."""
    zero = tape.mul(logit, tape.constant(0.0))
    return tape.log_softmax(tape.concat([logit, zero], axis=1), axis=-1)


def _mean_column(tape: Tape, mat: Tensor, col: int) -> Tensor:
    n = mat.shape[0]
    picked = tape.slice(mat, (np.s_[:], col))
    return tape.mul(tape.sum(picked), tape.constant(1.0 / n))


# -- optimizer ------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment buffers shape-matched to one parameter list."""

    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params])


def adam_step(state: AdamState, params, grads, mu: float) -> list:
    """One bias-corrected Adam descent step; returns the updated parameter list."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("parameter, gradient and state lists differ in length")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.t
    corr2 = 1.0 - b2 ** state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / corr1
        v_hat = state.v[i] / corr2
        out.append(p - mu * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


# -- configuration ----------------------------------------------------------------


@dataclass
class TrainConfig:
    """Learning rates for the four objectives plus loop controls.

    Reconstruction keeps the highest rate by default (10x the rest). A zero
    rate turns the corresponding step into a no-op.
    """

    mu_mse: float = 1e-3
    mu_ac1: float = 1e-4
    mu_ac2: float = 1e-4
    mu_c1: float = 1e-4
    mu_c2: float = 1e-4
    mu_delta1: float = 1e-4
    mu_delta2: float = 1e-4
    grl_lambda: float = 1.0
    batch_size: int = 64
    epochs: int = 100
    seed: int = 0
    non_saturating_gan: bool = False

    def __post_init__(self):
        for name in ("mu_mse", "mu_ac1", "mu_ac2", "mu_c1", "mu_c2",
                     "mu_delta1", "mu_delta2"):
            if getattr(self, name) < 0:
                raise ValueError(f"learning rate {name} must be nonnegative")
        if self.grl_lambda < 0:
            raise ValueError("grl_lambda must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")


class TrainState:
    """One Adam state per (update, parameter-group) pairing."""

    def __init__(self, model: FiberedAutoencoder):
        self.adam = {
            "mse": AdamState.for_params(self._theta(model)),
            "ac1": AdamState.for_params(model.group_params("adv_classifier")),
            "ac2": AdamState.for_params(model.group_params("encoder")),
            "c1": AdamState.for_params(model.group_params("cond_classifier")),
            "c2": AdamState.for_params(
                model.group_params("decoder") + model.group_params("embedding")),
            "gan1": AdamState.for_params(model.group_params("discriminator")),
            "gan2": AdamState.for_params(self._theta(model)),
        }

    @staticmethod
    def _theta(model):
        return (model.group_params("encoder")
                + model.group_params("embedding")
                + model.group_params("decoder"))


def _wrap_groups(model, groups):
    """Tensors per group (requires_grad), plus the flat list in group order."""
    wrapped = {}
    flat = []
    for g in groups:
        if g == "embedding":
            ts = [Tensor(model.embedding, requires_grad=True)]
        else:
            ts = wrap_layer_params(getattr(model, g), requires_grad=True)
        wrapped[g] = ts
        flat.extend(ts)
    return wrapped, flat


def _assign(model, group, tensors, new_arrays_by_tensor):
    model.set_group_params(group, [new_arrays_by_tensor[t] for t in tensors])


# -- per-batch updates --------------------------------------------------------------


def reconstruction_update(model: FiberedAutoencoder, x, c, mu_mse: float,
                          state: AdamState) -> float:
    """One Adam descent step on the reconstruction MSE for encoder+embedding+decoder."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    c = np.atleast_1d(np.asarray(c, dtype=np.intp))
    tape = Tape()
    wrapped, flat = _wrap_groups(model, ("encoder", "embedding", "decoder"))
    x_t = tape.constant(x)
    f = encode_graph(tape, model, x_t, params=wrapped["encoder"])
    b = embed_graph(tape, wrapped["embedding"][0], c)
    xhat = decode_graph(tape, model, f, b, params=wrapped["decoder"])
    loss = _mse_graph(tape, x_t, xhat)
    if mu_mse > 0:
        grads = tape.backward(loss, flat)
        updated = adam_step(state, [t.values for t in flat], [grads[t] for t in flat], mu_mse)
        by_tensor = dict(zip(flat, updated))
        for g in ("encoder", "embedding", "decoder"):
            _assign(model, g, wrapped[g], by_tensor)
    return float(loss.values)


def cond_adv_update(model: FiberedAutoencoder, x, c, mu_ac1: float, mu_ac2: float,
                    state_ac: AdamState, state_e: AdamState) -> float:
    """Adversarial head descends the fiber-condition cross-entropy; encoder ascends it.

    Fiber coordinates are recomputed from the samples inside this routine so
    the ascent gradient reaches the encoder. Both gradients come from the same
    forward pass.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    c = np.atleast_1d(np.asarray(c, dtype=np.intp))
    tape = Tape()
    wrapped, flat = _wrap_groups(model, ("encoder", "adv_classifier"))
    f = encode_graph(tape, model, tape.constant(x), params=wrapped["encoder"])
    logits = classifier_graph(tape, model.adv_classifier, f, params=wrapped["adv_classifier"])
    loss = _xent_graph(tape, logits, c)
    if mu_ac1 > 0 or mu_ac2 > 0:
        grads = tape.backward(loss, flat)
        if mu_ac1 > 0:
            ts = wrapped["adv_classifier"]
            updated = adam_step(state_ac, [t.values for t in ts], [grads[t] for t in ts], mu_ac1)
            _assign(model, "adv_classifier", ts, dict(zip(ts, updated)))
        if mu_ac2 > 0:
            ts = wrapped["encoder"]
            # ascent: Adam(mu, -g) = -Adam(mu, g) exactly
            updated = adam_step(state_e, [t.values for t in ts], [-grads[t] for t in ts], mu_ac2)
            _assign(model, "encoder", ts, dict(zip(ts, updated)))
    return float(loss.values)


def cond_fitting_update(model: FiberedAutoencoder, x, c, mu_c1: float, mu_c2: float,
                        state_c: AdamState, state_dm: AdamState) -> tuple:
    """Condition head learns on real samples; decoder+embedding then descend the
    head's cross-entropy on reconstructions. Returns (real loss, recon loss)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    c = np.atleast_1d(np.asarray(c, dtype=np.intp))

    tape = Tape()
    wrapped, flat = _wrap_groups(model, ("cond_classifier",))
    logits = classifier_graph(tape, model.cond_classifier, tape.constant(x),
                              params=wrapped["cond_classifier"])
    loss_real = _xent_graph(tape, logits, c)
    if mu_c1 > 0:
        grads = tape.backward(loss_real, flat)
        ts = wrapped["cond_classifier"]
        updated = adam_step(state_c, [t.values for t in ts], [grads[t] for t in ts], mu_c1)
        _assign(model, "cond_classifier", ts, dict(zip(ts, updated)))

    # Reconstruction pass against the (just updated) condition head.
    tape2 = Tape()
    wrapped2, flat2 = _wrap_groups(model, ("decoder", "embedding"))
    enc_params = wrap_layer_params(model.encoder, requires_grad=False)
    f = encode_graph(tape2, model, tape2.constant(x), params=enc_params)
    b = embed_graph(tape2, wrapped2["embedding"][0], c)
    xhat = decode_graph(tape2, model, f, b, params=wrapped2["decoder"])
    logits_hat = classifier_graph(tape2, model.cond_classifier, xhat)
    loss_hat = _xent_graph(tape2, logits_hat, c)
    if mu_c2 > 0:
        grads2 = tape2.backward(loss_hat, flat2)
        updated = adam_step(state_dm, [t.values for t in flat2],
                            [grads2[t] for t in flat2], mu_c2)
        by_tensor = dict(zip(flat2, updated))
        for g in ("decoder", "embedding"):
            _assign(model, g, wrapped2[g], by_tensor)
    return float(loss_real.values), float(loss_hat.values)


def gan_update(model: FiberedAutoencoder, x, c, mu_d1: float, mu_d2: float,
               state_disc: AdamState, state_gen: AdamState,
               non_saturating: bool = False) -> tuple:
    """Discriminator ascends log D(x) + log(1-D(xhat)); the reconstruction
    parameters then descend log(1-D(xhat)) (or ascend log D(xhat) when the
    non-saturating variant is enabled). Returns (disc objective, gen objective)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    c = np.atleast_1d(np.asarray(c, dtype=np.intp))

    # Phase 1: discriminator step, reconstruction parameters frozen.
    tape = Tape()
    wrapped, flat = _wrap_groups(model, ("discriminator",))
    xhat_vals = _reconstruct_values(model, x, c)
    logit_real = discriminator_logit_graph(tape, model.discriminator, tape.constant(x),
                                           params=wrapped["discriminator"])
    logit_fake = discriminator_logit_graph(tape, model.discriminator, tape.constant(xhat_vals),
                                           params=wrapped["discriminator"])
    obj = tape.add(_mean_column(tape, _log_d_pair_graph(tape, logit_real), 0),
                   _mean_column(tape, _log_d_pair_graph(tape, logit_fake), 1))
    disc_value = float(obj.values)
    if mu_d1 > 0:
        loss = tape.mul(obj, tape.constant(-1.0))  # ascend the objective
        grads = tape.backward(loss, flat)
        ts = wrapped["discriminator"]
        updated = adam_step(state_disc, [t.values for t in ts], [grads[t] for t in ts], mu_d1)
        _assign(model, "discriminator", ts, dict(zip(ts, updated)))

    # Phase 2: generator step against the updated discriminator.
    tape2 = Tape()
    wrapped2, flat2 = _wrap_groups(model, ("encoder", "embedding", "decoder"))
    f = encode_graph(tape2, model, tape2.constant(x), params=wrapped2["encoder"])
    b = embed_graph(tape2, wrapped2["embedding"][0], c)
    xhat = decode_graph(tape2, model, f, b, params=wrapped2["decoder"])
    logit_fake2 = discriminator_logit_graph(tape2, model.discriminator, xhat)
    pair = _log_d_pair_graph(tape2, logit_fake2)
    if non_saturating:
        gen_obj = tape2.mul(_mean_column(tape2, pair, 0), tape2.constant(-1.0))
    else:
        gen_obj = _mean_column(tape2, pair, 1)
    gen_value = float(gen_obj.values)
    if mu_d2 > 0:
        grads2 = tape2.backward(gen_obj, flat2)
        updated = adam_step(state_gen, [t.values for t in flat2],
                            [grads2[t] for t in flat2], mu_d2)
        by_tensor = dict(zip(flat2, updated))
        for g in ("encoder", "embedding", "decoder"):
            _assign(model, g, wrapped2[g], by_tensor)
    return disc_value, gen_value


def _reconstruct_values(model, x, c):
    tape = Tape(record=False)
    f = encode_graph(tape, model, tape.constant(x))
    b = embed_graph(tape, tape.constant(model.embedding), c)
    return decode_graph(tape, model, f, b).values


# -- epoch loop -----------------------------------------------------------------


def train(model: FiberedAutoencoder, dataset, config: TrainConfig):
    """Run the four-objective loop over shuffled batches; returns (model, history).

    history rows are (epoch, step, objective, value); objectives are
    reconstruction, cond_adv, cond_fit_real, cond_fit_recon, gan_disc,
    gan_gen. Any non-finite loss aborts with diagnostics.
    """
    x, c = np.asarray(dataset.features, dtype=np.float64), np.asarray(dataset.conditions)
    if x.shape[0] == 0:
        raise ValueError("dataset is empty")
    state = TrainState(model)
    rng = np.random.default_rng(config.seed)
    history = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(x.shape[0])
        for lo in range(0, x.shape[0], config.batch_size):
            idx = order[lo:lo + config.batch_size]
            xb, cb = x[idx], c[idx]
            values = {}
            values["reconstruction"] = reconstruction_update(
                model, xb, cb, config.mu_mse, state.adam["mse"])
            values["cond_adv"] = cond_adv_update(
                model, xb, cb, config.mu_ac1, config.mu_ac2,
                state.adam["ac1"], state.adam["ac2"])
            values["cond_fit_real"], values["cond_fit_recon"] = cond_fitting_update(
                model, xb, cb, config.mu_c1, config.mu_c2,
                state.adam["c1"], state.adam["c2"])
            values["gan_disc"], values["gan_gen"] = gan_update(
                model, xb, cb, config.mu_delta1, config.mu_delta2,
                state.adam["gan1"], state.adam["gan2"],
                non_saturating=config.non_saturating_gan)
            for objective, value in values.items():
                if not math.isfinite(value):
                    raise NumericalError(
                        f"non-finite {objective} loss ({value}) at epoch {epoch}, step {step}")
                history.append((epoch, step, objective, value))
            step += 1
    return model, history


def write_loss_trace(path, history):
    """Loss traces as CSV with columns (epoch, step, objective, value)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "objective", "value"])
        for epoch, step, objective, value in history:
            writer.writerow([epoch, step, objective, repr(float(value))])
