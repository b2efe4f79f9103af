"""Seq2seq LSTM autoencoder: build, train, forecast, score, checkpoint.

The network reads a normalized input window (L_in, 6), compresses it into the
final hidden state of the last encoder layer, repeats that latent vector L_out
times, runs the mirrored decoder stack over the repetition, and maps each
decoder step through a shared affine head back to 6 channels. The decoder
starts from zero state; the latent enters through its inputs only.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericError
from .nn_core import (
    DenseParams,
    LstmLayerParams,
    adam_init,
    adam_step,
    clip_global_norm,
    dense_backward,
    dense_forward,
    dropout_apply,
    init_dense,
    init_lstm,
    lstm_backward,
    lstm_forward,
    mse_loss,
)
from .timeseries import Normalizer, WindowedDataset

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "tipguard-checkpoint/1"

MIN_HIDDEN, MAX_HIDDEN = 4, 64
MAX_DEPTH = 3


@dataclass(frozen=True)
class AutoencoderSpec:
    """Architecture hyperparameters of one autoencoder."""

    input_len: int
    output_len: int
    encoder_layer_sizes: tuple
    dropout_rate: float = 0.2
    channels: int = 6

    def __post_init__(self):
        object.__setattr__(self, "encoder_layer_sizes",
                           tuple(int(h) for h in self.encoder_layer_sizes))
        if self.input_len < 1 or self.output_len < 1:
            raise ValueError("input_len and output_len must be positive")
        depth = len(self.encoder_layer_sizes)
        if not 1 <= depth <= MAX_DEPTH:
            raise ValueError(f"encoder depth must be 1..{MAX_DEPTH}, got {depth}")
        for h in self.encoder_layer_sizes:
            if not MIN_HIDDEN <= h <= MAX_HIDDEN:
                raise ValueError(
                    f"hidden sizes must lie in [{MIN_HIDDEN}, {MAX_HIDDEN}], got {h}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.channels < 1:
            raise ValueError("channels must be positive")

    @property
    def decoder_layer_sizes(self):
        """Decoder mirrors the encoder sizes in reverse order."""
        return tuple(reversed(self.encoder_layer_sizes))

    def to_dict(self):
        return {
            "input_len": self.input_len,
            "output_len": self.output_len,
            "encoder_layer_sizes": list(self.encoder_layer_sizes),
            "dropout_rate": self.dropout_rate,
            "channels": self.channels,
        }

    @staticmethod
    def from_dict(doc):
        return AutoencoderSpec(
            input_len=int(doc["input_len"]),
            output_len=int(doc["output_len"]),
            encoder_layer_sizes=tuple(doc["encoder_layer_sizes"]),
            dropout_rate=float(doc.get("dropout_rate", 0.2)),
            channels=int(doc.get("channels", 6)),
        )


def parameter_count(spec):
    """Closed-form parameter total: 4H(D+H+1) per LSTM layer plus the head."""
    total = 0
    d = spec.channels
    for h in spec.encoder_layer_sizes:
        total += 4 * h * (d + h + 1)
        d = h
    latent = spec.encoder_layer_sizes[-1]
    d = latent
    for h in spec.decoder_layer_sizes:
        total += 4 * h * (d + h + 1)
        d = h
    total += d * spec.channels + spec.channels
    return total


# ---------------------------------------------------------------------------
# network composition (size-agnostic; spec bounds enforced only via build())
# ---------------------------------------------------------------------------


@dataclass
class Seq2SeqNet:
    """Raw encoder/decoder/head stack without architecture bounds."""

    encoder: list
    decoder: list
    head: DenseParams
    output_len: int
    dropout_rate: float = 0.0

    def parameters(self):
        """Flat tensor list in a fixed order (encoder, decoder, head)."""
        out = []
        for layer in self.encoder + self.decoder:
            out.extend(layer.arrays())
        out.extend(self.head.arrays())
        return out


def build_net(channels, hidden_sizes, output_len, rng, dropout_rate=0.0):
    hidden_sizes = [int(h) for h in hidden_sizes]
    encoder, d = [], channels
    for h in hidden_sizes:
        encoder.append(init_lstm(d, h, rng))
        d = h
    decoder, d = [], hidden_sizes[-1]
    for h in reversed(hidden_sizes):
        decoder.append(init_lstm(d, h, rng))
        d = h
    head = init_dense(d, channels, rng)
    return Seq2SeqNet(encoder, decoder, head, output_len, dropout_rate)


@dataclass
class NetCache:
    enc_caches: list
    enc_masks: list
    dec_caches: list
    dec_masks: list
    head_input: np.ndarray
    input_len: int


def net_forward(net, x, training=False, rng=None):
    """Map (B, L_in, C) inputs to (B, L_out, C) forecasts.

    In training mode inverted dropout is applied to every LSTM layer's output
    hidden sequence (the latent is read downstream of the last encoder
    dropout). Returns (y, cache) where the cache feeds net_backward.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 3:
        raise ValueError(f"expected (B, L_in, C) input, got shape {x.shape}")
    if training and rng is None:
        raise ValueError("training-mode forward needs an rng for dropout")
    B = x.shape[0]

    enc_caches, enc_masks = [], []
    h = x
    for layer in net.encoder:
        h, _, cache = lstm_forward(h, layer)
        h, mask = dropout_apply(h, net.dropout_rate, rng, training)
        enc_caches.append(cache)
        enc_masks.append(mask)

    latent = h[:, -1, :]
    dec_in = np.repeat(latent[:, None, :], net.output_len, axis=1)

    dec_caches, dec_masks = [], []
    h = dec_in
    for layer in net.decoder:
        h, _, cache = lstm_forward(h, layer)
        h, mask = dropout_apply(h, net.dropout_rate, rng, training)
        dec_caches.append(cache)
        dec_masks.append(mask)

    y, head_input = dense_forward(h, net.head)
    return y, NetCache(enc_caches, enc_masks, dec_caches, dec_masks,
                       head_input, x.shape[1])


def net_backward(net, dy, cache):
    """Gradients of a scalar loss wrt every parameter, ordered as parameters()."""
    dh, head_grads = dense_backward(dy, cache.head_input, net.head)

    dec_grads = []
    for layer, lcache, mask in zip(reversed(net.decoder),
                                   reversed(cache.dec_caches),
                                   reversed(cache.dec_masks)):
        if mask is not None:
            dh = dh * mask
        dh, grads, _ = lstm_backward(dh, lcache)
        dec_grads.append(grads)
    dec_grads.reverse()

    # gradient reaching the repeated latent sums over the repetitions
    dlatent = dh.sum(axis=1)
    B = dlatent.shape[0]
    top = net.encoder[-1].hidden_size
    dh = np.zeros((B, cache.input_len, top))
    dh[:, -1, :] = dlatent

    enc_grads = []
    for layer, lcache, mask in zip(reversed(net.encoder),
                                   reversed(cache.enc_caches),
                                   reversed(cache.enc_masks)):
        if mask is not None:
            dh = dh * mask
        dh, grads, _ = lstm_backward(dh, lcache)
        enc_grads.append(grads)
    enc_grads.reverse()

    flat = []
    for grads in enc_grads + dec_grads:
        flat.extend([grads["W"], grads["U"], grads["b"]])
    flat.extend([head_grads["weight"], head_grads["bias"]])
    return flat


# ---------------------------------------------------------------------------
# model container, training, inference
# ---------------------------------------------------------------------------


@dataclass
class AutoencoderModel:
    spec: AutoencoderSpec
    net: Seq2SeqNet
    seed: int
    normalizer: Normalizer = None


def build(spec, seed):
    """Initialize a model from its spec; identical seeds give identical weights."""
    rng = np.random.default_rng(seed)
    net = build_net(spec.channels, spec.encoder_layer_sizes, spec.output_len,
                    rng, dropout_rate=spec.dropout_rate)
    return AutoencoderModel(spec=spec, net=net, seed=int(seed))


@dataclass
class TrainReport:
    """Per-epoch training trace plus final held-out metrics."""

    epochs: int
    final_train_loss: float
    final_val_loss: float
    val_r2: float
    wall_time_s: float
    train_curve: tuple
    val_curve: tuple
    val_r2_curve: tuple
    skipped_steps: int = 0

    def to_dict(self):
        return {
            "epochs": self.epochs,
            "final_train_loss": self.final_train_loss,
            "final_val_loss": self.final_val_loss,
            "val_r2": self.val_r2,
            "wall_time_s": self.wall_time_s,
            "train_curve": list(self.train_curve),
            "val_curve": list(self.val_curve),
            "val_r2_curve": list(self.val_r2_curve),
            "skipped_steps": self.skipped_steps,
        }


def _predict(net, inputs, chunk=2048):
    """Batched inference forward pass, dropout off, caches discarded."""
    outs = []
    for lo in range(0, inputs.shape[0], chunk):
        y, _ = net_forward(net, inputs[lo:lo + chunk], training=False)
        outs.append(y)
    return np.concatenate(outs, axis=0)


def validation_indices(n, validation_frac):
    """Deterministic held-out windows: every round(1/frac)-th index."""
    if validation_frac <= 0.0 or n < 2:
        return np.array([], dtype=int)
    stride = max(2, int(round(1.0 / validation_frac)))
    return np.arange(0, n, stride)


def train(model, dataset, budget, batch_size=16, validation_frac=0.1):
    """Minimize forecast MSE over shuffled mini-batches for `budget` epochs.

    The validation split is held out by window index (deterministic); the
    report carries full loss curves. Non-finite training loss aborts with a
    diagnostic; non-finite gradients skip the optimizer step and are counted.
    """
    if dataset.n == 0:
        raise DataError("cannot train on an empty window dataset")
    if budget < 1:
        raise ValueError("training budget must be >= 1 epoch")
    spec = model.spec
    if dataset.inputs.shape[1:] != (spec.input_len, spec.channels):
        raise DataError(
            f"dataset input windows {dataset.inputs.shape[1:]} do not match "
            f"spec ({spec.input_len}, {spec.channels})")
    if dataset.targets.shape[1:] != (spec.output_len, spec.channels):
        raise DataError(
            f"dataset target windows {dataset.targets.shape[1:]} do not match "
            f"spec ({spec.output_len}, {spec.channels})")

    val_idx = validation_indices(dataset.n, validation_frac)
    train_mask = np.ones(dataset.n, dtype=bool)
    train_mask[val_idx] = False
    x_train, y_train = dataset.inputs[train_mask], dataset.targets[train_mask]
    x_val, y_val = dataset.inputs[val_idx], dataset.targets[val_idx]
    if x_train.shape[0] == 0:  # degenerate split on tiny datasets
        x_train, y_train = dataset.inputs, dataset.targets

    rng = np.random.default_rng([int(model.seed), 0x7261])
    params = model.net.parameters()
    opt = adam_init(params)

    started = time.perf_counter()
    train_curve, val_curve, r2_curve = [], [], []
    skipped = 0
    n_train = x_train.shape[0]

    for epoch in range(budget):
        order = rng.permutation(n_train)
        loss_sum, n_seen = 0.0, 0
        for lo in range(0, n_train, batch_size):
            sel = order[lo:lo + batch_size]
            pred, cache = net_forward(model.net, x_train[sel], training=True, rng=rng)
            loss, dloss = mse_loss(pred, y_train[sel])
            if not np.isfinite(loss):
                raise NumericError(
                    f"non-finite training loss at epoch {epoch + 1}, "
                    f"batch {lo // batch_size + 1}")
            grads = net_backward(model.net, dloss, cache)
            clip_global_norm(grads, 5.0)
            if not adam_step(params, grads, opt):
                skipped += 1
            loss_sum += loss * sel.size
            n_seen += sel.size

        train_curve.append(loss_sum / n_seen)
        if x_val.shape[0] > 0:
            val_pred = _predict(model.net, x_val)
            val_curve.append(mse_loss(val_pred, y_val)[0])
            r2_curve.append(r2_score(val_pred, y_val))
        else:
            val_curve.append(train_curve[-1])
            r2_curve.append(float("nan"))
        log.debug("epoch %d/%d train=%.6f val=%.6f", epoch + 1, budget,
                  train_curve[-1], val_curve[-1])

    return TrainReport(
        epochs=budget,
        final_train_loss=float(train_curve[-1]),
        final_val_loss=float(val_curve[-1]),
        val_r2=float(r2_curve[-1]),
        wall_time_s=time.perf_counter() - started,
        train_curve=tuple(train_curve),
        val_curve=tuple(val_curve),
        val_r2_curve=tuple(r2_curve),
        skipped_steps=skipped,
    )


def forecast(model, window):
    """Forecast one normalized window: (L_in, C) -> (L_out, C), deterministic."""
    window = np.asarray(window, dtype=float)
    if window.shape != (model.spec.input_len, model.spec.channels):
        raise ValueError(
            f"input window shape {window.shape} does not match spec "
            f"({model.spec.input_len}, {model.spec.channels})")
    y, _ = net_forward(model.net, window[None], training=False)
    return y[0]


def forecast_batch(model, inputs, chunk=2048):
    """Forecast (N, L_in, C) -> (N, L_out, C) in bounded-memory chunks."""
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim != 3 or inputs.shape[1:] != (model.spec.input_len,
                                                model.spec.channels):
        raise ValueError(
            f"input batch shape {inputs.shape} does not match spec "
            f"(N, {model.spec.input_len}, {model.spec.channels})")
    return _predict(model.net, inputs, chunk=chunk)


def r2_score(predictions, targets):
    """Coefficient of determination pooled over every value.

    1 - SS_res/SS_tot with SS_tot about the pooled target mean; channels and
    horizon steps are weighted by their variance contribution.
    """
    predictions = np.asarray(predictions, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if predictions.shape != targets.shape:
        raise ValueError(
            f"shape mismatch: {predictions.shape} vs {targets.shape}")
    ss_res = float(np.sum((targets - predictions) ** 2))
    ss_tot = float(np.sum((targets - targets.mean()) ** 2))
    if ss_tot == 0.0:
        raise NumericError("R^2 undefined: target variance is zero")
    return 1.0 - ss_res / ss_tot


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------


def _named_parameters(net):
    named = []
    for i, layer in enumerate(net.encoder):
        named += [(f"encoder.{i}.W", layer.W), (f"encoder.{i}.U", layer.U),
                  (f"encoder.{i}.b", layer.b)]
    for i, layer in enumerate(net.decoder):
        named += [(f"decoder.{i}.W", layer.W), (f"decoder.{i}.U", layer.U),
                  (f"decoder.{i}.b", layer.b)]
    named += [("head.weight", net.head.weight), ("head.bias", net.head.bias)]
    return named


def save_checkpoint(model, path, extra=None):
    """Write the model as a self-describing JSON document.

    `extra` merges additional top-level keys (e.g. run provenance) into the
    document; loading ignores keys it does not know.
    """
    tensors = {
        name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
        for name, arr in _named_parameters(model.net)
    }
    doc = {
        "format": CHECKPOINT_FORMAT,
        "spec": model.spec.to_dict(),
        "seed": model.seed,
        "normalizer": None if model.normalizer is None else {
            "mean": model.normalizer.mean.tolist(),
            "scale": model.normalizer.scale.tolist(),
        },
        "parameters": tensors,
    }
    if extra:
        doc.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise DataError(
            f"unrecognized checkpoint format {doc.get('format')!r} in {path}")
    spec = AutoencoderSpec.from_dict(doc["spec"])
    model = build(spec, int(doc["seed"]))
    stored = doc["parameters"]
    for name, arr in _named_parameters(model.net):
        if name not in stored:
            raise DataError(f"checkpoint missing tensor {name!r}")
        entry = stored[name]
        data = np.asarray(entry["data"], dtype=float).reshape(entry["shape"])
        if data.shape != arr.shape:
            raise DataError(
                f"checkpoint tensor {name!r} has shape {data.shape}, "
                f"expected {arr.shape}")
        arr[...] = data
    if doc.get("normalizer") is not None:
        model.normalizer = Normalizer(
            mean=np.asarray(doc["normalizer"]["mean"], dtype=float),
            scale=np.asarray(doc["normalizer"]["scale"], dtype=float))
    return model
