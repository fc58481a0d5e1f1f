"""Autoencoder and adversarial autoencoder assembly and training.

The encoder maps images to a low-dimensional latent code, the decoder
maps codes back to images, and (for the adversarial variant) a
discriminator pushes the aggregate code distribution toward a standard
Gaussian prior. Per-sample weights scale every loss so the refinement
machinery can exclude (w=0) or repel (w<0) individual samples.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import nn

MODEL_MAGIC = b"AAEB"
MODEL_FORMAT_VERSION = 1

_KIND_CODES = {"dense": 0, "batchnorm": 1}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}
_ACT_CODES = {"relu": 0, "linear": 1, "sigmoid": 2}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


@dataclass(frozen=True)
class AutoencoderSpec:
    """Architecture hyperparameters shared by the plain and adversarial nets."""

    input_dim: int
    latent_dim: int
    hidden: tuple[int, ...] = (1000, 1000)
    encoder_batchnorm: bool = False
    epochs: int = 1000

    def __post_init__(self):
        if self.latent_dim >= self.input_dim:
            raise ValueError("latent_dim must be smaller than input_dim")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be positive")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


@dataclass(frozen=True)
class PriorSpec:
    """Standard multivariate Gaussian with independent unit-variance components."""

    dim: int

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("prior dimension must be positive")


class AaeModel:
    """Encoder/decoder pair with an optional latent-space discriminator."""

    def __init__(self, spec: AutoencoderSpec, encoder: nn.Mlp, decoder: nn.Mlp,
                 discriminator: nn.Mlp | None, prior: PriorSpec):
        if encoder.out_dim != spec.latent_dim or prior.dim != spec.latent_dim:
            raise ValueError("encoder output and prior must match latent_dim")
        if decoder.in_dim != spec.latent_dim or decoder.out_dim != spec.input_dim:
            raise ValueError("decoder must map latent_dim back to input_dim")
        if decoder.layers[-1].activation != "sigmoid":
            raise ValueError("decoder must end in a sigmoid layer")
        if discriminator is not None:
            if discriminator.in_dim != spec.latent_dim or discriminator.out_dim != 1:
                raise ValueError("discriminator must map latent_dim to one output")
            if discriminator.layers[-1].activation != "sigmoid":
                raise ValueError("discriminator must end in a sigmoid layer")
        self.spec = spec
        self.encoder = encoder
        self.decoder = decoder
        self.discriminator = discriminator
        self.prior = prior

    @property
    def has_discriminator(self) -> bool:
        return self.discriminator is not None


def _build_encoder(spec: AutoencoderSpec, rng) -> nn.Mlp:
    layers = []
    in_dim = spec.input_dim
    if spec.encoder_batchnorm:
        # Normalization sits after every encoder layer, with the
        # nonlinearity applied to the normalized values.
        for width in spec.hidden:
            layers.append(nn.DenseLayer(in_dim, width, "linear", rng))
            layers.append(nn.BatchNormLayer(width, activation="relu"))
            in_dim = width
        layers.append(nn.DenseLayer(in_dim, spec.latent_dim, "linear", rng))
        layers.append(nn.BatchNormLayer(spec.latent_dim, activation="linear"))
    else:
        for width in spec.hidden:
            layers.append(nn.DenseLayer(in_dim, width, "relu", rng))
            in_dim = width
        layers.append(nn.DenseLayer(in_dim, spec.latent_dim, "linear", rng))
    return nn.Mlp(layers)


def _build_decoder(spec: AutoencoderSpec, rng) -> nn.Mlp:
    layers = []
    in_dim = spec.latent_dim
    for width in reversed(spec.hidden):
        layers.append(nn.DenseLayer(in_dim, width, "relu", rng))
        in_dim = width
    layers.append(nn.DenseLayer(in_dim, spec.input_dim, "sigmoid", rng))
    return nn.Mlp(layers)


def build_autoencoder(spec: AutoencoderSpec, rng: np.random.Generator) -> AaeModel:
    """Plain autoencoder: no discriminator, no imposed prior pressure."""
    encoder = _build_encoder(spec, rng)
    decoder = _build_decoder(spec, rng)
    return AaeModel(spec, encoder, decoder, None, PriorSpec(spec.latent_dim))


def build_adversarial_autoencoder(spec: AutoencoderSpec, rng: np.random.Generator,
                                  disc_hidden: tuple[int, ...] = (1000, 1000)) -> AaeModel:
    """Adversarial autoencoder with a latent-code discriminator."""
    encoder = _build_encoder(spec, rng)
    decoder = _build_decoder(spec, rng)
    layers = []
    in_dim = spec.latent_dim
    for width in disc_hidden:
        layers.append(nn.DenseLayer(in_dim, width, "relu", rng))
        in_dim = width
    layers.append(nn.DenseLayer(in_dim, 1, "sigmoid", rng))
    return AaeModel(spec, encoder, decoder, nn.Mlp(layers), PriorSpec(spec.latent_dim))


def encode(model: AaeModel, batch, train: bool = False) -> np.ndarray:
    """Latent codes for a batch; eval mode uses running batchnorm statistics."""
    return model.encoder.forward(batch, train=train)[-1]


def reconstruct(model: AaeModel, batch) -> np.ndarray:
    """Eval-mode reconstruction g(f(x))."""
    return model.decoder.forward(encode(model, batch))[-1]


def reconstruction_errors(model: AaeModel, batch) -> np.ndarray:
    """Pixel-mean squared reconstruction error of every sample."""
    batch = nn.as_batch(batch, model.spec.input_dim)
    return nn.mse_per_row(reconstruct(model, batch), batch)


def prior_log_density(prior: PriorSpec, codes) -> np.ndarray:
    """Log-density of each code under the standard Gaussian prior."""
    z = nn.as_batch(codes, prior.dim)
    return -0.5 * prior.dim * np.log(2.0 * np.pi) - 0.5 * np.square(z).sum(axis=1)


def sample_prior(prior: PriorSpec, count: int, rng: np.random.Generator) -> np.ndarray:
    """Draw i.i.d. codes from the prior."""
    if count < 1:
        raise ValueError("count must be positive")
    return rng.standard_normal((count, prior.dim))


@dataclass
class EpochStats:
    """Summary of one training epoch.

    Loss figures are epoch sums divided by the number of trained samples.
    class_errors maps each side-channel label to eval-mode reconstruction
    error statistics over *all* samples of that label (trained or not).
    """

    mean_weighted_loss: float
    pos_loss_mass: float
    neg_loss_mass: float
    trained_samples: int
    disc_loss: float | None = None
    reg_loss: float | None = None
    class_errors: dict[int, tuple[float, float, int]] | None = None


def make_optimizers(model: AaeModel, lr: float = 1e-3,
                    lr_adversarial: float | None = None) -> dict[str, nn.AdamState]:
    """One Adam state per sub-network role.

    The discriminator and the encoder-as-generator run at lr_adversarial
    (default lr/10): Adam normalizes away gradient magnitude, so without
    the smaller rate the adversarial pressure overwhelms the weak
    reconstruction signal of rare samples and collapses latent structure.
    """
    if lr_adversarial is None:
        lr_adversarial = lr / 10.0
    opts = {
        "encoder": nn.AdamState(model.encoder.parameters(), lr=lr),
        "decoder": nn.AdamState(model.decoder.parameters(), lr=lr),
    }
    if model.has_discriminator:
        opts["discriminator"] = nn.AdamState(model.discriminator.parameters(),
                                             lr=lr_adversarial)
        opts["encoder_adversarial"] = nn.AdamState(model.encoder.parameters(),
                                                   lr=lr_adversarial)
    return opts


def _epoch_batches(weights, batch_size, rng):
    """Shuffled minibatch index lists over the samples with nonzero weight.

    Zero-weight samples are excluded outright: they would contribute no
    gradient but would still distort batch statistics.
    """
    included = np.flatnonzero(weights != 0.0)
    order = included[rng.permutation(included.size)]
    return [order[i:i + batch_size] for i in range(0, order.size, batch_size)]


def _class_error_stats(model, images, labels):
    errors = reconstruction_errors(model, images)
    stats = {}
    for label in np.unique(labels):
        errs = errors[labels == label]
        stats[int(label)] = (float(errs.mean()), float(errs.std()), int(errs.size))
    return stats


def _validate_weights(images, weights):
    images = nn.as_batch(images)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (images.shape[0],):
        raise ValueError("need exactly one weight per training sample")
    return images, w


def train_ae_epoch(model: AaeModel, images, weights, optimizers, rng,
                   batch_size: int = 128, labels=None) -> EpochStats:
    """One reconstruction-only epoch: one Adam update per minibatch."""
    images, w = _validate_weights(images, weights)
    total = pos = neg = 0.0
    trained = 0
    for idx in _epoch_batches(w, batch_size, rng):
        x = images[idx]
        bw = w[idx]
        z = model.encoder.forward(x, train=True)[-1]
        recon = model.decoder.forward(z, train=True)[-1]
        loss, d_recon = nn.weighted_mse_loss(recon, x, bw)
        contrib = bw * nn.mse_per_row(recon, x)
        pos += float(contrib[bw > 0].sum())
        neg += float(contrib[bw < 0].sum())
        total += loss
        d_z = model.decoder.backward(d_recon)
        model.encoder.backward(d_z)
        optimizers["encoder"].step(model.encoder.parameters(), model.encoder.gradients())
        optimizers["decoder"].step(model.decoder.parameters(), model.decoder.gradients())
        trained += idx.size
    class_errors = None if labels is None else _class_error_stats(model, images, labels)
    mean_loss = total / trained if trained else 0.0
    return EpochStats(mean_loss, pos, neg, trained, class_errors=class_errors)


def train_aae_epoch(model: AaeModel, images, weights, optimizers, rng,
                    batch_size: int = 128, labels=None) -> EpochStats:
    """One adversarial epoch: reconstruction, discriminator, regularization.

    Per minibatch, in order: (1) encoder+decoder minimize the weighted
    reconstruction loss; (2) the discriminator learns to separate prior
    samples (label 1) from encoder codes (label 0), with code weights
    clamped at max(w, 0); (3) the encoder is updated to pull D(f(x))
    toward 1 using the raw weights, so negative weights actively push
    codes away from the prior.
    """
    if not model.has_discriminator:
        raise ValueError("adversarial training requires a discriminator")
    images, w = _validate_weights(images, weights)
    disc = model.discriminator
    total = pos = neg = 0.0
    disc_total = reg_total = 0.0
    trained = 0
    for idx in _epoch_batches(w, batch_size, rng):
        x = images[idx]
        bw = w[idx]

        # (1) reconstruction
        z = model.encoder.forward(x, train=True)[-1]
        recon = model.decoder.forward(z, train=True)[-1]
        loss, d_recon = nn.weighted_mse_loss(recon, x, bw)
        contrib = bw * nn.mse_per_row(recon, x)
        pos += float(contrib[bw > 0].sum())
        neg += float(contrib[bw < 0].sum())
        total += loss
        d_z = model.decoder.backward(d_recon)
        model.encoder.backward(d_z)
        optimizers["encoder"].step(model.encoder.parameters(), model.encoder.gradients())
        optimizers["decoder"].step(model.decoder.parameters(), model.decoder.gradients())

        # (2) discriminator: prior samples vs current encoder codes
        z_real = sample_prior(model.prior, idx.size, rng)
        z_fake = model.encoder.forward(x, train=True)[-1]
        disc_in = np.concatenate([z_real, z_fake])
        disc_labels = np.concatenate([np.ones(idx.size), np.zeros(idx.size)])
        disc_weights = np.concatenate([np.ones(idx.size), np.maximum(bw, 0.0)])
        logits = disc.forward_logits(disc_in)
        d_loss, d_logits = nn.weighted_bce_loss(logits, disc_labels, disc_weights)
        disc.backward(d_logits, from_logits=True)
        optimizers["discriminator"].step(disc.parameters(), disc.gradients())
        disc_total += d_loss

        # (3) regularization: encoder chases D(f(x)) -> 1 with raw weights
        z = model.encoder.forward(x, train=True)[-1]
        logits = disc.forward_logits(z)
        r_loss, d_logits = nn.weighted_bce_loss(logits, np.ones(idx.size), bw)
        d_z = disc.backward(d_logits, from_logits=True)
        model.encoder.backward(d_z)
        optimizers["encoder_adversarial"].step(model.encoder.parameters(),
                                               model.encoder.gradients())
        reg_total += r_loss
        trained += idx.size

    class_errors = None if labels is None else _class_error_stats(model, images, labels)
    if trained:
        return EpochStats(total / trained, pos, neg, trained,
                          disc_loss=disc_total / trained, reg_loss=reg_total / trained,
                          class_errors=class_errors)
    return EpochStats(0.0, 0.0, 0.0, 0, disc_loss=0.0, reg_loss=0.0,
                      class_errors=class_errors)


# ---------------------------------------------------------------------------
# Persistence: flat binary container (see docs/model_format.md).
# ---------------------------------------------------------------------------

class ModelFormatError(ValueError):
    """Raised when a model container does not match the documented layout."""


def _net_layer_table(net: nn.Mlp) -> bytes:
    parts = [struct.pack("<I", len(net.layers))]
    for layer in net.layers:
        parts.append(struct.pack("<IIII", _KIND_CODES[layer.kind], layer.in_dim,
                                 layer.out_dim, _ACT_CODES[layer.activation]))
    return b"".join(parts)


def _net_parameter_blocks(net: nn.Mlp) -> bytes:
    parts = []
    for layer in net.layers:
        if layer.kind == "dense":
            parts.append(layer.weights.astype("<f8").tobytes())
            parts.append(layer.biases.astype("<f8").tobytes())
        else:
            parts.append(layer.gamma.astype("<f8").tobytes())
            parts.append(layer.beta.astype("<f8").tobytes())
            parts.append(layer.running_mean.astype("<f8").tobytes())
            parts.append(layer.running_var.astype("<f8").tobytes())
            parts.append(struct.pack("<dd", layer.momentum, layer.eps))
    return b"".join(parts)


def save_model(model: AaeModel, path) -> None:
    """Serialize to the versioned flat binary container."""
    spec = model.spec
    nets = [model.encoder, model.decoder]
    if model.has_discriminator:
        nets.append(model.discriminator)
    flags = (1 if model.has_discriminator else 0) | (2 if spec.encoder_batchnorm else 0)
    blob = [MODEL_MAGIC,
            struct.pack("<IIIII", MODEL_FORMAT_VERSION, spec.input_dim,
                        spec.latent_dim, flags, spec.epochs),
            struct.pack("<I", len(spec.hidden))]
    blob.extend(struct.pack("<I", h) for h in spec.hidden)
    blob.append(struct.pack("<I", len(nets)))
    blob.extend(_net_layer_table(net) for net in nets)
    blob.extend(_net_parameter_blocks(net) for net in nets)
    with open(path, "wb") as fh:
        fh.write(b"".join(blob))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ModelFormatError(f"{self.path}: container truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def doubles(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def _read_net(reader: _Reader) -> nn.Mlp:
    n_layers = reader.u32()
    layers = []
    for _ in range(n_layers):
        kind, in_dim, out_dim, act = (reader.u32(), reader.u32(),
                                      reader.u32(), reader.u32())
        if kind not in _KIND_NAMES or act not in _ACT_NAMES:
            raise ModelFormatError(f"{reader.path}: unknown layer kind/activation code")
        if _KIND_NAMES[kind] == "dense":
            layers.append(nn.DenseLayer(in_dim, out_dim, _ACT_NAMES[act]))
        else:
            if in_dim != out_dim:
                raise ModelFormatError(f"{reader.path}: batchnorm dims must match")
            layers.append(nn.BatchNormLayer(in_dim, activation=_ACT_NAMES[act]))
    return nn.Mlp(layers)


def _read_net_parameters(reader: _Reader, net: nn.Mlp) -> None:
    for layer in net.layers:
        if layer.kind == "dense":
            layer.weights = reader.doubles(layer.in_dim * layer.out_dim).reshape(
                layer.in_dim, layer.out_dim)
            layer.biases = reader.doubles(layer.out_dim)
        else:
            layer.gamma = reader.doubles(layer.out_dim)
            layer.beta = reader.doubles(layer.out_dim)
            layer.running_mean = reader.doubles(layer.out_dim)
            layer.running_var = reader.doubles(layer.out_dim)
            layer.momentum, layer.eps = struct.unpack("<dd", reader.take(16))


def load_model(path) -> AaeModel:
    """Load a model container written by save_model."""
    with open(path, "rb") as fh:
        buf = fh.read()
    reader = _Reader(buf, path)
    if reader.take(4) != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: not a model container (bad magic)")
    version = reader.u32()
    if version != MODEL_FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported container version {version}")
    input_dim, latent_dim, flags, epochs = (reader.u32(), reader.u32(),
                                            reader.u32(), reader.u32())
    hidden = tuple(reader.u32() for _ in range(reader.u32()))
    spec = AutoencoderSpec(input_dim, latent_dim, hidden,
                           encoder_batchnorm=bool(flags & 2), epochs=epochs)
    n_nets = reader.u32()
    expected = 3 if flags & 1 else 2
    if n_nets != expected:
        raise ModelFormatError(f"{path}: expected {expected} networks, found {n_nets}")
    nets = [_read_net(reader) for _ in range(n_nets)]
    for net in nets:
        _read_net_parameters(reader, net)
    if reader.pos != len(buf):
        raise ModelFormatError(f"{path}: trailing bytes after parameter blocks")
    discriminator = nets[2] if flags & 1 else None
    return AaeModel(spec, nets[0], nets[1], discriminator, PriorSpec(latent_dim))
