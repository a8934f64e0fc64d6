"""Deep latent variable model: prior, decoder, encoder and imputation function.

The decoder maps a latent code to the parameters of a factorised observation
model over ``p`` features. The encoder maps ``iota(x_obs)`` (the observed row
with missing coordinates filled in by a fixed rule) to the parameters of a
factorised variational distribution over the ``d`` latent coordinates.
"""
from __future__ import annotations

import io
import json
import math
import struct

import numpy as np

from . import autodiff as ad
from .distributions import FAMILIES, Bernoulli, DiagGaussian, StudentT

# observation variance floor on standardized data, i.e. std >= 0.1
DEFAULT_OBS_VARIANCE_FLOOR = 0.01
VAR_SCALE_MIN = 1e-3
DF_MIN = 2.0 + 1e-3
CHECKPOINT_MAGIC = b"MIWAE1"

_N_HEADS = {"gaussian": 2, "studentt": 3, "bernoulli": 1}


def iota_zero(x, mask):
    """Fill missing coordinates with 0; observed ones pass through unchanged."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(np.asarray(mask).astype(bool), 0.0, x)


def iota_oracle(x_true, mask):
    """Oracle fill-in returning the ground-truth row. Test harness only."""
    if x_true is None:
        raise ValueError("oracle imputation needs the ground-truth values")
    return np.asarray(x_true, dtype=np.float64)


IOTAS = {"zero": iota_zero, "oracle": iota_oracle}


def glorot_uniform(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def he_normal(rng, fan_in, fan_out):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


class MLP:
    """Fully connected tanh network with a linear output layer."""

    def __init__(self, input_dim, output_dim, hidden=(128, 128, 128), rng=None):
        rng = np.random.default_rng(rng)
        self.input_dim = int(input_dim)
        self.output_dim = int(output_dim)
        self.hidden = tuple(int(h) for h in hidden)
        sizes = [self.input_dim, *self.hidden, self.output_dim]
        self.weights, self.biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            init = he_normal if last else glorot_uniform
            self.weights.append(ad.parameter(init(rng, fan_in, fan_out)))
            self.biases.append(ad.parameter(np.zeros(fan_out)))

    def __call__(self, x):
        h = ad.as_node(x)
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < n - 1:
                h = ad.tanh(h)
        return h

    def parameters(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def n_parameters(self):
        return sum(p.value.size for p in self.parameters())


def _split_heads(out, width, n_heads):
    return [out[..., i * width:(i + 1) * width] for i in range(n_heads)]


class DlvmModel:
    """Generative model ``z ~ N(0, I)``, ``x | z ~ obs_family(decoder(z))`` plus
    the amortised proposal ``z | x_obs ~ var_family(encoder(iota(x_obs)))``.

    Parameters
    ----------
    n_features : int
        Data dimension ``p``.
    latent_dim : int
        Latent dimension ``d``.
    hidden : sequence of int
        Hidden widths used for both networks unless ``encoder_hidden`` is given.
    obs_family, var_family : {'gaussian', 'studentt', 'bernoulli'}
        Observation and variational families (Bernoulli is observation-only).
    obs_variance_floor : float
        Lower bound on every observation variance (continuous families).
    iota : {'zero', 'oracle'}
    seed : int or numpy Generator
        Drives weight initialisation.
    """

    def __init__(self, n_features, latent_dim=10, hidden=(128, 128, 128),
                 obs_family="studentt", var_family="studentt",
                 obs_variance_floor=DEFAULT_OBS_VARIANCE_FLOOR, iota="zero",
                 encoder_hidden=None, seed=None):
        if obs_family not in FAMILIES:
            raise ValueError(f"unknown observation family {obs_family!r}")
        if var_family not in ("gaussian", "studentt"):
            raise ValueError(f"variational family must be reparameterisable, got {var_family!r}")
        if iota not in IOTAS:
            raise ValueError(f"unknown imputation function {iota!r}")
        if obs_variance_floor <= 0:
            raise ValueError("obs_variance_floor must be positive")
        self.n_features = int(n_features)
        self.latent_dim = int(latent_dim)
        self.hidden = tuple(hidden)
        self.encoder_hidden = tuple(hidden if encoder_hidden is None else encoder_hidden)
        self.obs_family = obs_family
        self.var_family = var_family
        self.obs_variance_floor = float(obs_variance_floor)
        self.iota = iota
        rng = np.random.default_rng(seed)
        enc_rng, dec_rng = rng.spawn(2)
        self.encoder = MLP(self.n_features, _N_HEADS[var_family] * self.latent_dim,
                           self.encoder_hidden, enc_rng)
        self.decoder = MLP(self.latent_dim, _N_HEADS[obs_family] * self.n_features,
                           self.hidden, dec_rng)

    @property
    def obs_scale_floor(self):
        return math.sqrt(self.obs_variance_floor)

    def parameters(self):
        return self.encoder.parameters() + self.decoder.parameters()

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def n_parameters(self):
        return self.encoder.n_parameters() + self.decoder.n_parameters()

    def prior(self, shape):
        return DiagGaussian.standard(shape)

    def impute_input(self, x, mask, x_true=None):
        if self.iota == "oracle":
            return iota_oracle(x_true, mask)
        return iota_zero(x, mask)

    def decode(self, z):
        """Observation distribution for codes ``z`` of shape ``(..., d)``."""
        z = ad.as_node(z)
        if z.shape[-1] != self.latent_dim:
            raise ad.ShapeError(f"codes have dimension {z.shape[-1]}, expected {self.latent_dim}")
        lead = z.shape[:-1]
        flat = ad.reshape(z, (-1, self.latent_dim)) if z.ndim != 2 else z
        out = self.decoder(flat)
        if z.ndim != 2:
            out = ad.reshape(out, (*lead, out.shape[-1]))
        p = self.n_features
        if self.obs_family == "bernoulli":
            return Bernoulli(out)
        heads = _split_heads(out, p, _N_HEADS[self.obs_family])
        scale = ad.softplus(heads[1]) + self.obs_scale_floor
        if self.obs_family == "gaussian":
            return DiagGaussian(heads[0], scale)
        return StudentT(heads[0], scale, ad.softplus(heads[2]) + DF_MIN)

    def encode(self, x, mask, x_true=None):
        """Variational distribution ``q(z | x_obs)`` for a batch of rows ``(B, p)``."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_features:
            raise ad.ShapeError(f"rows have {x.shape[-1]} features, expected {self.n_features}")
        out = self.encoder(self.impute_input(x, mask, x_true))
        heads = _split_heads(out, self.latent_dim, _N_HEADS[self.var_family])
        scale = ad.softplus(heads[1]) + VAR_SCALE_MIN
        if self.var_family == "gaussian":
            return DiagGaussian(heads[0], scale)
        return StudentT(heads[0], scale, ad.softplus(heads[2]) + DF_MIN)

    # -- (de)serialisation ----------------------------------------------------

    def get_config(self):
        return {
            "n_features": self.n_features,
            "latent_dim": self.latent_dim,
            "hidden": list(self.hidden),
            "encoder_hidden": list(self.encoder_hidden),
            "obs_family": self.obs_family,
            "var_family": self.var_family,
            "obs_variance_floor": self.obs_variance_floor,
            "iota": self.iota,
        }

    def get_weights(self):
        return [p.value.copy() for p in self.parameters()]

    def set_weights(self, arrays):
        params = self.parameters()
        if len(arrays) != len(params):
            raise ValueError(f"expected {len(params)} arrays, got {len(arrays)}")
        for p, a in zip(params, arrays):
            a = np.asarray(a, dtype=np.float64)
            if a.shape != p.value.shape:
                raise ValueError(f"weight shape {a.shape} != {p.value.shape}")
            p.value = a.copy()

    def copy(self):
        clone = DlvmModel(**self.get_config())
        clone.set_weights(self.get_weights())
        return clone


def save_checkpoint(path_or_file, model, train_config=None, extra=None):
    """Write ``model`` as magic + JSON header + raw little-endian float64 data.

    The layout carries no timestamps, so identical models give identical bytes.
    """
    weights = model.get_weights()
    header = {
        "format": CHECKPOINT_MAGIC.decode(),
        "model": model.get_config(),
        "shapes": [list(w.shape) for w in weights],
        "train_config": train_config or {},
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    for w in weights:
        buf.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
    data = buf.getvalue()
    if hasattr(path_or_file, "write"):
        path_or_file.write(data)
    else:
        with open(path_or_file, "wb") as fh:
            fh.write(data)


def load_checkpoint(path_or_file):
    """Inverse of :func:`save_checkpoint`; returns ``(model, header)``."""
    if hasattr(path_or_file, "read"):
        data = path_or_file.read()
    else:
        with open(path_or_file, "rb") as fh:
            data = fh.read()
    n = len(CHECKPOINT_MAGIC)
    if data[:n] != CHECKPOINT_MAGIC:
        raise ValueError("not a MIWAE1 checkpoint")
    (hlen,) = struct.unpack("<Q", data[n:n + 8])
    header = json.loads(data[n + 8:n + 8 + hlen].decode("utf-8"))
    offset = n + 8 + hlen
    arrays = []
    for shape in header["shapes"]:
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=offset)
        arrays.append(arr.reshape(shape).astype(np.float64))
        offset += 8 * size
    if offset != len(data):
        raise ValueError("checkpoint has trailing or missing bytes")
    model = DlvmModel(**header["model"])
    model.set_weights(arrays)
    return model, header
