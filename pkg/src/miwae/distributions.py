"""Factorised distribution families over the last axis of an array.

Three families are provided: :class:`DiagGaussian` (prior, observation model
or variational family), :class:`Bernoulli` (binary observation model, kept in
logit space) and :class:`StudentT` (observation model or variational family).
Parameters are :class:`~miwae.autodiff.Node` objects so that log densities are
differentiable; sampling that does not need gradients returns plain arrays.

Missingness masks use 1 for a missing coordinate and 0 for an observed one.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import expit

from . import autodiff as ad

LOG_2PI = math.log(2.0 * math.pi)
_KEEP = ("observed", "missing", "all")


def _selection(mask, keep, shape):
    if keep not in _KEEP:
        raise ValueError(f"keep must be one of {_KEEP}, got {keep!r}")
    if keep == "all":
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask).astype(bool)
    return ~mask if keep == "observed" else mask


class _Family:
    name = ""
    param_names = ()

    def params(self):
        return tuple(getattr(self, n) for n in self.param_names)

    def detach(self):
        """Same distribution with every parameter wrapped in ``stop_gradient``."""
        return type(self)(*(ad.stop_gradient(p) for p in self.params()))

    def log_prob(self, x):
        raise NotImplementedError

    def log_prob_masked(self, x, mask, keep="observed"):
        """Sum of per-coordinate log densities over the selected coordinates.

        Coordinates outside the selection never enter the computation (their
        entries in ``x`` may hold any sentinel, NaN included). An empty
        selection contributes 0.
        """
        x = np.asarray(x, dtype=np.float64)
        pshape = self.params()[0].shape
        try:
            full = np.broadcast_shapes(x.shape, pshape)
        except ValueError:
            raise ad.ShapeError(f"data shape {x.shape} does not match parameters {pshape}") from None
        if x.shape[-1] != pshape[-1]:
            raise ad.ShapeError(f"data dimension {x.shape[-1]} != parameter dimension {pshape[-1]}")
        sel = _selection(mask, keep, x.shape)
        if sel.shape[-1] != x.shape[-1]:
            raise ad.ShapeError(f"mask dimension {sel.shape[-1]} != data dimension {x.shape[-1]}")
        x_safe = np.where(sel, x, 0.0)
        weight = np.broadcast_to(sel, np.broadcast_shapes(sel.shape, full)).astype(np.float64)
        return ad.sum(self.log_prob(x_safe) * weight, axis=-1)

    def conditional_mean(self, mask=None):
        """Mean of each coordinate given the parameters, restricted to missing ones.

        Coordinates are independent given the parameters, so observed values
        play no role. With ``mask=None`` the full mean vector is returned.
        """
        m = self.mean()
        if mask is None:
            return m
        mask = np.asarray(mask).astype(bool)
        return m[..., mask] if mask.ndim == 1 else m[mask]

    def sample_missing(self, mask, rng):
        """Draw the missing coordinates (no gradients)."""
        draw = self.sample(rng)
        mask = np.asarray(mask).astype(bool)
        return draw[..., mask] if mask.ndim == 1 else draw[mask]


class DiagGaussian(_Family):
    name = "gaussian"
    param_names = ("loc", "scale")

    def __init__(self, loc, scale):
        self.loc = ad.as_node(loc)
        self.scale = ad.as_node(scale)

    @classmethod
    def standard(cls, shape):
        return cls(np.zeros(shape), np.ones(shape))

    def log_prob(self, x):
        z = (x - self.loc) / self.scale
        return -0.5 * ad.square(z) - ad.log(self.scale) - 0.5 * LOG_2PI

    def rsample(self, rng, sample_shape=(), noise=None):
        """Reparameterised draw ``loc + scale * eps``; returns ``(sample, eps)``.

        For parameters of shape ``(B, 1, d)`` the ``sample_shape`` replaces the
        singleton axis, giving draws of shape ``(B, K, d)``; otherwise it is
        prepended.
        """
        shape = _draw_shape(self.loc.shape, sample_shape)
        if noise is None:
            noise = rng.standard_normal(shape)
        return self.loc + self.scale * noise, noise

    def mean(self):
        return self.loc.value

    def sample(self, rng):
        loc, scale = self.loc.value, self.scale.value
        return loc + scale * rng.standard_normal(loc.shape)


class Bernoulli(_Family):
    name = "bernoulli"
    param_names = ("logits",)

    def __init__(self, logits):
        self.logits = ad.as_node(logits)

    def log_prob(self, x):
        # x*l - log(1 + e^l), stable for large |l|
        return x * self.logits - ad.softplus(self.logits)

    def rsample(self, rng, sample_shape=(), noise=None):
        raise TypeError("Bernoulli has no reparameterised sampler")

    def mean(self):
        return expit(self.logits.value)

    def sample(self, rng):
        p = self.mean()
        return (rng.random(p.shape) < p).astype(np.float64)


class StudentT(_Family):
    """Location-scale Student's t with per-coordinate degrees of freedom.

    ``df`` must exceed 2 so that means and variances exist; the networks
    produce it as ``2 + softplus(raw) + 1e-3``.
    """

    name = "studentt"
    param_names = ("loc", "scale", "df")

    def __init__(self, loc, scale, df):
        self.loc = ad.as_node(loc)
        self.scale = ad.as_node(scale)
        self.df = ad.as_node(df)

    def log_prob(self, x):
        df = self.df
        z = (x - self.loc) / self.scale
        norm = (ad.lgamma(0.5 * (df + 1.0)) - ad.lgamma(0.5 * df)
                - 0.5 * ad.log(df) - 0.5 * math.log(math.pi) - ad.log(self.scale))
        return norm - 0.5 * (df + 1.0) * ad.log1p(ad.square(z) / df)

    def standard_noise(self, rng, shape):
        # t = N(0,1) / sqrt(chi2_df / df), normal and chi-square from separate substreams
        df = np.broadcast_to(self.df.value, shape)
        normal_rng, chi_rng = rng.spawn(2)
        eps = normal_rng.standard_normal(shape)
        chi2 = chi_rng.chisquare(df)
        return eps / np.sqrt(chi2 / df)

    def rsample(self, rng, sample_shape=(), noise=None):
        """Draw ``loc + scale * t`` with ``t`` standard-t noise; returns ``(sample, t)``.

        Gradients reach ``loc`` and ``scale``; the noise is a constant with
        respect to ``df``.
        """
        shape = _draw_shape(self.loc.shape, sample_shape)
        if noise is None:
            noise = self.standard_noise(rng, shape)
        return self.loc + self.scale * noise, noise

    def mean(self):
        if np.any(self.df.value <= 1.0):
            raise ValueError("Student-t mean undefined for df <= 1")
        return self.loc.value

    def variance(self):
        df = self.df.value
        return self.scale.value ** 2 * df / (df - 2.0)

    def sample(self, rng):
        loc = self.loc.value
        return loc + self.scale.value * self.standard_noise(rng, loc.shape)


def _draw_shape(param_shape, sample_shape):
    sample_shape = tuple(sample_shape)
    if not sample_shape:
        return param_shape
    if len(param_shape) >= 3 and param_shape[1] == 1:
        return (param_shape[0], *sample_shape, *param_shape[2:])
    return (*sample_shape, *param_shape)


FAMILIES = {"gaussian": DiagGaussian, "bernoulli": Bernoulli, "studentt": StudentT}
