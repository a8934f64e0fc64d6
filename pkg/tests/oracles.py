"""Reference computations used as independent checks.

Nothing here goes through the package's autodiff or distribution code: the
densities come from scipy.stats and the integrals from closed forms, dense
quadrature or enumeration.
"""
import itertools

import numpy as np
from scipy import stats
from scipy.special import expit, logsumexp, softplus

from miwae.model import DlvmModel


def fa_model(W, b, sigma, enc_weight=None, enc_bias=None, var_family="gaussian"):
    """Linear-Gaussian model: x = W^T z + b + N(0, diag(sigma^2)), z ~ N(0, I).

    ``W`` has shape (d, p). The encoder is linear in the zero-imputed row;
    by default it ignores the data.
    """
    W = np.asarray(W, dtype=float)
    d, p = W.shape
    model = DlvmModel(p, d, hidden=(), obs_family="gaussian", var_family=var_family,
                      seed=0)
    raw_scale = np.log(np.expm1(np.asarray(sigma, dtype=float) - model.obs_scale_floor))
    dec_w = np.concatenate([W, np.zeros((d, p))], axis=1)
    dec_b = np.concatenate([np.asarray(b, dtype=float), raw_scale])
    n_enc_out = model.encoder.output_dim
    ew = np.zeros((p, n_enc_out)) if enc_weight is None else np.asarray(enc_weight, float)
    eb = np.zeros(n_enc_out) if enc_bias is None else np.asarray(enc_bias, float)
    model.set_weights([ew, eb, dec_w, dec_b])
    return model


def fa_loglik(x, mask, W, b, sigma):
    """Exact log p(x_obs) under the linear-Gaussian model."""
    W = np.asarray(W, float)
    obs = ~np.asarray(mask, bool)
    cov = W.T @ W + np.diag(np.asarray(sigma, float) ** 2)
    return stats.multivariate_normal(np.asarray(b)[obs], cov[np.ix_(obs, obs)]).logpdf(
        np.asarray(x)[obs])


def fa_posterior(x, mask, W, b, sigma):
    """Mean and covariance of z | x_obs."""
    W = np.asarray(W, float)
    obs = ~np.asarray(mask, bool)
    Wo = W[:, obs]
    prec = np.eye(W.shape[0]) + (Wo / np.asarray(sigma)[obs] ** 2) @ Wo.T
    cov = np.linalg.inv(prec)
    resid = (np.asarray(x) - np.asarray(b))[obs]
    mean = cov @ (Wo / np.asarray(sigma)[obs] ** 2) @ resid
    return mean, cov


def decoder_outputs(model, z):
    """Raw decoder output for a (n, d) array of codes, in plain numpy."""
    h = np.asarray(z, float)
    ws, bs = model.decoder.weights, model.decoder.biases
    for i, (w, b) in enumerate(zip(ws, bs)):
        h = h @ w.value + b.value
        if i < len(ws) - 1:
            h = np.tanh(h)
    return h


def obs_logpdf_grid(model, x, mask, zgrid):
    """log p(x_obs | z) for each z on a 1-d grid, via scipy.stats."""
    p = model.n_features
    out = decoder_outputs(model, zgrid.reshape(-1, 1))
    obs = ~np.asarray(mask, bool)
    x = np.asarray(x, float)
    if model.obs_family == "bernoulli":
        prob = expit(out)
        lp = stats.bernoulli.logpmf(x[None, :].round(), prob)
    else:
        loc = out[:, :p]
        scale = softplus(out[:, p:2 * p]) + model.obs_scale_floor
        if model.obs_family == "gaussian":
            lp = stats.norm.logpdf(x[None, :], loc, scale)
        else:
            df = softplus(out[:, 2 * p:]) + 2.0 + 1e-3
            lp = stats.t.logpdf(x[None, :], df, loc, scale)
    return (lp * obs[None, :]).sum(axis=1)


def quad_loglik(model, x, mask, lo=-8.0, hi=8.0, n=4001):
    """log p(x_obs) for a d=1 model by trapezoid quadrature over z."""
    z = np.linspace(lo, hi, n)
    f = obs_logpdf_grid(model, x, mask, z) + stats.norm.logpdf(z)
    wts = np.full(n, z[1] - z[0])
    wts[[0, -1]] *= 0.5
    return logsumexp(f, b=wts)


def bernoulli_conditional(model, x, mask, lo=-8.0, hi=8.0, n=4001):
    """Exact law of x_miss | x_obs for a d=1 Bernoulli model.

    Returns (completions, probabilities), enumerating every binary completion
    and integrating over z by trapezoid quadrature.
    """
    mask = np.asarray(mask, bool)
    miss = np.flatnonzero(mask)
    z = np.linspace(lo, hi, n)
    wts = np.full(n, z[1] - z[0])
    wts[[0, -1]] *= 0.5
    logits = decoder_outputs(model, z.reshape(-1, 1))
    prob = expit(logits)
    completions = np.array(list(itertools.product([0.0, 1.0], repeat=len(miss))))
    joint = []
    for c in completions:
        full = np.asarray(x, float).copy()
        full[miss] = c
        lp = stats.bernoulli.logpmf(full[None, :], prob).sum(axis=1)
        joint.append(logsumexp(lp + stats.norm.logpdf(z), b=wts))
    joint = np.array(joint)
    return completions, np.exp(joint - logsumexp(joint))
