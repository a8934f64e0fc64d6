"""Single and multiple imputation from a trained model.

Particles ``z_l ~ q(z | x_obs)`` are weighted by
``r_l = p(x_obs | z_l) p(z_l) / q(z_l | x_obs)``; the self-normalised weights
give estimates of conditional expectations of the missing coordinates, and
resampling particles in proportion to the weights gives approximate draws from
``p(x_miss | x_obs)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from ._random import substream
from .bounds import _expand

logger = logging.getLogger(__name__)

DEGENERACY_SPREAD = 700.0


def normalized_weights(log_r):
    """Max-shifted softmax of unnormalised log weights."""
    log_r = np.asarray(log_r, dtype=np.float64)
    w = np.exp(log_r - log_r.max())
    return w / w.sum()


def effective_sample_size(w):
    return 1.0 / float(np.sum(np.square(w)))


@dataclass
class WeightedParticles:
    z: np.ndarray          # (L, d)
    log_r: np.ndarray      # (L,)
    w: np.ndarray          # (L,)
    cond_mean: np.ndarray  # (L, n_missing): E[x_miss | z_l]
    x_m: np.ndarray = None  # (L, n_missing) draws of x_miss | z_l

    @property
    def ess(self):
        return effective_sample_size(self.w)


@dataclass
class ImputationResult:
    point_estimate: np.ndarray
    effective_sample_size: float
    L_used: int


def draw_particles(model, x, mask, L, rng, with_xm=False, chunk=1024):
    """Sample and weight ``L`` latent particles for one row.

    Decoding happens ``chunk`` particles at a time; only the weights and the
    per-particle summaries of the missing coordinates are kept.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    mask = np.asarray(mask).astype(bool).reshape(1, -1)
    miss = mask[0]
    d = model.latent_dim
    zs, logs, means, draws = [], [], [], []
    with ad.no_grad():
        q = _expand(model.encode(x, mask), (1, 1, d))
        done = 0
        while done < L:
            k = min(chunk, L - done)
            z, _ = q.rsample(rng, (k,))
            obs = model.decode(z)
            log_px = obs.log_prob_masked(x[:, None, :], mask[:, None, :], keep="observed")
            log_pz = ad.sum(model.prior(z.shape).log_prob(z), axis=-1)
            log_qz = ad.sum(q.log_prob(z), axis=-1)
            logs.append((log_px + log_pz - log_qz).value[0])
            zs.append(z.value[0])
            means.append(obs.mean()[0][:, miss])
            if with_xm:
                draws.append(obs.sample(rng)[0][:, miss])
            done += k
    log_r = np.concatenate(logs)
    spread = log_r.max() - log_r.min()
    if spread > DEGENERACY_SPREAD:
        logger.warning("importance weights span %.0f nats; estimates rest on few particles", spread)
    return WeightedParticles(
        z=np.concatenate(zs), log_r=log_r, w=normalized_weights(log_r),
        cond_mean=np.concatenate(means),
        x_m=np.concatenate(draws) if with_xm else None,
    )


def resample(w, M, rng):
    """Multinomial resampling: ``M`` indices drawn with replacement, ``P(l) = w_l``."""
    return rng.choice(len(w), size=M, replace=True, p=w)


def impute_expectation(particles, h):
    """Self-normalised estimate of ``E[h(x_miss) | x_obs]``.

    ``h`` receives the ``(L, n_missing)`` array of sampled completions and must
    return an array whose first axis has length ``L``.
    """
    if particles.x_m is None:
        raise ValueError("particles were drawn without missing-coordinate samples")
    values = np.asarray(h(particles.x_m), dtype=np.float64)
    return np.tensordot(particles.w, values, axes=(0, 0))


def impute_single(model, x, mask, L=10_000, rng=None, chunk=1024):
    """Weighted average of the per-particle conditional means of ``x_miss``."""
    rng = np.random.default_rng(rng)
    particles = draw_particles(model, x, mask, L, rng, chunk=chunk)
    estimate = particles.w @ particles.cond_mean
    return ImputationResult(estimate, particles.ess, L)


def impute_multiple(model, x, mask, L, M, rng=None, min_ratio=50, chunk=1024,
                    return_particles=False):
    """Sampling importance resampling: ``M`` completed copies of row ``x``.

    ``M`` particle indices are drawn with replacement with probabilities equal
    to the normalised weights (multinomial resampling). ``L >= min_ratio * M``
    is enforced unless ``min_ratio`` is None.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    if min_ratio is not None and L < min_ratio * M:
        raise ValueError(f"L={L} too small for M={M} (need L >= {min_ratio} * M)")
    rng = np.random.default_rng(rng)
    particles = draw_particles(model, x, mask, L, rng, with_xm=True, chunk=chunk)
    idx = resample(particles.w, M, rng)
    miss = np.asarray(mask).astype(bool).reshape(-1)
    out = np.repeat(np.asarray(x, dtype=np.float64).reshape(1, -1), M, axis=0)
    out[:, miss] = particles.x_m[idx]
    if return_particles:
        return out, particles
    return out


def impute_rows(model, X, mask, L=10_000, seed=0, chunk=1024):
    """Single-impute every row; returns ``(completed, ess)``.

    Row ``i`` uses the substream ``(seed, 'impute', i)``, so results do not
    depend on evaluation order.
    """
    X = np.asarray(X, dtype=np.float64)
    mask = np.asarray(mask).astype(bool)
    out = X.copy()
    ess = np.empty(X.shape[0])
    for i in range(X.shape[0]):
        res = impute_single(model, X[i], mask[i], L, substream(seed, "impute", i), chunk)
        out[i, mask[i]] = res.point_estimate
        ess[i] = res.effective_sample_size
    return out, ess


def multiple_impute_rows(model, X, mask, L=10_000, M=20, seed=0, min_ratio=50, chunk=1024):
    """Draw ``M`` completed data sets; returns ``(list of M arrays, ess)``."""
    X = np.asarray(X, dtype=np.float64)
    mask = np.asarray(mask).astype(bool)
    sets = np.repeat(X[None], M, axis=0)
    ess = np.empty(X.shape[0])
    for i in range(X.shape[0]):
        rows, particles = impute_multiple(model, X[i], mask[i], L, M,
                                          substream(seed, "impute", i), min_ratio,
                                          chunk, return_particles=True)
        sets[:, i, :] = rows
        ess[i] = particles.ess
    return list(sets), ess
