"""Importance-weighted bound on the observed-data likelihood and its training loop."""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from ._random import substream

logger = logging.getLogger(__name__)

ESTIMATORS = ("standard", "pathwise")


@dataclass
class TrainConfig:
    """Optimisation settings. ``K=1`` gives the MVAE bound."""

    K: int = 20
    batch_size: int = 64
    steps: int = 50_000
    learning_rate: float = 1e-3
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    estimator: str = "standard"
    log_every: int = 100
    max_aborted_steps: int = 100

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}")
        self.adam_betas = tuple(self.adam_betas)

    @property
    def objective(self):
        return "MVAE" if self.K == 1 else "MIWAE"

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


@dataclass
class BoundValue:
    """Bound estimate for a batch: ``total == sum(per_row)``."""

    total: ad.Node
    per_row: ad.Node
    log_weights: ad.Node = field(repr=False)
    noise: np.ndarray = field(repr=False)


def _expand(dist, shape):
    return type(dist)(*(ad.reshape(p, shape) for p in dist.params()))


def log_importance_weights(model, x, mask, K, rng, estimator="standard", x_true=None,
                           noise=None):
    """``log p(x_obs|z) + log p(z) - log q(z|x_obs)`` for ``K`` draws per row.

    Returns ``(log_w, noise)`` with ``log_w`` a ``(B, K)`` node.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    mask = np.atleast_2d(np.asarray(mask)).astype(bool)
    B, d = x.shape[0], model.latent_dim
    q = _expand(model.encode(x, mask, x_true), (B, 1, d))
    z, noise = q.rsample(rng, (K,), noise=noise)
    try:
        terms = _weight_terms(model, q, z, x, mask, estimator)
    except ad.NonFiniteError as exc:
        row, term = _locate_failure(model, q, z, x, mask, estimator)
        where = f"while computing {term}" if term else "in the log weights"
        if row is not None:
            where += f", batch row {row}"
        raise ad.NonFiniteError(exc.op, where, row=row, term=term) from exc
    return terms[0] + terms[1] - terms[2], noise


TERMS = ("log p(x_obs|z)", "log p(z)", "log q(z|x_obs)")


def _weight_terms(model, q, z, x, mask, estimator):
    log_px = model.decode(z).log_prob_masked(x[:, None, :], mask[:, None, :], keep="observed")
    log_pz = ad.sum(model.prior(z.shape).log_prob(z), axis=-1)
    q_eval = q.detach() if estimator == "pathwise" else q
    log_qz = ad.sum(q_eval.log_prob(z), axis=-1)
    return log_px, log_pz, log_qz


def _locate_failure(model, q, z, x, mask, estimator):
    """Recompute row by row and term by term to find where a non-finite value appears."""
    with ad.no_grad():
        for i in range(x.shape[0]):
            qi = type(q)(*(ad.constant(p.value[i:i + 1]) for p in q.params()))
            zi = ad.constant(z.value[i:i + 1])
            xi, mi = x[i:i + 1], mask[i:i + 1]
            steps = (
                lambda: model.decode(zi).log_prob_masked(xi[:, None, :], mi[:, None, :],
                                                         keep="observed"),
                lambda: ad.sum(model.prior(zi.shape).log_prob(zi), axis=-1),
                lambda: ad.sum(qi.log_prob(zi), axis=-1),
            )
            for name, step in zip(TERMS, steps):
                try:
                    step()
                except ad.NonFiniteError:
                    return i, name
    return None, None


def miwae_bound(model, x, mask, K, rng, estimator="standard", x_true=None, noise=None):
    """Single Monte Carlo estimate of the K-sample bound for each row of a batch.

    Each row value is ``logsumexp_k(log w_k) - log K``; everything stays in log
    space. With ``estimator='pathwise'`` the variational density's parameters
    are wrapped in ``stop_gradient`` inside ``log q`` (same value, the score
    term drops out of the gradient).
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    log_w, noise = log_importance_weights(model, x, mask, K, rng, estimator, x_true, noise)
    per_row = ad.logsumexp(log_w, axis=1) - math.log(K)
    return BoundValue(ad.sum(per_row), per_row, log_w, noise)


def loglik_estimate(model, x, mask, L=5000, rng=None, x_true=None, chunk=1024):
    """Importance-sampling estimate ``log (1/L) sum_l r_l`` for one row."""
    if L < 1:
        raise ValueError("L must be >= 1")
    rng = np.random.default_rng(rng)
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    mask = np.asarray(mask).reshape(1, -1)
    xt = None if x_true is None else np.asarray(x_true, dtype=np.float64).reshape(1, -1)
    chunks = []
    with ad.no_grad():
        done = 0
        while done < L:
            k = min(chunk, L - done)
            log_w, _ = log_importance_weights(model, x, mask, k, rng, x_true=xt)
            chunks.append(log_w.value[0])
            done += k
    log_w = np.concatenate(chunks)
    m = log_w.max()
    return float(m + math.log(np.exp(log_w - m).sum()) - math.log(L))


def loglik_rows(model, X, M, L=5000, seed=0, chunk=1024):
    """Per-row log-likelihood estimates, each row on its own random substream."""
    X = np.asarray(X, dtype=np.float64)
    return np.array([
        loglik_estimate(model, X[i], M[i], L, substream(seed, "loglik", i), chunk=chunk)
        for i in range(X.shape[0])
    ])


class Adam:
    """Adam on a list of parameter nodes, reading ``p.grad`` as the loss gradient."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.value = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def gradient_step(model, optimizer, x, mask, config, rng, x_true=None):
    """One ascent step on the bound of a minibatch; returns its :class:`BoundValue`.

    Raises :class:`~miwae.autodiff.NonFiniteError` before touching the
    parameters if the forward value or any gradient is not finite.
    """
    model.zero_grad()
    try:
        bound = miwae_bound(model, x, mask, config.K, rng, config.estimator, x_true)
        ad.backward(-bound.total)
    except ad.NonFiniteError:
        model.zero_grad()
        raise
    optimizer.step()
    model.zero_grad()
    return bound


def iterate_minibatches(n, batch_size, rng):
    """Endless shuffled epochs; the last partial batch of an epoch is kept."""
    while True:
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield perm[start:start + batch_size]


def train(model, X, M, config, X_true=None, metrics=None):
    """Maximise the bound over ``config.steps`` minibatch steps.

    Parameters
    ----------
    model : DlvmModel
    X : ndarray (n, p)
        Data; entries where ``M == 1`` are never read.
    M : ndarray (n, p)
        Missingness mask, 1 = missing.
    config : TrainConfig
    X_true : ndarray, optional
        Ground truth, only needed by the oracle imputation function.
    metrics : callable, optional
        Called as ``metrics(step, objective, bound_per_row, wall_time)`` every
        ``config.log_every`` steps and at the last step.

    Returns
    -------
    list of (step, bound_per_row) tuples, one per logged step.
    """
    X = np.where(np.asarray(M).astype(bool), 0.0, np.asarray(X, dtype=np.float64))
    M = np.asarray(M).astype(bool)
    n = X.shape[0]
    rng = substream(config.seed, "train")
    opt = Adam(model.parameters(), config.learning_rate, config.adam_betas, config.adam_eps)
    batches = iterate_minibatches(n, config.batch_size, rng)
    history = []
    aborted = 0
    t0 = time.perf_counter()
    for step in range(1, config.steps + 1):
        idx = next(batches)
        xt = None if X_true is None else X_true[idx]
        try:
            bound = gradient_step(model, opt, X[idx], M[idx], config, rng, xt)
        except ad.NonFiniteError as exc:
            aborted += 1
            data_row = None if exc.row is None else int(idx[exc.row])
            logger.warning("step %d aborted (data row %s): %s", step, data_row, exc)
            if aborted > config.max_aborted_steps:
                raise
            continue
        if step % config.log_every == 0 or step == config.steps:
            value = float(bound.total.value) / len(idx)
            history.append((step, value))
            if metrics is not None:
                metrics(step, config.objective, value, time.perf_counter() - t0)
    return history
