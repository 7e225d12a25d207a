"""Exact SSVAE objectives, bounds and identities.

Every expectation over data and latents is an exact finite sum. The only
sampled quantity is the finite-N InfoNCE estimate, whose draws come from
the package's SplitMix64 stream.
"""

from dataclasses import dataclass

import numpy as np

from .errors import AbsoluteContinuity, UnreachedLatent, ValidationError
from .model import (
    InfoNCEPrior,
    induced_latent_joint,
    induced_latent_marginal,
    resolve_prior,
)
from .prob import FiniteDistribution, kl_divergence, mutual_information, xlogy
from .rng import SplitMix64


def _probs(d):
    return d.probs if hasattr(d, "probs") else np.asarray(d, dtype=np.float64)


def unstructured_elbo(ptrue, encoder, prior_z, x):
    """L(x) = log Ptrue(x) + E_{Q(z|x)}[log P(z) / Q(z)]."""
    p = _probs(ptrue)
    Qzx = _probs(encoder)
    Pz = _probs(prior_z)
    i = ptrue.space.index(x) if hasattr(ptrue, "space") else int(x)
    qz = p @ Qzx
    row = Qzx[i]
    labels = encoder.target_space.labels if hasattr(encoder, "target_space") else range(len(row))
    total = 0.0
    for k, w in enumerate(row):
        if w <= 0:
            continue
        if Pz[k] <= 0:
            raise AbsoluteContinuity(labels[k])
        if qz[k] <= 0:
            raise UnreachedLatent(labels[k])
        total += w * (np.log(Pz[k]) - np.log(qz[k]))
    return float(np.log(p[i]) + total)


def expected_unstructured_elbo(ptrue, encoder, prior_z):
    """(value, kl_part, const_part) with value = const_part - KL(Q(z) || P(z))."""
    p = _probs(ptrue)
    qz = FiniteDistribution(encoder.target_space, p @ _probs(encoder))
    pz = prior_z if isinstance(prior_z, FiniteDistribution) else FiniteDistribution(encoder.target_space, prior_z)
    kl = kl_divergence(qz, pz)
    const = float(np.sum(xlogy(p, p)))
    return const - kl, kl, const


def _latent_ratio(inst, prior_joint=None):
    """log P(z, z') - log Q(z) - log Q(z'), with -inf where P = 0."""
    P = (prior_joint if prior_joint is not None else resolve_prior(inst)).probs
    qz = induced_latent_marginal(inst, "c").probs
    qzp = induced_latent_marginal(inst, "x").probs
    # NaN or -inf mark cells outside the support; _check_support reports them
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(P) - np.log(qz)[:, None] - np.log(qzp)[None, :]


def const_term(inst, c, x):
    D = inst.data_joint
    i, j = D.row_space.index(c), D.col_space.index(x)
    return float(np.log(D.probs[i].sum()) + np.log(D.probs[:, j].sum()))


def _posterior_cells(inst, i, j):
    return np.outer(inst.encoder_c.probs[i], inst.encoder_x.probs[j])


def _check_support(inst, post, R):
    bad = (post > 0) & ~np.isfinite(R)
    if np.any(bad):
        k, l = np.argwhere(bad)[0]
        qz = induced_latent_marginal(inst, "c").probs
        qzp = induced_latent_marginal(inst, "x").probs
        if qz[k] <= 0:
            raise UnreachedLatent(inst.z_space.labels[k])
        if qzp[l] <= 0:
            raise UnreachedLatent(inst.zp_space.labels[l])
        raise AbsoluteContinuity((inst.z_space.labels[k], inst.zp_space.labels[l]))


def structured_elbo(inst, c, x, prior_joint=None):
    """(elbo, const_term) for one data pair (c, x')."""
    D = inst.data_joint
    i, j = D.row_space.index(c), D.col_space.index(x)
    R = _latent_ratio(inst, prior_joint)
    post = _posterior_cells(inst, i, j)
    _check_support(inst, post, R)
    mask = post > 0
    const = const_term(inst, c, x)
    return float(np.sum(post[mask] * R[mask]) + const), const


def model_evidence(inst, c, x, prior_joint=None):
    """log P(c, x') before Jensen: log E_Q[P(z,z') / (Q(z) Q(z'))] + const."""
    D = inst.data_joint
    i, j = D.row_space.index(c), D.col_space.index(x)
    R = _latent_ratio(inst, prior_joint)
    post = _posterior_cells(inst, i, j)
    _check_support(inst, post, R)
    mask = post > 0
    # log-sum-exp over the posterior support
    terms = np.log(post[mask]) + R[mask]
    m = terms.max()
    return float(m + np.log(np.sum(np.exp(terms - m))) + const_term(inst, c, x))


def _data_pairs(inst):
    D = inst.data_joint
    for i, c in enumerate(D.row_space.labels):
        for j, x in enumerate(D.col_space.labels):
            if D.probs[i, j] > 0:
                yield i, j, c, x


def expected_structured_elbo(inst, prior_joint=None):
    """(E_Ptrue[L(c, x')], E_Ptrue[const(c, x')]) by summation over data pairs."""
    P = prior_joint if prior_joint is not None else resolve_prior(inst)
    total = 0.0
    const = 0.0
    for i, j, c, x in _data_pairs(inst):
        w = inst.data_joint.probs[i, j]
        elbo, k = structured_elbo(inst, c, x, P)
        total += w * elbo
        const += w * k
    return total, const


def expected_const(inst):
    D = inst.data_joint.probs
    pc, px = D.sum(axis=1), D.sum(axis=0)
    return float(np.sum(xlogy(D, pc[:, None])) + np.sum(xlogy(D, px[None, :])))


def elbo_decomposition(inst):
    """(mi_term, kl_to_prior, const, total) with total from the pointwise ELBOs."""
    J = induced_latent_joint(inst)
    P = resolve_prior(inst)
    mi = mutual_information(J)
    kl = kl_divergence(J, P)
    total, _ = expected_structured_elbo(inst, P)
    return mi, kl, expected_const(inst), total


def _coupling(inst):
    if not isinstance(inst.prior, InfoNCEPrior):
        raise ValidationError("this quantity needs an InfoNCE prior")
    return inst.prior.coupling


def infonce_log_ratio(inst, k, l):
    """log f(k, l) - log E_{Q(z')}[f(k, z')]."""
    logf = _coupling(inst).log_table()
    qzp = induced_latent_marginal(inst, "x").probs
    ki, li = inst.z_space.index(k), inst.zp_space.index(l)
    row = logf[ki]
    m = row.max()
    return float(row[li] - (m + np.log(np.sum(qzp * np.exp(row - m)))))


def infonce_exact(inst):
    """E_{Q(z,z')}[log f] - E_{Q(z)}[log E_{Q(z')}[f]] by enumeration."""
    logf = _coupling(inst).log_table()
    J = induced_latent_joint(inst).probs
    qz = J.sum(axis=1)
    qzp = J.sum(axis=0)
    first = float(np.sum(J * logf))
    m = logf.max(axis=1)
    log_z = m + np.log(np.exp(logf - m[:, None]) @ qzp)
    return first - float(np.sum(qz * log_z))


def _inverse_cdf(probs, u):
    cdf = np.cumsum(probs)
    return np.minimum(np.searchsorted(cdf, u, side="right"), len(probs) - 1)


def infonce_finite_n(inst, n_negatives, n_monte_carlo, seed):
    """Monte-Carlo finite-N InfoNCE estimate and its standard error.

    Replicate r takes its positive (z, z') cell from uniform r of substream
    0 of ``SplitMix64(seed)``, by inverse CDF over Q(z, z') flattened
    row-major, and its j-th negative from uniform ``j * n_monte_carlo + r``
    of substream 1, by inverse CDF over Q(z'). Runs with the same seed and
    replicate count therefore share positives, and the negatives of a
    smaller N are a prefix of those of a larger N. The per-replicate value
    is log f(z, z') - log(f(z, z') + sum_j f(z, z'_j)) + log N.
    """
    N, M = int(n_negatives), int(n_monte_carlo)
    if N < 1 or M < 1:
        raise ValidationError("n_negatives and n_monte_carlo must be >= 1")
    logf = _coupling(inst).log_table()
    J = induced_latent_joint(inst).probs
    qzp = J.sum(axis=0)
    L = J.shape[1]
    rng = SplitMix64(seed)
    cell = _inverse_cdf(J.ravel(), rng.substream(0).uniform((M,)))
    k, l = np.divmod(cell, L)
    neg = _inverse_cdf(qzp, rng.substream(1).uniform((N, M))).T
    pos = logf[k, l]
    scores = np.concatenate([pos[:, None], logf[k[:, None], neg]], axis=1)
    m = scores.max(axis=1)
    lse = m + np.log(np.exp(scores - m[:, None]).sum(axis=1))
    vals = pos - lse + np.log(N)
    est = float(vals.mean())
    se = float(vals.std(ddof=1) / np.sqrt(M)) if M > 1 else 0.0
    return est, se


@dataclass
class ObjectiveReport:
    """Every exact quantity for one instance. Pointwise arrays are (C, X)."""

    pointwise_elbo: np.ndarray
    pointwise_const: np.ndarray
    evidence: np.ndarray
    gap: np.ndarray
    expected_elbo: float
    const_term: float
    mi_term: float
    kl_to_prior: float

    def to_record(self, row_labels, col_labels):
        rec = {
            "expected_elbo": self.expected_elbo,
            "const_term": self.const_term,
            "mi_term": self.mi_term,
            "kl_to_prior": self.kl_to_prior,
        }
        for name in ("pointwise_elbo", "pointwise_const", "evidence", "gap"):
            arr = getattr(self, name)
            for i, c in enumerate(row_labels):
                for j, x in enumerate(col_labels):
                    rec[f"{name}[{c},{x}]"] = float(arr[i, j])
        return rec


def objective_report(inst):
    """Evaluate the ELBO, its constant, the evidence and the gap on every pair.

    Pairs with zero data mass are still evaluated when both marginals are
    positive; pairs with a zero marginal are reported as NaN.
    """
    D = inst.data_joint
    P = resolve_prior(inst)
    shape = D.shape
    elbo = np.full(shape, np.nan)
    const = np.full(shape, np.nan)
    ev = np.full(shape, np.nan)
    pc, px = D.probs.sum(axis=1), D.probs.sum(axis=0)
    for i, c in enumerate(D.row_space.labels):
        for j, x in enumerate(D.col_space.labels):
            if pc[i] > 0 and px[j] > 0:
                elbo[i, j], const[i, j] = structured_elbo(inst, c, x, P)
                ev[i, j] = model_evidence(inst, c, x, P)
    mi, kl, k, total = elbo_decomposition(inst)
    return ObjectiveReport(elbo, const, ev, ev - elbo, total, k, mi, kl)
