"""SSVAE model instances over finite spaces and the quantities they induce.

A model instance is a true data joint over (c, x'), one tabular encoder per
view, and a prior choice. Everything else (latent marginals, the latent
joint, implicit decoders, and the MI / InfoNCE priors) is derived from
those pieces on demand, so the derived quantities always track the current
encoder parameters.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import UnreachedLatent, ValidationError
from .prob import (
    ConditionalTable,
    FiniteDistribution,
    FiniteSpace,
    JointDistribution,
    mutual_information,
)
from .rng import SplitMix64

# embedding width used by random_instance's bilinear couplings
RANDOM_EMBED_DIM = 2
# scale applied to generated parameters before training
INIT_SCALE = 0.1


def softmax_rows(logits):
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(logits):
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _ro(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Encoder:
    """Tabular encoder Q(target | given).

    Stochastic encoders are a softmax over ``logits`` per row. Passing
    ``deterministic`` (one target index per given label) makes the encoder an
    exact one-hot map; the logits are then ignored and not trainable.
    """

    given_space: FiniteSpace
    target_space: FiniteSpace
    logits: np.ndarray = None
    deterministic: tuple = None
    table: ConditionalTable = field(init=False, repr=False)

    def __post_init__(self):
        shape = (len(self.given_space), len(self.target_space))
        if self.deterministic is not None:
            det = tuple(int(k) for k in self.deterministic)
            if len(det) != shape[0] or any(not 0 <= k < shape[1] for k in det):
                raise ValidationError(f"deterministic map {det} does not fit shape {shape}")
            object.__setattr__(self, "deterministic", det)
            probs = np.zeros(shape)
            probs[np.arange(shape[0]), det] = 1.0
            logits = np.zeros(shape) if self.logits is None else self.logits
        else:
            if self.logits is None:
                raise ValidationError("a stochastic encoder needs logits")
            logits = self.logits
            probs = None
        logits = _ro(logits)
        if logits.shape != shape:
            raise ValidationError(f"encoder logits have shape {logits.shape}, expected {shape}")
        if not np.all(np.isfinite(logits)):
            raise ValidationError("encoder logits must be finite")
        object.__setattr__(self, "logits", logits)
        if probs is None:
            probs = softmax_rows(logits)
        object.__setattr__(self, "table", ConditionalTable(self.given_space, self.target_space, probs))

    @property
    def probs(self):
        return self.table.probs

    @property
    def is_deterministic(self):
        return self.deterministic is not None

    @classmethod
    def one_hot(cls, given_space, target_space, mapping):
        return cls(given_space, target_space, deterministic=tuple(mapping))


@dataclass(frozen=True, eq=False)
class Bilinear:
    """f(z, z') = exp(e_z^T W e'_z')."""

    emb_z: np.ndarray
    emb_zp: np.ndarray
    W: np.ndarray

    def __post_init__(self):
        for name in ("emb_z", "emb_zp", "W"):
            object.__setattr__(self, name, _ro(getattr(self, name)))
        d1, d2 = self.W.shape
        if self.emb_z.ndim != 2 or self.emb_z.shape[1] != d1 or self.emb_zp.ndim != 2 or self.emb_zp.shape[1] != d2:
            raise ValidationError("bilinear embeddings do not match the weight matrix")

    @property
    def shape(self):
        return (self.emb_z.shape[0], self.emb_zp.shape[0])

    def log_table(self):
        return self.emb_z @ self.W @ self.emb_zp.T


@dataclass(frozen=True, eq=False)
class GeneralTable:
    """Arbitrary strictly positive coupling values, one per (z, z') cell."""

    values: np.ndarray

    def __post_init__(self):
        values = _ro(self.values)
        if values.ndim != 2:
            raise ValidationError("coupling table must be 2-d")
        if not np.all(np.isfinite(values)) or np.any(values <= 0):
            raise ValidationError("coupling table entries must be finite and > 0")
        object.__setattr__(self, "values", values)

    @property
    def shape(self):
        return self.values.shape

    def log_table(self):
        return np.log(self.values)


@dataclass(frozen=True, eq=False)
class ExplicitTable:
    """Prior P(z, z') = softmax of ``logits`` over the whole latent grid."""

    logits: np.ndarray

    def __post_init__(self):
        logits = _ro(self.logits)
        if logits.ndim != 2 or not np.all(np.isfinite(logits)):
            raise ValidationError("prior logits must be a finite 2-d table")
        object.__setattr__(self, "logits", logits)

    def probs(self):
        return softmax_rows(self.logits.ravel()).reshape(self.logits.shape)


@dataclass(frozen=True)
class MIPrior:
    """P(z, z') = Q(z, z'), resolved against the instance."""


@dataclass(frozen=True, eq=False)
class InfoNCEPrior:
    """P(z) = Q(z), P(z' | z) proportional to Q(z') f(z, z')."""

    coupling: object


@dataclass(frozen=True, eq=False)
class ModelInstance:
    data_joint: JointDistribution
    encoder_c: Encoder
    encoder_x: Encoder
    prior: object
    # joint over (shared factor s, c) when the data came from the shared-factor generator
    factor_joint: JointDistribution = None

    def __post_init__(self):
        if self.encoder_c.given_space != self.data_joint.row_space:
            raise ValidationError("encoder_c labels do not match the data rows")
        if self.encoder_x.given_space != self.data_joint.col_space:
            raise ValidationError("encoder_x labels do not match the data columns")
        shape = (len(self.z_space), len(self.zp_space))
        if isinstance(self.prior, ExplicitTable):
            if self.prior.logits.shape != shape:
                raise ValidationError(f"prior logits shape {self.prior.logits.shape} != latent grid {shape}")
        elif isinstance(self.prior, InfoNCEPrior):
            if self.prior.coupling.shape != shape:
                raise ValidationError(f"coupling shape {self.prior.coupling.shape} != latent grid {shape}")
        elif not isinstance(self.prior, MIPrior):
            raise ValidationError(f"unknown prior {self.prior!r}")
        if self.factor_joint is not None and self.factor_joint.col_space != self.data_joint.row_space:
            raise ValidationError("factor joint columns must be the c labels")

    @property
    def z_space(self):
        return self.encoder_c.target_space

    @property
    def zp_space(self):
        return self.encoder_x.target_space

    def with_prior(self, prior):
        return replace(self, prior=prior)


def _side(inst, side):
    if side == "c":
        return inst.encoder_c, inst.data_joint.probs.sum(axis=1), inst.data_joint.row_space
    if side == "x":
        return inst.encoder_x, inst.data_joint.probs.sum(axis=0), inst.data_joint.col_space
    raise ValidationError(f"side must be 'c' or 'x', got {side!r}")


def induced_latent_marginal(inst, side):
    """Q(z) = sum_c Q(z|c) Ptrue(c) (side "c"), or the x' analogue (side "x")."""
    enc, pdata, _ = _side(inst, side)
    return FiniteDistribution(enc.target_space, pdata @ enc.probs)


def induced_latent_joint(inst):
    """Q(z, z') = sum_{c, x'} Q(z|c) Q(z'|x') Ptrue(c, x')."""
    J = inst.encoder_c.probs.T @ inst.data_joint.probs @ inst.encoder_x.probs
    return JointDistribution(inst.z_space, inst.zp_space, J)


def implicit_decoder(inst, side):
    """Decoder P(c | z) = Q(z|c) Ptrue(c) / Q(z) given by Bayes' rule.

    Rows are indexed by latent label. Raises UnreachedLatent for the first
    latent with zero induced mass.
    """
    enc, pdata, data_space = _side(inst, side)
    qz = pdata @ enc.probs
    for label, m in zip(enc.target_space.labels, qz):
        if m <= 0:
            raise UnreachedLatent(label)
    rows = (enc.probs * pdata[:, None]).T / qz[:, None]
    return ConditionalTable(enc.target_space, data_space, rows)


def infonce_normalizer(coupling, qzp):
    """Z_k = sum_l Q(z')_l f(k, l), one per z label."""
    return np.exp(coupling.log_table()) @ qzp


def resolve_prior(inst):
    """The prior P(z, z') as a concrete table for this instance."""
    prior = inst.prior
    if isinstance(prior, ExplicitTable):
        return JointDistribution(inst.z_space, inst.zp_space, prior.probs())
    if isinstance(prior, MIPrior):
        return induced_latent_joint(inst)
    if isinstance(prior, InfoNCEPrior):
        qz = induced_latent_marginal(inst, "c").probs
        qzp = induced_latent_marginal(inst, "x").probs
        f = np.exp(prior.coupling.log_table())
        if not np.all(np.isfinite(f)) or np.any(f <= 0):
            raise ValidationError("coupling must be finite and strictly positive")
        Z = f @ qzp
        P = qz[:, None] * qzp[None, :] * f / Z[:, None]
        return JointDistribution(inst.z_space, inst.zp_space, P)
    raise ValidationError(f"unknown prior {prior!r}")


def factor_latent_joint(inst):
    """Exact joint of the shared factor s and the c-side latent z."""
    if inst.factor_joint is None:
        raise ValidationError("instance carries no shared-factor joint")
    J = inst.factor_joint.probs @ inst.encoder_c.probs
    return JointDistribution(inst.factor_joint.row_space, inst.z_space, J)


def factor_mutual_information(inst):
    """MI(z; s) measured on the c-side encoder."""
    return mutual_information(factor_latent_joint(inst))


def _make_prior(kind, rng, K, L, embed_dim, scale):
    """Draws table logits, then emb_z, emb_zp, W, in that order, whatever ``kind`` is."""
    table = rng.normal((K, L), scale)
    emb_z = rng.normal((K, embed_dim), scale)
    emb_zp = rng.normal((L, embed_dim), scale)
    W = rng.normal((embed_dim, embed_dim), scale)
    if kind == "mi":
        return MIPrior()
    if kind == "table":
        return ExplicitTable(table)
    if kind == "infonce":
        return InfoNCEPrior(Bilinear(emb_z, emb_zp, W))
    raise ValidationError(f"prior kind must be 'mi', 'table' or 'infonce', got {kind!r}")


def shared_factor_data(s_count, noise_count, noise_level, rng):
    """Data joint over (c, x') and the (s, c) joint for the shared-factor family.

    Each view emits (s', n) from s with probability
    (1 - noise_level) * [s' = s] * nu[s, n] + noise_level / (S * N),
    where nu[s, .] is a seeded noise distribution (weights 0.5 + u, normalized).
    The two views are conditionally independent given s, and s is uniform.
    """
    S, N = s_count, noise_count
    nu = 0.5 + rng.uniform((S, N))
    nu = nu / nu.sum(axis=1, keepdims=True)
    emit = np.zeros((S, S * N))
    for s in range(S):
        emit[s, s * N:(s + 1) * N] = (1.0 - noise_level) * nu[s]
    emit += noise_level / (S * N)
    emit /= emit.sum(axis=1, keepdims=True)
    labels = FiniteSpace(tuple(f"s{s}n{n}" for s in range(S) for n in range(N)))
    factor = FiniteSpace(tuple(f"s{s}" for s in range(S)))
    D = emit.T @ emit / S
    D /= D.sum()
    return (
        JointDistribution(labels, labels, D),
        JointDistribution(factor, labels, emit / S),
    )


def make_shared_factor_model(s_count, noise_count, noise_level, seed, latent_count=None, prior="mi", init_seed=None):
    """Two views sharing a discrete factor s, with independent per-view noise.

    Draw order from ``SplitMix64(seed)``: noise table nu (S x N uniforms),
    encoder_c logits (C x K normals), encoder_x logits (C x K normals), then
    the prior draws of ``_make_prior`` with embedding width K. Everything
    except nu is scaled by ``INIT_SCALE``. With ``init_seed`` the parameter
    draws come from ``SplitMix64(init_seed)`` instead, leaving the data as
    for ``seed``.
    """
    if s_count < 2 or noise_count < 1 or not 0.0 <= noise_level <= 1.0:
        raise ValidationError(
            f"need s_count >= 2, noise_count >= 1, 0 <= noise_level <= 1; "
            f"got {s_count}, {noise_count}, {noise_level}"
        )
    K = s_count if latent_count is None else latent_count
    if K < 1:
        raise ValidationError("latent_count must be >= 1")
    rng = SplitMix64(seed)
    data, factor = shared_factor_data(s_count, noise_count, noise_level, rng)
    if init_seed is not None:
        rng = SplitMix64(init_seed)
    C = len(data.row_space)
    zs = FiniteSpace.of_size(K, "z")
    zps = FiniteSpace.of_size(K, "zp")
    enc_c = Encoder(data.row_space, zs, rng.normal((C, K), INIT_SCALE))
    enc_x = Encoder(data.col_space, zps, rng.normal((C, K), INIT_SCALE))
    p = _make_prior(prior, rng, K, K, K, INIT_SCALE)
    return ModelInstance(data, enc_c, enc_x, p, factor_joint=factor)


def random_instance(dims, seed, prior="mi", deterministic=False):
    """Seeded random instance with ``dims = (C, X, K, L)``.

    Draw order from ``SplitMix64(seed)``: data logits (C x X), encoder_c
    logits (C x K), encoder_x logits (X x L), then the prior draws of
    ``_make_prior`` with embedding width ``RANDOM_EMBED_DIM``; all standard
    normal. The data joint is the softmax of its logits over the grid. With
    ``deterministic=True`` both encoders become one-hot at the row argmax.
    """
    C, X, K, L = (int(d) for d in dims)
    if min(C, X, K, L) < 2:
        raise ValidationError(f"all dimensions must be >= 2, got {dims}")
    rng = SplitMix64(seed)
    D = softmax_rows(rng.normal((C, X)).ravel()).reshape(C, X)
    cs, xs = FiniteSpace.of_size(C, "c"), FiniteSpace.of_size(X, "x")
    zs, zps = FiniteSpace.of_size(K, "z"), FiniteSpace.of_size(L, "zp")
    A = rng.normal((C, K))
    B = rng.normal((X, L))
    p = _make_prior(prior, rng, K, L, RANDOM_EMBED_DIM, 1.0)
    if deterministic:
        enc_c = Encoder(cs, zs, A, deterministic=tuple(np.argmax(A, axis=1)))
        enc_x = Encoder(xs, zps, B, deterministic=tuple(np.argmax(B, axis=1)))
    else:
        enc_c, enc_x = Encoder(cs, zs, A), Encoder(xs, zps, B)
    return ModelInstance(JointDistribution(cs, xs, D), enc_c, enc_x, p)


def random_dims(seed, max_data=5, max_latent=4):
    """Dimensions (C, X, K, L) drawn from a substream of ``seed``."""
    rng = SplitMix64(seed).substream(0xD135)
    c, x = rng.integers(2, max_data + 1, (2,))
    k, l = rng.integers(2, max_latent + 1, (2,))
    return int(c), int(x), int(k), int(l)
