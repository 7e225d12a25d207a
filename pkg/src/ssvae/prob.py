"""Exact algebra over finite probability tables.

All quantities are in nats. Tables are validated at construction and never
renormalized: a table whose total misses 1 by more than ``NORM_TOL`` is
rejected. Entrywise ``0 * log 0`` is taken to be 0.
"""

from dataclasses import dataclass

import numpy as np

from .errors import AbsoluteContinuity, ValidationError, ZeroMarginal

NORM_TOL = 1e-12


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class FiniteSpace:
    labels: tuple

    def __post_init__(self):
        labels = tuple(self.labels)
        if not labels:
            raise ValidationError("a finite space needs at least one label")
        if len(set(labels)) != len(labels):
            raise ValidationError(f"labels are not distinct: {labels!r}")
        object.__setattr__(self, "labels", labels)

    @classmethod
    def of_size(cls, n, prefix="v"):
        return cls(tuple(f"{prefix}{i}" for i in range(n)))

    def __len__(self):
        return len(self.labels)

    def index(self, label):
        """Position of ``label``; ints are accepted as positions directly."""
        if label in self.labels:
            return self.labels.index(label)
        if isinstance(label, (int, np.integer)) and 0 <= label < len(self.labels):
            return int(label)
        raise KeyError(label)


def _check_probs(probs, what):
    if not np.all(np.isfinite(probs)):
        raise ValidationError(f"{what} has non-finite entries")
    if np.any(probs < 0):
        raise ValidationError(f"{what} has negative entries")
    total = probs.sum()
    if abs(total - 1.0) > NORM_TOL:
        raise ValidationError(f"{what} sums to {float(total)!r}, not 1")


@dataclass(frozen=True, eq=False)
class FiniteDistribution:
    space: FiniteSpace
    probs: np.ndarray

    def __post_init__(self):
        probs = _frozen(self.probs)
        if probs.shape != (len(self.space),):
            raise ValidationError(
                f"expected {len(self.space)} probabilities, got shape {probs.shape}"
            )
        _check_probs(probs, "distribution")
        object.__setattr__(self, "probs", probs)

    @classmethod
    def uniform(cls, space):
        return cls(space, np.full(len(space), 1.0 / len(space)))

    def __getitem__(self, label):
        return self.probs[self.space.index(label)]

    def __len__(self):
        return len(self.space)


@dataclass(frozen=True, eq=False)
class JointDistribution:
    row_space: FiniteSpace
    col_space: FiniteSpace
    probs: np.ndarray

    def __post_init__(self):
        probs = _frozen(self.probs)
        if probs.shape != (len(self.row_space), len(self.col_space)):
            raise ValidationError(
                f"joint shape {probs.shape} does not match spaces "
                f"({len(self.row_space)}, {len(self.col_space)})"
            )
        _check_probs(probs, "joint")
        object.__setattr__(self, "probs", probs)

    @property
    def shape(self):
        return self.probs.shape

    def transpose(self):
        return JointDistribution(self.col_space, self.row_space, self.probs.T)

    def flatten(self):
        """The joint as a distribution over (row, col) label pairs, row-major."""
        space = FiniteSpace(tuple((r, c) for r in self.row_space.labels for c in self.col_space.labels))
        return FiniteDistribution(space, self.probs.ravel())


@dataclass(frozen=True, eq=False)
class ConditionalTable:
    """Row-stochastic table: row i is the target distribution given label i."""

    given_space: FiniteSpace
    target_space: FiniteSpace
    probs: np.ndarray

    def __post_init__(self):
        probs = _frozen(self.probs)
        if probs.shape != (len(self.given_space), len(self.target_space)):
            raise ValidationError(f"conditional table has shape {probs.shape}")
        if np.any(probs < 0) or not np.all(np.isfinite(probs)):
            raise ValidationError("conditional table has negative or non-finite entries")
        sums = probs.sum(axis=1)
        for label, s in zip(self.given_space.labels, sums):
            if abs(s - 1.0) > NORM_TOL:
                raise ValidationError(f"row {label!r} sums to {float(s)!r}, not 1")
        object.__setattr__(self, "probs", probs)

    def row(self, label):
        return FiniteDistribution(self.target_space, self.probs[self.given_space.index(label)])


def product(p, q):
    """Independent joint p(row) q(col)."""
    return JointDistribution(p.space, q.space, np.outer(p.probs, q.probs))


def marginalize(joint, axis):
    """Marginal over the rows (``axis="row"``) or the columns (``axis="col"``)."""
    if axis == "row":
        return FiniteDistribution(joint.row_space, joint.probs.sum(axis=1))
    if axis == "col":
        return FiniteDistribution(joint.col_space, joint.probs.sum(axis=0))
    raise ValidationError(f"axis must be 'row' or 'col', got {axis!r}")


def condition(joint, given):
    """Conditional of the other axis given ``given`` ("row" or "col").

    Raises ZeroMarginal naming the first given-label with zero mass.
    """
    if given == "row":
        probs, given_space, target_space = joint.probs, joint.row_space, joint.col_space
    elif given == "col":
        probs, given_space, target_space = joint.probs.T, joint.col_space, joint.row_space
    else:
        raise ValidationError(f"given must be 'row' or 'col', got {given!r}")
    marg = probs.sum(axis=1)
    for label, m in zip(given_space.labels, marg):
        if m <= 0:
            raise ZeroMarginal(label)
    return ConditionalTable(given_space, target_space, probs / marg[:, None])


def compose(marginal, conditional):
    """Joint m(i) * T(j | i); inverse of marginalize + condition on rows."""
    return JointDistribution(
        conditional.given_space,
        conditional.target_space,
        marginal.probs[:, None] * conditional.probs,
    )


def xlogy(x, y):
    """Entrywise x * log(y) with 0 * log(anything) = 0."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = np.zeros(np.broadcast(x, y).shape)
    pos = np.broadcast_to(x != 0, out.shape)
    xb = np.broadcast_to(x, out.shape)
    yb = np.broadcast_to(y, out.shape)
    with np.errstate(divide="ignore"):
        out[pos] = xb[pos] * np.log(yb[pos])
    return out


def _kl_arrays(p, q, labels):
    bad = (p > 0) & (q <= 0)
    if np.any(bad):
        raise AbsoluteContinuity(labels[int(np.flatnonzero(bad.ravel())[0])])
    mask = p > 0
    val = float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))
    # rounding can leave a tiny negative on identical inputs
    return max(val, 0.0)


def kl_divergence(p, q):
    """KL(p || q) in nats for two distributions on the same space."""
    if isinstance(p, JointDistribution):
        p, q = p.flatten(), q.flatten()
    if p.space != q.space:
        raise ValidationError("kl_divergence needs both distributions on the same space")
    return _kl_arrays(p.probs, q.probs, p.space.labels)


def entropy(p):
    return float(max(-np.sum(xlogy(p.probs, p.probs)), 0.0))


def mutual_information(joint):
    """I(row; col) by direct summation of J log(J / (r s))."""
    J = joint.probs
    r = J.sum(axis=1)
    s = J.sum(axis=0)
    mi = 0.0
    for i in range(J.shape[0]):
        for j in range(J.shape[1]):
            if J[i, j] > 0:
                mi += J[i, j] * (np.log(J[i, j]) - np.log(r[i]) - np.log(s[j]))
    return max(float(mi), 0.0)
