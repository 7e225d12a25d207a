"""Exact-gradient training of SSVAE parameters.

Trainable parameters are flattened into one vector in a fixed block order:

    encoder_c logits, encoder_x logits, emb_z, emb_zp, W, prior_logits

each block row-major, and a block is present only when the objective
depends on it (deterministic encoders are never trainable; coupling blocks
need a bilinear InfoNCE prior; prior logits need an explicit-table prior).

Objectives (all maximized):

    elbo-mi        E_Ptrue[structured ELBO] under the MI prior
    elbo-infonce   E_Ptrue[structured ELBO] under the instance's InfoNCE prior
    elbo-table     E_Ptrue[structured ELBO] under the instance's explicit table
    infonce-exact  exact infinite-N InfoNCE
    unstructured   E_Ptrue(c)[unstructured ELBO] of encoder_c against the
                   z-marginal of the explicit-table prior
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NonConvergence, ValidationError
from .model import (
    Bilinear,
    Encoder,
    ExplicitTable,
    InfoNCEPrior,
    MIPrior,
    make_shared_factor_model,
    softmax_rows,
)
from .objectives import expected_structured_elbo, expected_unstructured_elbo, infonce_exact
from .prob import FiniteDistribution, xlogy
from .rng import SplitMix64

OBJECTIVES = ("elbo-mi", "elbo-infonce", "elbo-table", "infonce-exact", "unstructured")


@dataclass(frozen=True, eq=False)
class ParameterVector:
    blocks: tuple  # ((name, shape), ...)
    values: np.ndarray

    @property
    def names(self):
        return tuple(name for name, _ in self.blocks)

    def unflatten(self):
        out, pos = {}, 0
        for name, shape in self.blocks:
            n = int(np.prod(shape))
            out[name] = self.values[pos:pos + n].reshape(shape)
            pos += n
        return out

    @classmethod
    def flatten(cls, arrays, blocks):
        vals = [np.asarray(arrays[name], dtype=np.float64).ravel() for name, _ in blocks]
        return cls(tuple(blocks), np.concatenate(vals) if vals else np.zeros(0))

    def with_values(self, values):
        return ParameterVector(self.blocks, np.asarray(values, dtype=np.float64))


def _check_objective(inst, objective):
    if objective not in OBJECTIVES:
        raise ValidationError(f"unknown objective {objective!r}; choose from {OBJECTIVES}")
    if objective in ("elbo-infonce", "infonce-exact") and not isinstance(inst.prior, InfoNCEPrior):
        raise ValidationError(f"{objective} needs an InfoNCE prior")
    if objective in ("elbo-table", "unstructured") and not isinstance(inst.prior, ExplicitTable):
        raise ValidationError(f"{objective} needs an explicit-table prior")


def _blocks(inst, objective):
    blocks = []
    if not inst.encoder_c.is_deterministic:
        blocks.append(("encoder_c", inst.encoder_c.logits.shape))
    if objective != "unstructured" and not inst.encoder_x.is_deterministic:
        blocks.append(("encoder_x", inst.encoder_x.logits.shape))
    if objective in ("elbo-infonce", "infonce-exact") and isinstance(inst.prior.coupling, Bilinear):
        cp = inst.prior.coupling
        blocks += [("emb_z", cp.emb_z.shape), ("emb_zp", cp.emb_zp.shape), ("W", cp.W.shape)]
    if objective in ("elbo-table", "unstructured"):
        blocks.append(("prior_logits", inst.prior.logits.shape))
    return blocks


def get_params(inst, objective):
    _check_objective(inst, objective)
    arrays = {"encoder_c": inst.encoder_c.logits, "encoder_x": inst.encoder_x.logits}
    if isinstance(inst.prior, InfoNCEPrior) and isinstance(inst.prior.coupling, Bilinear):
        cp = inst.prior.coupling
        arrays.update(emb_z=cp.emb_z, emb_zp=cp.emb_zp, W=cp.W)
    if isinstance(inst.prior, ExplicitTable):
        arrays["prior_logits"] = inst.prior.logits
    return ParameterVector.flatten(arrays, _blocks(inst, objective))


def set_params(inst, params):
    """A copy of ``inst`` with the blocks of ``params`` substituted."""
    a = params.unflatten()
    enc_c, enc_x, prior = inst.encoder_c, inst.encoder_x, inst.prior
    if "encoder_c" in a:
        enc_c = Encoder(enc_c.given_space, enc_c.target_space, a["encoder_c"])
    if "encoder_x" in a:
        enc_x = Encoder(enc_x.given_space, enc_x.target_space, a["encoder_x"])
    if "W" in a:
        prior = InfoNCEPrior(Bilinear(a["emb_z"], a["emb_zp"], a["W"]))
    if "prior_logits" in a:
        prior = ExplicitTable(a["prior_logits"])
    return replace(inst, encoder_c=enc_c, encoder_x=enc_x, prior=prior)


def objective_value(inst, objective):
    """Objective through the pointwise routines of ``objectives`` (the reference path)."""
    _check_objective(inst, objective)
    if objective == "elbo-mi":
        return expected_structured_elbo(inst.with_prior(MIPrior()))[0]
    if objective in ("elbo-infonce", "elbo-table"):
        return expected_structured_elbo(inst)[0]
    if objective == "infonce-exact":
        return infonce_exact(inst)
    pc = inst.data_joint.probs.sum(axis=1)
    pz = inst.prior.probs().sum(axis=1)
    ptrue = FiniteDistribution(inst.data_joint.row_space, pc)
    return expected_unstructured_elbo(ptrue, inst.encoder_c, pz)[0]


def _safe_log(a):
    with np.errstate(divide="ignore"):
        return np.log(a)


def _value_and_grad(inst, objective, want_grad=True):
    """Parameter-dependent part of the objective and its gradient blocks.

    The data constant (-H(c) - H(x'), or -H(c) for the unstructured ELBO)
    is excluded; ``data_constant`` adds it back.
    """
    D = inst.data_joint.probs
    Qc, Qx = inst.encoder_c.probs, inst.encoder_x.probs
    pc = D.sum(axis=1)
    J = Qc.T @ D @ Qx
    r, s = J.sum(axis=1), J.sum(axis=0)
    pos = J > 0
    grads = {}
    G_J = dQc_extra = None

    if objective == "unstructured":
        P = inst.prior.probs()
        pz = P.sum(axis=1)
        used = r > 0
        value = float(np.sum(r[used] * (np.log(pz[used]) - np.log(r[used]))))
        if want_grad:
            lr = np.where(used, np.log(pz) - _safe_log(np.where(used, r, 1.0)) - 1.0, 0.0)
            dQc_extra = pc[:, None] * lr[None, :]
            grads["prior_logits"] = P * (np.where(pz > 0, r / pz, 0.0)[:, None] - 1.0)
    elif objective == "elbo-mi":
        logJ = _safe_log(np.where(pos, J, 1.0))
        lr, ls = _safe_log(np.where(r > 0, r, 1.0)), _safe_log(np.where(s > 0, s, 1.0))
        value = float(np.sum(J[pos] * (logJ - lr[:, None] - ls[None, :])[pos]))
        G_J = np.where(pos, logJ - lr[:, None] - ls[None, :] - 1.0, 0.0)
    elif objective == "elbo-table":
        P = inst.prior.probs()
        logP = np.log(P)
        value = float(np.sum(J * logP) - np.sum(xlogy(r, r)) - np.sum(xlogy(s, s)))
        lr, ls = _safe_log(np.where(r > 0, r, 1.0)), _safe_log(np.where(s > 0, s, 1.0))
        G_J = np.where(pos, logP - lr[:, None] - ls[None, :] - 2.0, 0.0)
        grads["prior_logits"] = J - P
    else:
        coupling = inst.prior.coupling
        logf = coupling.log_table()
        m = logf.max(axis=1)
        fs = np.exp(logf - m[:, None])
        Zs = fs @ s
        logZ = m + np.log(Zs)
        value = float(np.sum(J * logf) - np.sum(r * logZ))
        if want_grad:
            w = fs / Zs[:, None]  # f(k, l) / Z_k
            g_s = -(r @ w)
            G_J = logf - logZ[:, None] + g_s[None, :]
            G = J - r[:, None] * s[None, :] * w
            if isinstance(coupling, (Bilinear, _LiteBilinear)):
                E, Ep, W = coupling.emb_z, coupling.emb_zp, coupling.W
                grads["emb_z"] = G @ Ep @ W.T
                grads["emb_zp"] = G.T @ E @ W
                grads["W"] = E.T @ G @ Ep

    if not want_grad:
        return value, None
    dQc = np.zeros_like(Qc) if G_J is None else D @ Qx @ G_J.T
    if dQc_extra is not None:
        dQc = dQc + dQc_extra
    dQx = np.zeros_like(Qx) if G_J is None else D.T @ Qc @ G_J
    grads["encoder_c"] = Qc * (dQc - np.sum(dQc * Qc, axis=1, keepdims=True))
    grads["encoder_x"] = Qx * (dQx - np.sum(dQx * Qx, axis=1, keepdims=True))
    return value, grads


def data_constant(inst, objective):
    D = inst.data_joint.probs
    pc, px = D.sum(axis=1), D.sum(axis=0)
    if objective == "infonce-exact":
        return 0.0
    if objective == "unstructured":
        return float(np.sum(xlogy(pc, pc)))
    return float(np.sum(xlogy(pc, pc)) + np.sum(xlogy(px, px)))


def objective_gradient(inst, params, objective):
    """Analytic gradient of ``objective`` with respect to ``params``."""
    _check_objective(inst, objective)
    cur = set_params(inst, params)
    _, grads = _value_and_grad(cur, objective)
    return ParameterVector.flatten(grads, params.blocks).values


def _ext_softmax(logits):
    logits = np.asarray(logits, dtype=np.longdouble)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _ext_encoder(enc, logits):
    if enc.is_deterministic:
        return np.asarray(enc.probs, dtype=np.longdouble)
    return _ext_softmax(logits)


def extended_objective_value(inst, params, objective, values=None):
    """Objective evaluated from its defining sums in long double precision.

    ``values`` (long double, same layout as ``params``) overrides the
    parameter values; the data table is the instance's, promoted. Used by
    the finite-difference oracle, whose error floor in double precision is
    about 1e-11 -- too coarse for the small gradient coordinates the
    relative-error check has to resolve.
    """
    vals = np.asarray(params.values if values is None else values, dtype=np.longdouble)
    a, pos = {}, 0
    for name, shape in params.blocks:
        n = int(np.prod(shape))
        a[name] = vals[pos:pos + n].reshape(shape)
        pos += n
    ld = np.longdouble
    D = np.asarray(inst.data_joint.probs, dtype=ld)
    pc, px = D.sum(axis=1), D.sum(axis=0)
    Qc = _ext_encoder(inst.encoder_c, a.get("encoder_c", inst.encoder_c.logits))
    Qx = _ext_encoder(inst.encoder_x, a.get("encoder_x", inst.encoder_x.logits))
    qz, qzp = pc @ Qc, px @ Qx
    prior = inst.prior
    if objective in ("elbo-infonce", "infonce-exact"):
        cp = prior.coupling
        if isinstance(cp, Bilinear):
            logf = np.asarray(a["emb_z"], ld) @ np.asarray(a["W"], ld) @ np.asarray(a["emb_zp"], ld).T
        else:
            logf = np.log(np.asarray(cp.values, dtype=ld))
        f = np.exp(logf)
        Z = f @ qzp
        if objective == "infonce-exact":
            J = Qc.T @ D @ Qx
            return np.sum(J * logf) - np.sum(qz * np.log(Z))
        P = qz[:, None] * qzp[None, :] * f / Z[:, None]
    elif objective in ("elbo-table", "unstructured"):
        T = np.asarray(a["prior_logits"], dtype=ld)
        P = _ext_softmax(T.ravel()).reshape(T.shape)
    else:
        P = Qc.T @ D @ Qx
    if objective == "unstructured":
        pz = P.sum(axis=1)
        total = ld(0)
        for i in range(len(pc)):
            row = Qc[i]
            m = row > 0
            total += pc[i] * (np.log(pc[i]) + np.sum(row[m] * (np.log(pz[m]) - np.log(qz[m]))))
        return total
    total = ld(0)
    for i in range(D.shape[0]):
        for j in range(D.shape[1]):
            if D[i, j] <= 0:
                continue
            post = np.outer(Qc[i], Qx[j])
            m = post > 0
            ratio = np.log(P[m]) - np.log(np.broadcast_to(qz[:, None], P.shape)[m]) - np.log(
                np.broadcast_to(qzp[None, :], P.shape)[m]
            )
            total += D[i, j] * (np.sum(post[m] * ratio) + np.log(pc[i]) + np.log(px[j]))
    return total


def finite_difference_gradient(inst, params, objective, h=1e-5, precision="extended", value_fn=None):
    """Central differences, one coordinate at a time.

    ``precision="extended"`` differentiates ``extended_objective_value``
    with the perturbation applied in long double; ``"double"`` uses
    ``objective_value`` on rebuilt instances. A custom ``value_fn(instance)``
    takes precedence over both.
    """
    x0 = np.array(params.values, dtype=np.float64)
    grad = np.zeros_like(x0)
    if value_fn is None and precision == "extended":
        _check_objective(inst, objective)
        xe = x0.astype(np.longdouble)
        he = np.longdouble(h)
        for j in range(x0.size):
            x = xe.copy()
            x[j] = xe[j] + he
            fp = extended_objective_value(inst, params, objective, x)
            x[j] = xe[j] - he
            fm = extended_objective_value(inst, params, objective, x)
            grad[j] = float((fp - fm) / (2 * he))
        return grad
    value_fn = value_fn or (lambda i: objective_value(i, objective))
    for j in range(x0.size):
        x = x0.copy()
        x[j] = x0[j] + h
        fp = value_fn(set_params(inst, params.with_values(x)))
        x[j] = x0[j] - h
        fm = value_fn(set_params(inst, params.with_values(x)))
        grad[j] = (fp - fm) / (2 * h)
    return grad


def gradient_errors(analytic, numeric, small=1e-8):
    """Per-coordinate error: absolute where |analytic| < small, else relative."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    diff = np.abs(analytic - numeric)
    rel = diff / np.maximum(np.abs(analytic), small)
    return np.where(np.abs(analytic) < small, diff, rel)


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "elbo-mi"
    step_size: float = 1.0
    max_iters: int = 10_000
    tolerance: float = 1e-8
    seed: int = 0
    # factor applied to the step after an accepted step; 1.0 keeps it fixed
    step_growth: float = 2.0
    max_step: float = 1e6

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValidationError(f"unknown objective {self.objective!r}")
        if not (self.step_size > 0 and math.isfinite(self.step_size)):
            raise ValidationError(f"step size must be > 0, got {self.step_size}")
        if not self.tolerance > 0:
            raise ValidationError(f"tolerance must be > 0, got {self.tolerance}")
        if int(self.max_iters) < 0:
            raise ValidationError("max_iters must be >= 0")
        if not self.step_growth >= 1.0:
            raise ValidationError("step_growth must be >= 1")


@dataclass
class TrainTrace:
    objective: list = field(default_factory=list)
    mi_z_s: list = field(default_factory=list)
    gradient_norm: list = field(default_factory=list)
    step_size: list = field(default_factory=list)
    initial_objective: float = float("nan")
    initial_gradient_norm: float = float("nan")
    params: ParameterVector = None
    instance: object = None
    accepted_steps: int = 0
    converged: bool = False
    restart: int = 0
    restart_objectives: list = field(default_factory=list)

    def rows(self):
        for i, row in enumerate(zip(self.objective, self.mi_z_s, self.gradient_norm, self.step_size)):
            yield (i + 1,) + row


class _Probs:
    """Minimal stand-in exposing ``probs`` (and ``probs()`` for priors) to _value_and_grad."""

    def __init__(self, probs):
        self.probs = probs


class _LiteTable:
    def __init__(self, logits):
        self.logits = logits

    def probs(self):
        e = np.exp(self.logits - self.logits.max())
        return e / e.sum()


class _LiteView:
    """Unvalidated view of an instance at a parameter vector, for the training loop.

    Only the fields _value_and_grad reads are filled in; ``set_params``
    builds the validated instance once training ends.
    """

    def __init__(self, inst, params):
        a = params.unflatten()
        self.data_joint = inst.data_joint
        self.encoder_c = _Probs(softmax_rows(a["encoder_c"])) if "encoder_c" in a else inst.encoder_c
        self.encoder_x = _Probs(softmax_rows(a["encoder_x"])) if "encoder_x" in a else inst.encoder_x
        self.prior = inst.prior
        if "W" in a:
            self.prior = InfoNCEPrior(_LiteBilinear(a["emb_z"], a["emb_zp"], a["W"]))
        if "prior_logits" in a:
            self.prior = _LiteTable(a["prior_logits"])


class _LiteBilinear:
    def __init__(self, emb_z, emb_zp, W):
        self.emb_z, self.emb_zp, self.W = emb_z, emb_zp, W

    def log_table(self):
        return self.emb_z @ self.W @ self.emb_zp.T


def _factor_mi(factor, Qc):
    """MI(z; s) of the joint factor @ Qc, vectorized."""
    J = factor @ Qc
    outer = J.sum(axis=1)[:, None] * J.sum(axis=0)[None, :]
    pos = J > 0
    return max(float(np.sum(J[pos] * np.log(J[pos] / outer[pos]))), 0.0)


def train(inst, config, callback=None):
    """Gradient ascent with backtracking on ``config.objective``.

    Each iteration tries ``x + step * grad``; while the objective would
    decrease the step is halved (at most 60 times, after which the iteration
    makes no move and the step resets to ``config.step_size``). After an
    accepted step the next trial step is multiplied by ``step_growth``.
    Stops when the gradient max-norm drops below ``config.tolerance``;
    raises NonConvergence carrying the trace at ``config.max_iters``.
    ``callback(iteration, instance)`` runs after every iteration.
    """
    objective = config.objective
    params = get_params(inst, objective)
    cur = _LiteView(inst, params)
    const = data_constant(inst, objective)
    factor = None if inst.factor_joint is None else inst.factor_joint.probs
    value, grads = _value_and_grad(cur, objective)
    g = ParameterVector.flatten(grads, params.blocks).values
    gnorm = float(np.max(np.abs(g))) if g.size else 0.0
    trace = TrainTrace(initial_objective=value + const, initial_gradient_norm=gnorm)
    step = config.step_size
    it = 0
    while gnorm >= config.tolerance:
        if it >= config.max_iters:
            trace.params, trace.instance = params, set_params(inst, params)
            raise NonConvergence(config.max_iters, gnorm, trace=trace)
        moved = False
        for _ in range(61):
            trial_params = params.with_values(params.values + step * g)
            trial = _LiteView(inst, trial_params)
            trial_value, _ = _value_and_grad(trial, objective, want_grad=False)
            if np.isfinite(trial_value) and trial_value >= value:
                moved = True
                break
            step *= 0.5
        used_step = step if moved else 0.0
        if moved:
            params, cur, value = trial_params, trial, trial_value
            trace.accepted_steps += 1
            step = min(step * config.step_growth, config.max_step)
        else:
            step = config.step_size
        _, grads = _value_and_grad(cur, objective)
        g = ParameterVector.flatten(grads, params.blocks).values
        gnorm = float(np.max(np.abs(g)))
        it += 1
        trace.objective.append(value + const)
        trace.mi_z_s.append(_factor_mi(factor, cur.encoder_c.probs) if factor is not None else float("nan"))
        trace.gradient_norm.append(gnorm)
        trace.step_size.append(used_step)
        if callback is not None:
            callback(it, set_params(inst, params))
    trace.params, trace.instance, trace.converged = params, set_params(inst, params), True
    return trace


# objective margin a later restart needs to displace an earlier one
RESTART_TIE = 1e-6


def shared_factor_experiment(s_count, noise_count, noise_level, latent_count, objective, seed, config=None, restarts=1):
    """Train encoders on a shared-factor model and track MI(z; s) per iteration.

    The model comes from ``make_shared_factor_model`` with the prior the
    objective needs (bilinear InfoNCE for the InfoNCE objectives, an
    explicit table for the table objectives, the MI prior otherwise).

    Gradient ascent from a small random start often stalls on a saturated
    plateau where two factor values share one latent. ``restarts > 1``
    reruns from fresh initializations (restart r > 0 draws its parameters
    from ``SplitMix64(seed).substream(r)``; the data never changes) and
    keeps the run with the highest final objective; a later run must beat
    the best so far by more than ``RESTART_TIE`` to replace it. The
    ground-truth factor plays no part in the selection.

    Returns the winning trace, with ``restart`` and ``restart_objectives``
    set. If the winning run hit the iteration cap, its NonConvergence is
    raised with the trace attached.
    """
    if latent_count < s_count:
        raise ValidationError("latent_count must be >= s_count")
    if restarts < 1:
        raise ValidationError("restarts must be >= 1")
    prior = {"elbo-infonce": "infonce", "infonce-exact": "infonce", "elbo-table": "table", "unstructured": "table"}.get(objective, "mi")
    config = config or TrainConfig(objective=objective, seed=seed)
    if config.objective != objective:
        config = replace(config, objective=objective)
    best = None
    finals = []
    for r in range(restarts):
        init_seed = None if r == 0 else SplitMix64(seed).substream(r).seed
        inst = make_shared_factor_model(
            s_count, noise_count, noise_level, seed, latent_count=latent_count, prior=prior, init_seed=init_seed
        )
        try:
            trace, err = train(inst, config), None
        except NonConvergence as exc:
            trace, err = exc.trace, exc
        final = trace.objective[-1] if trace.objective else trace.initial_objective
        finals.append(final)
        if best is None or final > best[0] + RESTART_TIE:
            best = (final, r, trace, err)
    _, r, trace, err = best
    trace.restart = r
    trace.restart_objectives = finals
    if err is not None:
        raise err
    return trace
