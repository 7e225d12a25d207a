import math

import numpy as np
import pytest

from ssvae.errors import UnreachedLatent, ValidationError
from ssvae.model import (
    Bilinear,
    Encoder,
    ExplicitTable,
    GeneralTable,
    InfoNCEPrior,
    MIPrior,
    ModelInstance,
    factor_mutual_information,
    implicit_decoder,
    induced_latent_joint,
    induced_latent_marginal,
    make_shared_factor_model,
    random_dims,
    random_instance,
    resolve_prior,
)
from ssvae.prob import FiniteSpace, JointDistribution, mutual_information

# MI(c; x') of make_shared_factor_model(4, 3, 0.2, seed=11), frozen after first computation
SHARED_FACTOR_MI_4_3_02_SEED11 = 0.5098500556884438


def _simple(D, enc_c=None, enc_x=None, prior=None):
    D = np.asarray(D, dtype=float)
    cs, xs = FiniteSpace.of_size(D.shape[0], "c"), FiniteSpace.of_size(D.shape[1], "x")
    zs, zps = FiniteSpace.of_size(D.shape[0], "z"), FiniteSpace.of_size(D.shape[1], "zp")
    ec = enc_c or Encoder.one_hot(cs, zs, range(D.shape[0]))
    ex = enc_x or Encoder.one_hot(xs, zps, range(D.shape[1]))
    return ModelInstance(JointDistribution(cs, xs, D), ec, ex, prior or MIPrior())


def _brute_marginal(inst):
    D, Q = inst.data_joint.probs, inst.encoder_c.probs
    out = np.zeros(Q.shape[1])
    for c in range(Q.shape[0]):
        for z in range(Q.shape[1]):
            out[z] += Q[c, z] * D[c].sum()
    return out


def _brute_joint(inst):
    D, A, B = inst.data_joint.probs, inst.encoder_c.probs, inst.encoder_x.probs
    out = np.zeros((A.shape[1], B.shape[1]))
    for c in range(A.shape[0]):
        for x in range(B.shape[0]):
            for k in range(A.shape[1]):
                for l in range(B.shape[1]):
                    out[k, l] += A[c, k] * B[x, l] * D[c, x]
    return out


class TestEncoders:
    def test_softmax_rows(self):
        s = FiniteSpace.of_size(2)
        e = Encoder(s, FiniteSpace.of_size(3, "z"), [[0.0, 0.0, 0.0], [math.log(2), 0.0, 0.0]])
        np.testing.assert_allclose(e.probs, [[1 / 3] * 3, [0.5, 0.25, 0.25]], atol=1e-15)

    def test_deterministic(self):
        e = Encoder.one_hot(FiniteSpace.of_size(3), FiniteSpace.of_size(2, "z"), [1, 0, 1])
        assert e.is_deterministic
        np.testing.assert_array_equal(e.probs, [[0, 1], [1, 0], [0, 1]])

    def test_bad_shapes(self):
        s = FiniteSpace.of_size(2)
        with pytest.raises(ValidationError):
            Encoder(s, s, np.zeros((3, 2)))
        with pytest.raises(ValidationError):
            Encoder.one_hot(s, s, [0, 2])
        with pytest.raises(ValidationError):
            Encoder(s, s, [[0.0, np.inf], [0.0, 0.0]])

    def test_coupling_validation(self):
        with pytest.raises(ValidationError):
            GeneralTable([[1.0, 0.0], [1.0, 1.0]])
        with pytest.raises(ValidationError):
            Bilinear(np.zeros((2, 2)), np.zeros((2, 3)), np.eye(2))

    def test_instance_shape_checks(self):
        inst = _simple(np.full((2, 2), 0.25))
        with pytest.raises(ValidationError):
            inst.with_prior(ExplicitTable(np.zeros((3, 2))))
        with pytest.raises(ValidationError):
            inst.with_prior(InfoNCEPrior(GeneralTable(np.ones((2, 3)))))


class TestInducedQuantities:
    def test_identity_encoder_marginal(self):
        D = np.array([[0.1, 0.2], [0.3, 0.4]])
        np.testing.assert_allclose(induced_latent_marginal(_simple(D), "c").probs, [0.3, 0.7])
        np.testing.assert_allclose(induced_latent_marginal(_simple(D), "x").probs, [0.4, 0.6])

    def test_constant_encoder_marginal(self):
        D = np.array([[0.1, 0.2], [0.3, 0.4]])
        s, z = FiniteSpace.of_size(2, "c"), FiniteSpace.of_size(3, "z")
        row = np.log([0.2, 0.3, 0.5])
        inst = _simple(D, enc_c=Encoder(s, z, np.tile(row, (2, 1))))
        inst = ModelInstance(inst.data_joint, inst.encoder_c, inst.encoder_x, MIPrior())
        np.testing.assert_allclose(induced_latent_marginal(inst, "c").probs, [0.2, 0.3, 0.5], atol=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_brute_force(self, seed):
        inst = random_instance(random_dims(seed), seed)
        np.testing.assert_allclose(induced_latent_marginal(inst, "c").probs, _brute_marginal(inst), atol=1e-15)
        np.testing.assert_allclose(induced_latent_joint(inst).probs, _brute_joint(inst), atol=1e-15)

    def test_dims_2222_seed7(self):
        inst = random_instance((2, 2, 2, 2), 7)
        np.testing.assert_allclose(induced_latent_joint(inst).probs, _brute_joint(inst), atol=1e-15)

    def test_independent_data_gives_product(self):
        D = np.outer([0.3, 0.7], [0.2, 0.5, 0.3])
        inst = random_instance((2, 3, 2, 2), 1)
        inst = ModelInstance(JointDistribution(inst.data_joint.row_space, inst.data_joint.col_space, D),
                             inst.encoder_c, inst.encoder_x, MIPrior())
        J = induced_latent_joint(inst).probs
        np.testing.assert_allclose(J, np.outer(J.sum(1), J.sum(0)), atol=1e-15)

    def test_identity_encoders_joint_is_data(self):
        D = np.array([[0.1, 0.2], [0.3, 0.4]])
        np.testing.assert_array_equal(induced_latent_joint(_simple(D)).probs, D)


class TestDecoder:
    def test_identity_uniform(self):
        dec = implicit_decoder(_simple(np.full((3, 3), 1 / 9)), "c")
        np.testing.assert_allclose(dec.probs, np.eye(3))

    def test_constant_encoder(self):
        D = np.array([[0.1, 0.2], [0.3, 0.4]])
        s, z = FiniteSpace.of_size(2, "c"), FiniteSpace.of_size(2, "z")
        inst = _simple(D, enc_c=Encoder(s, z, np.zeros((2, 2))))
        for row in implicit_decoder(inst, "c").probs:
            np.testing.assert_allclose(row, [0.3, 0.7], atol=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_bayes_recomposition(self, seed):
        inst = random_instance(random_dims(seed), seed)
        for side in ("c", "x"):
            dec = implicit_decoder(inst, side).probs
            qz = induced_latent_marginal(inst, side).probs
            np.testing.assert_allclose(dec.sum(1), 1.0, atol=1e-14)
            enc = (inst.encoder_c if side == "c" else inst.encoder_x).probs
            p = inst.data_joint.probs.sum(1 if side == "c" else 0)
            np.testing.assert_allclose(dec.T * qz[None, :], enc * p[:, None], atol=1e-15)

    def test_unreached_latent(self):
        s, z = FiniteSpace.of_size(2, "c"), FiniteSpace(("a", "b", "never"))
        inst = _simple(np.full((2, 2), 0.25), enc_c=Encoder.one_hot(s, z, [0, 1]))
        with pytest.raises(UnreachedLatent) as exc:
            implicit_decoder(inst, "c")
        assert exc.value.label == "never"


class TestPriors:
    def test_constant_coupling_is_product(self):
        inst = random_instance((3, 3, 3, 2), 2).with_prior(InfoNCEPrior(GeneralTable(np.full((3, 2), 2.5))))
        P = resolve_prior(inst).probs
        qz, qzp = induced_latent_marginal(inst, "c").probs, induced_latent_marginal(inst, "x").probs
        np.testing.assert_allclose(P, np.outer(qz, qzp), atol=1e-15)

    def test_mi_prior_is_induced_joint(self):
        inst = random_instance((3, 4, 2, 3), 3)
        np.testing.assert_array_equal(resolve_prior(inst).probs, induced_latent_joint(inst).probs)

    @pytest.mark.parametrize("seed", range(10))
    def test_infonce_z_marginal(self, seed):
        inst = random_instance(random_dims(seed), seed, prior="infonce")
        P = resolve_prior(inst).probs
        np.testing.assert_allclose(P.sum(1), induced_latent_marginal(inst, "c").probs, atol=1e-12)
        assert P.sum() == pytest.approx(1.0, abs=1e-12)

    def test_explicit_table(self):
        P = resolve_prior(random_instance((2, 2, 2, 3), 0, prior="table")).probs
        assert P.shape == (2, 3) and P.sum() == pytest.approx(1.0, abs=1e-15)


class TestGenerators:
    def test_random_instance_deterministic(self):
        a, b = random_instance((4, 3, 3, 2), 5, "infonce"), random_instance((4, 3, 3, 2), 5, "infonce")
        np.testing.assert_array_equal(a.data_joint.probs, b.data_joint.probs)
        np.testing.assert_array_equal(a.encoder_c.logits, b.encoder_c.logits)
        np.testing.assert_array_equal(a.prior.coupling.W, b.prior.coupling.W)

    def test_random_instance_smoke(self):
        for seed in range(100):
            random_instance((3, 3, 2, 2), seed)

    def test_random_dims_range(self):
        for seed in range(50):
            c, x, k, l = random_dims(seed)
            assert 2 <= c <= 5 and 2 <= x <= 5 and 2 <= k <= 4 and 2 <= l <= 4

    def test_noiseless_bit(self):
        inst = make_shared_factor_model(2, 1, 0.0, seed=0)
        np.testing.assert_allclose(inst.data_joint.probs, np.diag([0.5, 0.5]), atol=1e-15)
        assert mutual_information(inst.data_joint) == pytest.approx(math.log(2), abs=1e-15)

    def test_pure_noise(self):
        inst = make_shared_factor_model(3, 2, 1.0, seed=4)
        assert mutual_information(inst.data_joint) == pytest.approx(0.0, abs=1e-15)
        assert factor_mutual_information(inst) == pytest.approx(0.0, abs=1e-15)

    def test_regression_constant(self):
        for _ in range(2):
            inst = make_shared_factor_model(4, 3, 0.2, seed=11)
            assert mutual_information(inst.data_joint) == pytest.approx(SHARED_FACTOR_MI_4_3_02_SEED11, abs=1e-14)

    def test_noiseless_views_share_only_s(self):
        # with no noise, c and x' are conditionally independent given s, so MI(c; x') = H(s)
        inst = make_shared_factor_model(4, 3, 0.0, seed=2)
        assert mutual_information(inst.data_joint) == pytest.approx(math.log(4), abs=1e-13)

    def test_init_seed_keeps_data(self):
        a = make_shared_factor_model(4, 2, 0.0, seed=3)
        b = make_shared_factor_model(4, 2, 0.0, seed=3, init_seed=99)
        np.testing.assert_array_equal(a.data_joint.probs, b.data_joint.probs)
        assert not np.array_equal(a.encoder_c.logits, b.encoder_c.logits)

    def test_invalid(self):
        with pytest.raises(ValidationError):
            make_shared_factor_model(1, 1, 0.0, 0)
        with pytest.raises(ValidationError):
            make_shared_factor_model(2, 1, 1.5, 0)
        with pytest.raises(ValidationError):
            random_instance((1, 2, 2, 2), 0)
