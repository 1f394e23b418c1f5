import numpy as np
import pytest

from equireg import autodiff as ad
from equireg.autodiff import GradTape, check_gradients
from equireg.equinet import (DegenerateCloud, EncoderConfig, EquiNet, ShapeMismatch, encode,
                             encode_global, encode_local, trace_global, trace_local, vn_linear,
                             vn_nonlinear)
from equireg.harness import TOY_ENCODER, equivariance_residual, invariance_residual
from equireg.mathcore import RigidTransform, random_rotation
from equireg.shapes import generate_dataset, sample_surface


_INFER = GradTape(record=False)
const = _INFER.const


def rotate(x, r):
    return x @ r.T


@pytest.fixture(scope="module")
def cloud():
    shape = generate_dataset(1, 0)[0]
    return sample_surface(shape, 256, np.random.default_rng(0))


@pytest.fixture(scope="module")
def net():
    return EquiNet.create(seed=3)


# -- layers ------------------------------------------------------------------------

def test_vn_linear_identity_and_zero(rng):
    x = rng.normal(size=(5, 4, 3))
    assert np.array_equal(vn_linear(const(np.eye(4)), const(x)).value, x)
    assert np.array_equal(vn_linear(const(np.zeros((2, 4))), const(x)).value, np.zeros((5, 2, 3)))


def test_vn_linear_commutes_with_rotation(rng):
    w, x, r = rng.normal(size=(6, 4)), rng.normal(size=(10, 4, 3)), random_rotation(rng)
    a = vn_linear(const(w), const(rotate(x, r))).value
    b = rotate(vn_linear(const(w), const(x)).value, r)
    assert np.abs(a - b).max() / np.abs(b).max() < 1e-10


def test_vn_linear_shape_mismatch(rng):
    with pytest.raises(ShapeMismatch):
        vn_linear(const(np.ones((2, 3))), const(np.ones((5, 4, 3))))


def test_vn_nonlinear_aligned_unchanged():
    x = np.array([[[1.0, 2.0, 3.0]]])
    assert np.allclose(vn_nonlinear(const(np.eye(1)), const(x)).value, x)


def test_vn_nonlinear_anti_aligned_projects_out(rng):
    x = rng.normal(size=(8, 1, 3))
    u = -np.eye(1)   # k = -x: every vector points against its direction
    out = vn_nonlinear(const(u), const(x)).value
    k = -x
    assert np.abs(np.sum(out * k, axis=-1)).max() < 1e-10


def test_vn_nonlinear_projection_for_oblique_vectors(rng):
    x = rng.normal(size=(50, 2, 3))
    u = rng.normal(size=(2, 2))
    out = vn_nonlinear(const(u), const(x)).value
    k = np.einsum("oc,ncd->nod", u, x)
    dot = np.sum(x * k, -1)
    neg = dot < 0
    assert np.abs(np.sum(out * k, -1)[neg]).max() < 1e-10
    assert np.array_equal(out[~neg], x[~neg])


def test_vn_nonlinear_commutes_with_rotation(rng):
    u, x, r = rng.normal(size=(4, 4)), rng.normal(size=(20, 4, 3)), random_rotation(rng)
    a = vn_nonlinear(const(u), const(rotate(x, r))).value
    b = rotate(vn_nonlinear(const(u), const(x)).value, r)
    assert np.abs(a - b).max() / np.abs(b).max() < 1e-8


# -- encoders ----------------------------------------------------------------------

def test_global_feature_permutation_invariant(net, cloud, rng):
    a = encode_global(net, cloud)
    b = encode_global(net, cloud[rng.permutation(len(cloud))])
    assert np.abs(a.channels - b.channels).max() < 1e-9
    assert np.abs(a.centroid - b.centroid).max() < 1e-12


def test_global_feature_equivariant(net, cloud, rng):
    gt = RigidTransform(random_rotation(rng), rng.uniform(-1, 1, 3))
    assert equivariance_residual(net, cloud, gt) < 1e-5


def test_translation_only_moves_centroid(net, cloud):
    a = encode_global(net, cloud)
    b = encode_global(net, cloud + np.array([0.3, -0.2, 0.5]))
    assert np.abs(a.channels - b.channels).max() < 1e-9
    assert np.allclose(b.centroid - a.centroid, [0.3, -0.2, 0.5])


def test_degenerate_cloud(net):
    with pytest.raises(DegenerateCloud):
        encode_global(net, np.ones((10, 3)))
    with pytest.raises(ShapeMismatch):
        encode_global(net, np.ones((2, 3)))


def test_global_feature_shape(net, cloud):
    g = encode_global(net, cloud)
    assert g.channels.shape == (32, 3) and g.as_points().shape == (32, 3)


def test_local_descriptors_invariant(net, cloud, rng):
    gt = RigidTransform(random_rotation(rng), rng.uniform(-1, 1, 3))
    assert invariance_residual(net, cloud, gt) < 1e-5


def test_local_rows_follow_permutation(net, cloud, rng):
    perm = rng.permutation(len(cloud))
    _, a = encode(net, cloud)
    _, b = encode(net, cloud[perm])
    assert a.descriptors.shape == (len(cloud), 512)
    assert np.abs(a.descriptors[perm] - b.descriptors).max() < 1e-9 * np.abs(a.descriptors).max()


def test_local_distinct_shapes_differ(net):
    rng = np.random.default_rng(1)
    s1, s2 = generate_dataset(2, 5)
    _, a = encode(net, sample_surface(s1, 128, rng))
    _, b = encode(net, sample_surface(s2, 128, rng))
    assert np.abs(a.descriptors - b.descriptors).max() > 0


def test_local_requires_matching_global(net, cloud):
    g = encode_global(net, cloud)
    with pytest.raises(ShapeMismatch):
        encode_local(net, cloud[:100], g)


def test_shared_encoder_reuses_global_channels(net, cloud):
    g, l1 = encode(net, cloud)
    assert np.array_equal(encode_local(net, cloud, g).descriptors, l1.descriptors)


def test_equivariance_and_invariance_over_random_trials():
    rng = np.random.default_rng(2)
    shapes = generate_dataset(10, 6)
    for i in range(20):
        net = EquiNet.create(seed=int(rng.integers(1000)))
        p = sample_surface(shapes[i % 10], 128, rng)
        gt = RigidTransform(random_rotation(rng), rng.uniform(-1, 1, 3))
        assert equivariance_residual(net, p, gt) < 1e-5
        assert invariance_residual(net, p, gt) < 1e-5


# -- ablations ---------------------------------------------------------------------

def test_plain_linear_layers_break_equivariance(cloud):
    rng = np.random.default_rng(3)
    net = EquiNet.create(EncoderConfig(vector_neurons=False), seed=0)
    worst = min(equivariance_residual(net, cloud, RigidTransform(random_rotation(rng), np.zeros(3)))
                for _ in range(5))
    assert worst > 0.01


def test_removing_invariant_head_breaks_invariance(cloud):
    rng = np.random.default_rng(4)
    net = EquiNet.create(EncoderConfig(invariant_head=False), seed=0)
    worst = min(invariance_residual(net, cloud, RigidTransform(random_rotation(rng), np.zeros(3)))
                for _ in range(5))
    assert worst > 0.01


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(edge_layers=0)
    with pytest.raises(ValueError):
        EncoderConfig(k=0)
    assert EncoderConfig().descriptor_dim == 512


# -- gradients ---------------------------------------------------------------------

@pytest.mark.parametrize("vector_neurons", [True, False])
def test_encoder_gradients(vector_neurons):
    cfg = EncoderConfig(**{**TOY_ENCODER.__dict__, "vector_neurons": vector_neurons})
    net = EquiNet.create(cfg, seed=1)
    pts = np.random.default_rng(2).normal(size=(10, 3))
    w = np.random.default_rng(3).normal(size=(cfg.global_channels, 3))

    def loss(tape, vs):
        ch, per, _ = trace_global(cfg, vs, pts)
        desc = trace_local(cfg, vs, per, ch)
        return ad.sum(ch * w) + ad.sum(desc * desc)

    worst, where_ = check_gradients(loss, net.params)
    assert worst < 1e-4, where_


def test_checksum_tracks_weights():
    a, b = EquiNet.create(seed=0), EquiNet.create(seed=0)
    assert a.checksum() == b.checksum()
    b.params["layer0.W"] = b.params["layer0.W"] + 1e-16
    assert a.checksum() != b.checksum()
