import numpy as np
import pytest

from hebm.generator import GeneratorParams
from hebm.nn import RngStream
from hebm.uspace import (latent_vjp, make_schedule, perturb_step, perturb_to,
                         to_base, to_latent, to_latent_cached)

DIMS = (4, 3, 2)


def _beta(seed):
    return GeneratorParams.create(DIMS, 2, RngStream(seed, ("b",)), hidden=8)


def test_round_trip_both_directions():
    beta = _beta(0)
    rs = RngStream(1)
    u = [rs.child("u", i).normal((6, d)) for i, d in enumerate(DIMS)]
    back = to_base(beta, to_latent(beta, u))
    for a, b in zip(u, back):
        assert np.max(np.abs(a - b)) < 1e-9
    z = [rs.child("z", i).normal((6, d)) * 3 for i, d in enumerate(DIMS)]
    fwd = to_latent(beta, to_base(beta, z))
    for a, b in zip(z, fwd):
        assert np.max(np.abs(a - b)) < 1e-9


def test_top_layer_passes_through():
    beta = _beta(2)
    u = [RngStream(3).child(i).normal((4, d)) for i, d in enumerate(DIMS)]
    z = to_latent(beta, u)
    assert np.array_equal(z[-1], u[-1])


def test_to_latent_cached_matches_plain():
    beta = _beta(4)
    u = [RngStream(5).child(i).normal((4, d)) for i, d in enumerate(DIMS)]
    z1 = to_latent(beta, u)
    z2, caches = to_latent_cached(beta, u)
    for a, b in zip(z1, z2):
        assert np.array_equal(a, b)
    assert len(caches) == len(DIMS) - 1


def test_latent_vjp_matches_finite_differences():
    beta = _beta(6)
    rs = RngStream(7)
    u = [rs.child("u", i).normal((3, d)) for i, d in enumerate(DIMS)]
    g_z = [rs.child("g", i).normal((3, d)) for i, d in enumerate(DIMS)]
    _, caches = to_latent_cached(beta, u)
    g_u = latent_vjp(beta, u, caches, [g.copy() for g in g_z])

    def value(stack):
        z = to_latent(beta, stack)
        return sum(float(np.sum(g * zi)) for g, zi in zip(g_z, z))

    eps = 1e-6
    for i in range(len(DIMS)):
        for r in range(u[i].shape[0]):
            for c in range(u[i].shape[1]):
                up = [layer.copy() for layer in u]
                dn = [layer.copy() for layer in u]
                up[i][r, c] += eps
                dn[i][r, c] -= eps
                fd = (value(up) - value(dn)) / (2 * eps)
                assert g_u[i][r, c] == pytest.approx(fd, abs=1e-6)


def test_schedule_alpha_sigma_identity():
    for T in (1, 3, 5):
        sched = make_schedule(T, 0.01)
        assert np.allclose(sched.alphas ** 2 + sched.sigmas ** 2, 1.0)
        assert sched.alpha_bars[0] == pytest.approx(1.0)
        assert sched.alpha_bars[-1] == pytest.approx(0.01)
        assert np.allclose(np.cumprod(sched.alphas), sched.alpha_bars[1:])


def test_schedule_geometric_steps_equal():
    sched = make_schedule(3, 0.01)
    assert np.allclose(sched.alphas, 0.01 ** (1 / 3))


def test_schedule_rejects_bad_args():
    with pytest.raises(ValueError):
        make_schedule(0)
    with pytest.raises(ValueError):
        make_schedule(3, 1.5)


def test_perturb_to_matches_composed_steps_with_shared_noise():
    # with noise pinned to zero the marginal must equal the composition
    sched = make_schedule(3, 0.01)
    u0 = [RngStream(8).child(i).normal((5, d)) for i, d in enumerate(DIMS)]
    zero = [np.zeros_like(layer) for layer in u0]
    stepped = u0
    for t in range(2):
        stepped = perturb_step(stepped, t, sched, noise=zero)
    marginal = perturb_to(u0, 2, sched, noise=zero)
    for a, b in zip(stepped, marginal):
        assert np.allclose(a, b)


def test_perturb_marginal_variance():
    sched = make_schedule(3, 0.01)
    u0 = [np.zeros((50000, d)) for d in DIMS]
    out = perturb_to(u0, 3, sched, RngStream(9, ("pv",)))
    flat = np.concatenate([o.reshape(-1) for o in out])
    want = np.sqrt(1 - sched.alpha_bars[3] ** 2)
    assert flat.std() == pytest.approx(want, rel=0.02)


def test_perturb_index_bounds():
    sched = make_schedule(3, 0.01)
    u = [np.zeros((1, d)) for d in DIMS]
    with pytest.raises(ValueError):
        perturb_step(u, 3, sched, RngStream(0))
    with pytest.raises(ValueError):
        perturb_to(u, 0, sched, RngStream(0))
