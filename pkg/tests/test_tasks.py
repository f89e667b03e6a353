import numpy as np
import pytest

from hebm.ebm import EnergyParams, LangevinConfig, TrainConfig
from hebm.generator import GeneratorParams, InferenceParams, train_generator
from hebm.nn import RngStream
from hebm.tasks import (CoupledEnergyParams, SymbolBlock, SymbolSpec, auroc,
                        classify, controllable_sample, coupled_cond_grad,
                        coupled_marginal_energy, logsumexp,
                        ood_score_diffusion, ood_score_inference,
                        selected_energy, softmax, train_coupled)
from hebm.uspace import make_schedule

DIMS = (4, 3, 2)
SPEC = SymbolSpec([SymbolBlock(arity=4, layers={1, 2})])


def _models(seed=0, randomize=False):
    rs = RngStream(seed, ("tk",))
    beta = GeneratorParams.create(DIMS, 2, rs.child("b"), hidden=8)
    omega = EnergyParams.create(DIMS, 3, rs.child("e"), hidden=8)
    wc = CoupledEnergyParams.create(DIMS, 3, SPEC, rs.child("c"), hidden=8)
    if randomize:
        for net in wc.nets + omega.nets:
            net.weights[-1] = rs.child("rw", net.out_dim,
                                       net.in_dim).normal(
                net.weights[-1].shape) * 0.3
    return beta, omega, wc


def _rand_stack(seed, n=4):
    rs = RngStream(seed, ("stack",))
    return [rs.child(i).normal((n, d)) for i, d in enumerate(DIMS)]


def test_symbol_block_validation():
    with pytest.raises(ValueError):
        SymbolBlock(arity=0, layers={0})
    with pytest.raises(ValueError):
        SymbolBlock(arity=2, layers=set())


def test_symbol_spec_rejects_overlapping_blocks():
    with pytest.raises(ValueError):
        SymbolSpec([SymbolBlock(2, {0, 1}), SymbolBlock(3, {1, 2})])


def test_symbol_spec_block_of():
    spec = SymbolSpec([SymbolBlock(2, {0}), SymbolBlock(3, {2})])
    assert spec.block_of(0) == 0
    assert spec.block_of(1) is None
    assert spec.block_of(2) == 1


def test_softmax_logsumexp_consistency():
    logits = RngStream(1).normal((5, 4)) * 10
    p = softmax(logits)
    assert np.allclose(p.sum(axis=1), 1.0)
    assert np.allclose(np.log(p), logits - logsumexp(logits)[:, None])


def test_classify_probabilities():
    beta, _, wc = _models(randomize=True)
    probs = classify(wc, beta, _rand_stack(2))
    assert len(probs) == 1
    assert probs[0].shape == (4, 4)
    assert np.allclose(probs[0].sum(axis=1), 1.0)


def test_marginal_energy_dominates_selected():
    # logsumexp over symbols is at least the energy of any pinned symbol
    beta, _, wc = _models(randomize=True)
    u0 = _rand_stack(3)
    marg = coupled_marginal_energy(wc, beta, u0)
    for y in range(4):
        sel = selected_energy(wc, beta, u0, [np.full(4, y)])
        assert np.all(marg >= sel - 1e-12)


def test_zero_coupled_nets_give_zero_energies():
    beta, _, wc = _models(randomize=False)
    u0 = _rand_stack(4)
    assert np.allclose(coupled_marginal_energy(wc, beta, u0),
                       np.log(4.0))  # logsumexp of zeros
    sel = selected_energy(wc, beta, u0, [np.zeros(4, dtype=int)])
    assert np.allclose(sel, 0.0)


@pytest.mark.parametrize("pin", [None, 2])
def test_coupled_cond_grad_matches_finite_differences(pin):
    beta, _, wc = _models(seed=5, randomize=True)
    sched = make_schedule(3, 0.01)
    n = 3
    u0 = _rand_stack(10, n=n)
    u1 = _rand_stack(11, n=n)
    y = None if pin is None else [np.full(n, pin)]
    g = coupled_cond_grad(wc, beta, u0, u1, sched, y)

    a, s2 = sched.alphas[0], sched.sigmas[0] ** 2

    def logp(stack):
        f = (coupled_marginal_energy(wc, beta, stack) if y is None
             else selected_energy(wc, beta, stack, y))
        quad = sum(np.sum((a * ut - up) ** 2, axis=1)
                   for ut, up in zip(stack, u1))
        sq = sum(np.sum(layer ** 2, axis=1) for layer in stack)
        return f - 0.5 * sq - quad / (2 * s2)

    eps = 1e-6
    for i in range(len(DIMS)):
        for r in range(n):
            for c in range(u0[i].shape[1]):
                up = [layer.copy() for layer in u0]
                dn = [layer.copy() for layer in u0]
                up[i][r, c] += eps
                dn[i][r, c] -= eps
                fd = (logp(up)[r] - logp(dn)[r]) / (2 * eps)
                assert g[i][r, c] == pytest.approx(fd, abs=1e-6)


def test_controllable_sample_rejects_bad_symbol():
    beta, omega, wc = _models()
    sched = make_schedule(3, 0.01)
    lcfg = LangevinConfig(K=2, a=0.05)
    with pytest.raises(ValueError):
        controllable_sample(wc, omega, beta, [9], sched, lcfg,
                            RngStream(0), n=2)
    with pytest.raises(ValueError):
        controllable_sample(wc, omega, beta, [0, 1], sched, lcfg,
                            RngStream(0), n=2)


def test_conditioning_is_identity_when_coupled_nets_are_zero():
    # pinning a label only matters through the coupled nets; with the
    # zero init the conditional and unconditional trajectories coincide
    beta, omega, wc = _models(randomize=False)
    sched = make_schedule(3, 0.01)
    lcfg = LangevinConfig(K=5, a=0.05)
    a = controllable_sample(wc, omega, beta, [1], sched, lcfg,
                            RngStream(3, ("cs",)), n=4)
    b = controllable_sample(wc, omega, beta, None, sched, lcfg,
                            RngStream(3, ("cs",)), n=4)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def _labeled_first_stage(seed=6):
    rs = RngStream(seed, ("lfs",))
    n = 200
    labels = np.repeat(np.arange(4), n // 4)
    centers = np.array([[2.0, 0], [0, 2.0], [-2.0, 0], [0, -2.0]])
    x = centers[labels] + rs.child("x").normal((n, 2)) * 0.2
    beta = GeneratorParams.create(DIMS, 2, rs.child("beta"), hidden=8)
    phi = InferenceParams.create(DIMS, 2, rs.child("phi"), hidden=8)
    train_generator(beta, phi, x, 150, 64, 5e-3, rs.child("train"))
    return beta, phi, x, labels


def test_train_coupled_runs_and_reports_metrics():
    beta, phi, x, labels = _labeled_first_stage()
    _, omega, wc = _models(seed=7)
    sched = make_schedule(3, 0.01)
    lcfg = LangevinConfig(K=3, a=0.05)
    tcfg = TrainConfig(iters=8, batch=32, lr=1e-3)
    rows = train_coupled(wc, omega, beta, phi, x, labels, sched, lcfg, tcfg,
                         RngStream(8, ("tc",)))
    assert len(rows) == 8
    t0_rows = [r for r in rows if r["t"] == 0]
    assert all(np.isfinite(r["ce"]) for r in t0_rows)
    assert all({"E_pos", "E_neg"} <= set(r) for r in rows)


def test_train_coupled_rejects_label_shape_mismatch():
    beta, phi, x, labels = _labeled_first_stage()
    _, omega, wc = _models(seed=9)
    sched = make_schedule(3, 0.01)
    with pytest.raises(ValueError):
        train_coupled(wc, omega, beta, phi, x,
                      np.stack([labels, labels], axis=1), sched,
                      LangevinConfig(K=1), TrainConfig(iters=1),
                      RngStream(0))


def test_ood_scores_shapes_and_layer_bounds():
    beta, phi, x, _ = _labeled_first_stage()
    _, omega, _ = _models(seed=10, randomize=True)
    sched = make_schedule(3, 0.01)
    lcfg = LangevinConfig(K=3, a=0.05)
    s_inf = ood_score_inference(omega, beta, phi, x[:16], 1)
    assert s_inf.shape == (16,)
    s_dif = ood_score_diffusion(omega, beta, phi, x[:16], 1, sched, lcfg,
                                RngStream(11, ("ood",)))
    assert s_dif.shape == (16,)
    with pytest.raises(ValueError):
        ood_score_inference(omega, beta, phi, x[:4], 5)


def test_auroc_hand_cases():
    assert auroc([0, 0, 0], [1, 1, 1]) == 1.0
    assert auroc([1, 1], [0, 0]) == 0.0
    assert auroc([0, 1], [0, 1]) == pytest.approx(0.5)
    # one tie counts half: pairs (1<2)=1, (1=1)=0.5 -> 1.5/4
    assert auroc([1, 2], [1, 2]) == pytest.approx(0.5)
    # id=[0,0,1] vs ood=[1,2,2]: wins 8, ties 1 -> (8 + 0.5) / 9
    assert auroc([0, 0, 1], [1, 2, 2]) == pytest.approx(8.5 / 9)


def test_auroc_rejects_empty():
    with pytest.raises(ValueError):
        auroc([], [1.0])
