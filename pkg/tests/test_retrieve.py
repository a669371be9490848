import math

import numpy as np
import pytest

from geoswc.numerics import checkpoint_bytes, grad_check, parse_checkpoint
from geoswc.retrieve import (
    EmptyNegatives,
    MemoryBank,
    RetrievalConfig,
    RRMParams,
    embed,
    infonce_batch,
    infonce_loss,
    raw_embed,
    rrm_backward,
    rrm_checkpoint,
    rrm_forward,
    rrm_from_checkpoint,
    sample_epoch_pairs,
    select_semi_hard,
    train_rrm,
    triplet_batch,
    triplet_loss,
)


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def test_equal_similarities_give_log_n_minus_one():
    # a batch of N embeddings: one query, its positive and N - 2 negatives
    for n in (3, 10, 65):
        q = unit([1.0, 0.0, 0.0])
        others = np.tile(unit([0.0, 1.0, 0.0]), (n - 1, 1))
        loss, _, _ = infonce_loss(q, others[0], others[1:], tau=0.05)
        assert abs(loss - math.log(n - 1)) <= 1e-9


def test_infonce_value_and_gradient():
    rng = np.random.default_rng(0)
    q, p = unit(rng.standard_normal(5)), unit(rng.standard_normal(5))
    negs = unit(rng.standard_normal((4, 5)))
    tau = 0.3
    loss, dq, dp = infonce_loss(q, p, negs, tau)
    s = np.concatenate([[q @ p], negs @ q]) / tau
    assert loss == pytest.approx(-s[0] + math.log(np.exp(s).sum()), rel=1e-13)

    def f(par):
        l, a, b = infonce_loss(par["q"], par["p"], negs, tau)
        return l, {"q": a, "p": b}

    assert grad_check(f, {"q": q, "p": p}).passed


def test_infonce_errors():
    with pytest.raises(EmptyNegatives):
        infonce_loss(unit([1, 0]), unit([0, 1]), np.zeros((0, 2)), 0.1)
    with pytest.raises(ValueError):
        infonce_loss(unit([1, 0]), unit([0, 1]), unit([[1, 1]]), 0.0)


def test_batch_masks_same_cell_bank_entries():
    rng = np.random.default_rng(1)
    Q, P = unit(rng.standard_normal((3, 4))), unit(rng.standard_normal((3, 4)))
    bank = unit(rng.standard_normal((5, 4)))
    bank_cells = np.array([0, 0, 1, 2, 0])
    q_cells = np.array([0, 1, 7])
    loss, dQ, dP, used = infonce_batch(Q, P, q_cells, bank, bank_cells, 0.1)
    assert used.tolist() == [True, True, True]
    ref = np.mean([infonce_loss(Q[i], P[i], bank[bank_cells != q_cells[i]], 0.1)[0] for i in range(3)])
    assert loss == pytest.approx(ref, rel=1e-13)
    # a query whose cell fills the whole bank has no negatives and is skipped
    loss, dQ, dP, used = infonce_batch(Q, P, np.array([0, 0, 0]), bank[:2], bank_cells[:2], 0.1)
    assert not used.any() and loss == 0.0 and not dQ.any()


def test_semi_hard_selection():
    q = unit([1.0, 0.0])
    p = unit([math.cos(0.2), math.sin(0.2)])  # q.p ~ 0.980
    sp = q @ p
    cands = np.array([[sp - 0.005, 0.0], [sp - 0.002, 0.0], [sp + 0.01, 0.0], [sp - 0.5, 0.0]])
    assert select_semi_hard(q, p, cands, margin=0.01) == 1
    assert select_semi_hard(q, p, cands[[2, 3]], margin=0.01) == 0  # no semi-hard: hardest overall
    loss, dq, dp = triplet_loss(q, p, cands, margin=0.01)
    assert loss == pytest.approx(0.008, abs=1e-12)
    assert triplet_loss(q, p, np.array([sp - 0.5, 0.0]), margin=0.01)[0] == 0.0


def test_triplet_gradient():
    rng = np.random.default_rng(2)
    q, p, n = unit(rng.standard_normal((3, 6)))
    margin = 1.0 + abs(q @ p - q @ n)

    def f(par):
        l, a, b = triplet_loss(par["q"], par["p"], n, margin)
        return l, {"q": a, "p": b}

    assert grad_check(f, {"q": q, "p": p}).passed


def full_rrm_loss(params0: RRMParams, Zq, Zp, bank, bank_cells, q_cells, kind):
    def f(par):
        prm = RRMParams(**par, residual=params0.residual, ln_placement=params0.ln_placement)
        B = len(Zq)
        E, cache = rrm_forward(prm, np.vstack([Zq, Zp]))
        if kind == "infonce":
            loss, dQ, dP, _ = infonce_batch(E[:B], E[B:], q_cells, bank, bank_cells, 0.5)
        else:
            loss, dQ, dP, _ = triplet_batch(E[:B], E[B:], q_cells, bank, bank_cells, 0.5)
        return loss, rrm_backward(prm, cache, np.vstack([dQ, dP]))

    return f


@pytest.mark.parametrize("residual,placement", [(True, "input"), (True, "normalized"), (False, "input")])
@pytest.mark.parametrize("kind", ["infonce", "triplet"])
def test_gradients_through_the_module(residual, placement, kind):
    rng = np.random.default_rng(3)
    prm = RRMParams.init(5, 7, rng, residual, placement)
    prm.ln1_gain += rng.normal(0, 0.1, 5)
    prm.ln2_bias += rng.normal(0, 0.1, 5)
    prm.b1 += rng.normal(0, 0.1, 7)
    Zq, Zp = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
    bank, bank_cells = unit(rng.standard_normal((6, 5))), np.array([0, 1, 2, 3, 4, 5])
    f = full_rrm_loss(prm, Zq, Zp, bank, bank_cells, np.array([0, 1, 9]), kind)
    report = grad_check(f, prm.arrays(), tolerance=1e-5)
    assert report.passed, report


def test_forward_shapes_and_unit_norm():
    rng = np.random.default_rng(4)
    prm = RRMParams.init(8, 16, rng)
    E = embed(prm, rng.standard_normal((10, 8)), chunk=3)
    assert E.shape == (10, 8)
    np.testing.assert_allclose(np.linalg.norm(E, axis=1), 1.0, rtol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(raw_embed(rng.standard_normal((4, 8))), axis=1), 1.0)
    with pytest.raises(ValueError):
        RRMParams.init(8, 16, rng, ln_placement="after")


def test_without_residual_skips_the_input_path():
    rng = np.random.default_rng(5)
    prm = RRMParams.init(4, 6, rng, residual=False)
    prm.W1[:] = 0.0
    prm.b1[:] = 0.0
    prm.b2[:] = rng.standard_normal(4)
    E1 = embed(prm, rng.standard_normal((3, 4)))
    assert np.allclose(E1, E1[0])  # output independent of the input


def test_memory_bank_fifo():
    bank = MemoryBank(3, 2)
    assert len(bank) == 0 and bank.entries()[0].shape == (0, 2)
    bank.push(np.array([[1, 0], [2, 0]]), np.array([1, 2]))
    bank.push(np.array([[3, 0], [4, 0]]), np.array([3, 4]))
    emb, cells = bank.entries()
    assert cells.tolist() == [2, 3, 4] and emb[:, 0].tolist() == [2, 3, 4]
    with pytest.raises(ValueError):
        MemoryBank(0, 2)


def test_epoch_pairs():
    rng = np.random.default_rng(6)
    cells = np.array([0, 0, 0, 1, 2, 2, 5, 5, 5, 5])
    for _ in range(50):
        pairs = sample_epoch_pairs(cells, rng)
        assert len(pairs) == 3
        assert all(a != b and cells[a] == cells[b] for a, b in pairs)
        assert sorted(cells[pairs[:, 0]].tolist()) == [0, 2, 5]


def _cell_data(seed):
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((6, 8))
    cells = np.repeat(np.arange(6), 30)
    nuisance = rng.standard_normal((3, 8)) * 3
    Z = centers[cells] + nuisance[rng.integers(0, 3, len(cells))] + rng.normal(0, 0.3, (len(cells), 8))
    return Z, cells


def test_training_reduces_loss_and_is_deterministic():
    Z, cells = _cell_data(0)
    cfg = RetrievalConfig(hidden=16, bank_size=32, batch_size=4, epochs=60, lr=5e-3, seed=2)
    a, b = train_rrm(Z, cells, cfg), train_rrm(Z, cells, cfg)
    assert np.mean(a.losses[-10:]) < np.mean(a.losses[1:11])
    for k, v in a.params.arrays().items():
        assert np.array_equal(v, b.params.arrays()[k])
    t = train_rrm(Z, cells, RetrievalConfig(hidden=16, bank_size=32, batch_size=4, epochs=5, loss="triplet"))
    assert len(t.losses) == 5


def test_config_validation():
    with pytest.raises(ValueError):
        RetrievalConfig(tau=0)
    with pytest.raises(ValueError):
        RetrievalConfig(loss="arcface")


def test_checkpoint_round_trip():
    prm = RRMParams.init(4, 5, np.random.default_rng(7), residual=False, ln_placement="normalized")
    arrays, meta = rrm_checkpoint(prm, loss="infonce")
    back = rrm_from_checkpoint(*parse_checkpoint(checkpoint_bytes(arrays, meta)))
    assert back.residual is False and back.ln_placement == "normalized"
    z = np.random.default_rng(8).standard_normal((3, 4))
    np.testing.assert_array_equal(embed(back, z), embed(prm, z))
