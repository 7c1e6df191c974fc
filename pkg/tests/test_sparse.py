import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alg1_reference import ScalarCorrection
from conftest import spmd_comm
from gradflow.collectives import oracle_allreduce
from gradflow.gradient_pool import build_pool, num_chunks_for
from gradflow.sparse import (SparseExchanger, SparseState, correction_pre_allreduce, num_selected,
                             select_next_important, select_top_chunks, sgd_update, sparse_exchange,
                             sparse_log_line, sparsity_at)
from gradflow.transport import ProtocolError


def one_chunk_state(momentum=0.9, lr=0.1, dtype=np.float64):
    pool = build_pool([1], chunk_size=1, element_type="fp64" if dtype == np.float64 else "fp32")
    return pool, SparseState.for_pool(pool, momentum=momentum, learning_rate=lr, dtype=dtype)


def test_sparsity_schedule():
    assert sparsity_at(0, 100, 0.85) == 0.0
    assert sparsity_at(100, 100, 0.85) == 0.85
    assert sparsity_at(50, 100, 0.9) == pytest.approx(0.45)
    assert sparsity_at(500, 100, 0.9) == 0.9
    assert sparsity_at(0, 0, 0.7) == 0.7


def test_selection_count_rounding():
    assert num_selected(0.85, 1903) == math.floor(0.15 * 1903 + 0.5) == 285
    assert num_selected(0.0, 10) == 10
    assert num_selected(0.999, 10) == 1
    # 60.9M elements at 32000 per chunk -> 1903 chunks
    assert num_chunks_for(60_900_000, 32000) == 1903


def test_correction_two_step_example():
    pool, st_ = one_chunk_state()
    pool.write_tensor(1, [1.0])
    st_.important[0] = False
    assert correction_pre_allreduce(st_, pool, 0) is False
    assert st_.hg[0] == pytest.approx(0.9)
    pool.begin_iteration()
    pool.write_tensor(1, [1.0])
    st_.important[0] = True
    assert correction_pre_allreduce(st_, pool, 0) is True
    assert pool.data[0] == pytest.approx(1.9)
    assert st_.hg[0] == 0


def test_correction_identity_when_no_residual():
    pool, st_ = one_chunk_state()
    pool.write_tensor(1, [0.3])
    correction_pre_allreduce(st_, pool, 0)
    assert pool.data[0] == 0.3


def test_correction_requires_complete_chunk():
    pool = build_pool([4, 4], chunk_size=4)
    st_ = SparseState.for_pool(pool)
    with pytest.raises(RuntimeError):
        correction_pre_allreduce(st_, pool, 0)


def test_update_two_step_example():
    pool, st_ = one_chunk_state(momentum=0.9, lr=0.1)
    w = np.zeros(1)
    for expect_u in (0.1, 0.19):
        pool.begin_iteration()
        pool.write_tensor(1, [1.0])
        sgd_update(st_, pool, w, 1)
        assert st_.hu[0] == pytest.approx(expect_u)
    assert w[0] == pytest.approx(-0.29)


def test_update_plain_sgd_and_skip_rule():
    pool = build_pool([2, 2], chunk_size=2, element_type="fp64")
    st_ = SparseState.for_pool(pool, momentum=0.0, learning_rate=0.5, dtype=np.float64)
    pool.write_tensor(2, [1.0, 2.0])
    pool.write_tensor(1, [4.0, 8.0])
    w = np.ones(4)
    sgd_update(st_, pool, w, 1)
    np.testing.assert_allclose(w, [0.5, 0.0, -1.0, -3.0])
    st_.important[:] = [False, True]
    st_.momentum = 0.9
    hu_before = st_.hu.copy()
    sgd_update(st_, pool, w, 2)
    np.testing.assert_allclose(w[:2], [0.5, 0.0])
    np.testing.assert_array_equal(st_.hu[:2], hu_before[:2])
    # hu after step 1 is lr*g = [2, 4]; averaged g is [2, 4]
    np.testing.assert_allclose(w[2:], [-1.0 - (0.9 * 2 + 0.5 * 2), -3.0 - (0.9 * 4 + 0.5 * 4)])


def test_selection_hand_trace():
    def body(comm):
        pool = build_pool([4], chunk_size=1)
        st_ = SparseState.for_pool(pool, final_sparsity=0.5)
        st_.important[:] = False
        local = [[1, 0, 2, 0], [1, 0, 0, 4]][comm.rank]
        pool.write_tensor(1, local)
        return select_next_important(st_, pool, comm, t=10), st_.last_norms

    for chosen, norms in spmd_comm(2, body):
        np.testing.assert_array_equal(norms, [2, 0, 2, 4])
        assert list(np.flatnonzero(chosen)) == [0, 3]


def test_tie_break_low_index():
    assert list(np.flatnonzero(select_top_chunks(np.ones(5, np.float32), 2))) == [0, 1]
    assert list(np.flatnonzero(select_top_chunks(np.array([1, 3, 3, 2], np.float32), 1))) == [1]


def test_important_chunk_divided_by_world_size():
    # chunk 0 holds the global sum S=6 on both ranks; chunk 1 holds local values 2 and 2
    def body(comm):
        pool = build_pool([2], chunk_size=1)
        st_ = SparseState.for_pool(pool, final_sparsity=0.0)
        st_.important[:] = [True, False]
        pool.write_tensor(1, [6.0, 2.0])
        select_next_important(st_, pool, comm, t=0)
        return st_.last_norms

    for norms in spmd_comm(2, body):
        np.testing.assert_array_equal(norms, [6.0, 4.0])


def run_n1_iteration(state, pool, comm, grads):
    pool.begin_iteration()
    exch = SparseExchanger(state, pool, comm, theta=0)
    exch.begin()
    sent = {}
    for c in pool.write_tensor(1, grads):
        if correction_pre_allreduce(state, pool, c):
            a, b = pool.chunk_bounds(c)
            sent.update({i: float(pool.data[i]) for i in range(a, b)})
        exch.add(c)
    exch.finish()
    return sent


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_matches_scalar_reference_on_random_schedules(seed):
    rng = np.random.default_rng(seed)
    n_el, cs, iters = 12, 3, 15
    momentum, lr = float(rng.uniform(0, 0.99)), float(rng.uniform(0.01, 1))

    def body(comm):
        pool = build_pool([n_el], chunk_size=cs, element_type="fp64")
        state = SparseState.for_pool(pool, momentum=momentum, learning_rate=lr, dtype=np.float64)
        refs = [ScalarCorrection(momentum, lr) for _ in range(n_el)]
        w = np.zeros(n_el)
        for _ in range(iters):
            state.important = rng.random(pool.num_chunks) < 0.5
            grads = rng.standard_normal(n_el)
            sent = run_n1_iteration(state, pool, comm, grads)
            sgd_update(state, pool, w, 1)
            for i, ref in enumerate(refs):
                expect = ref.step(float(grads[i]), bool(state.important[i // cs]))
                assert sent.get(i) == expect
            assert w.tolist() == [r.w for r in refs]
            assert state.hg.tolist() == [r.hg for r in refs]
            assert state.hu.tolist() == [r.hu for r in refs]
        return True

    assert spmd_comm(1, body)


def test_hg_zero_on_important_chunks(rng):
    def body(comm):
        pool = build_pool([50], chunk_size=10)
        state = SparseState.for_pool(pool, final_sparsity=0.6)
        for t in range(6):
            important = state.important.copy()
            run_n1_iteration(state, pool, comm, rng.standard_normal(50))
            assert np.all(state.hg[state.element_mask(important)] == 0)
            select_next_important(state, pool, comm, t)
        return True

    assert spmd_comm(1, body)


def test_selection_agreement_and_restricted_oracle(rng):
    n = 4
    local = [rng.standard_normal(200).astype(np.float32) for _ in range(n)]

    def body(comm):
        pool = build_pool([200], chunk_size=20)
        state = SparseState.for_pool(pool, final_sparsity=0.7)
        state.important[:] = False
        state.important[[1, 4, 7]] = True
        pool.write_tensor(1, local[comm.rank])
        ref = local[comm.rank].copy()
        oracle_allreduce(comm, ref, "ref")
        sparse_exchange(state, pool, comm, theta=128)
        mask = state.element_mask()
        np.testing.assert_allclose(pool.data[mask], ref[mask], rtol=1e-6, atol=1e-6)
        np.testing.assert_array_equal(pool.data[~mask], local[comm.rank][~mask])
        return select_next_important(state, pool, comm, 0).tobytes()

    out = spmd_comm(n, body)
    assert len(set(out)) == 1


def test_divergent_important_sets_detected():
    def body(comm):
        pool = build_pool([40], chunk_size=10)
        state = SparseState.for_pool(pool)
        state.important[:] = [True, comm.rank == 0, True, True]
        pool.write_tensor(1, np.ones(40))
        sparse_exchange(state, pool, comm)

    with pytest.raises(ProtocolError):
        spmd_comm(2, body, timeout=3.0)


@pytest.mark.parametrize("theta", [0, 100, math.inf])
def test_sparsity_zero_equals_dense_integer_data(theta, rng):
    local = [rng.integers(-20, 20, 97).astype(np.float32) for _ in range(3)]

    def body(comm):
        pool = build_pool([97], chunk_size=10)
        state = SparseState.for_pool(pool)
        pool.write_tensor(1, local[comm.rank])
        sparse_exchange(state, pool, comm, theta=theta)
        return pool.data.tobytes()

    expect = np.sum(local, axis=0).astype(np.float32).tobytes()
    assert spmd_comm(3, body) == [expect] * 3


def test_payload_law(rng):
    n = 4

    def body(comm):
        pool = build_pool([1000], chunk_size=50)
        state = SparseState.for_pool(pool)
        state.important[:] = False
        state.important[[0, 3, 5, 19]] = True
        pool.write_tensor(1, rng.standard_normal(1000))
        launched = sparse_exchange(state, pool, comm)
        return comm.stats.sent("grad"), launched

    for sent, launched in spmd_comm(n, body):
        assert launched == 1
        assert sent == 2 * (n - 1) * 200 * 4 // n


def test_log_line():
    assert sparse_log_line(3, 0.5, 7, 1024, 64) == "3,0.500000,7,1024,64"


def test_state_validation():
    with pytest.raises(ValueError):
        SparseState(1, 1, np.array([0, 1]), momentum=1.0)
    with pytest.raises(ValueError):
        SparseState(1, 1, np.array([0, 1]), final_sparsity=1.0)
