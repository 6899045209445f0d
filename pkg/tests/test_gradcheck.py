from __future__ import annotations

import numpy as np
import pytest

from kgroute.gradcheck import (
    LossEvaluator, _loss, finite_diff_check, inject_adjoint_fault, random_routed_graph, reference_problem, rel_error,
)


def test_rel_error_floor():
    assert rel_error(1.0, 1.0) == 0.0
    assert rel_error(2.0, 1.0) == pytest.approx(0.5)
    # below the floor the comparison is absolute / floor
    assert rel_error(1e-9, 0.0) == pytest.approx(1e-5)


def test_random_graph_shape():
    g = random_routed_graph(0)
    assert len(g.nodes) == 12
    assert len(g.entity_ids) == 7 and len(g.agent_nodes) == 4
    assert {e[1] for e in g.base.edges} == {"rel0", "rel1", "rel2"}


@pytest.mark.parametrize("readout", ["kl", "linear"])
def test_evaluator_matches_taped_loss(readout):
    cg, params, target = reference_problem(2)
    res, loss = _loss(cg, params, target, readout=readout)
    ev = LossEvaluator(cg, params, target, readout)
    full, _ = ev()
    primed, _ = ev.prime()
    assert full == pytest.approx(float(loss.value[0, 0]), rel=1e-13, abs=1e-15)
    assert primed == full


def test_partial_evaluation_matches_full_pass():
    cg, params, target = reference_problem(1)
    work = params.copy()
    ev = LossEvaluator(cg, work, target)
    ev.prime()
    rng = np.random.default_rng(0)
    for name, (a, b) in params.offsets().items():
        i = int(rng.integers(a, b))
        work.flat[i] += 1e-3
        stage, part = LossEvaluator.locate(name, params.config.layers)
        partial = ev(start=stage, part=part)
        full = ev()
        work.flat[i] -= 1e-3
        assert partial[0] == full[0], name
        assert np.array_equal(partial[1], full[1]), name


def test_reference_problem_passes():
    cg, params, target = reference_problem(0)
    rep = finite_diff_check(params, cg, target, eps=1e-6, n_inputs=32)
    assert rep.checked + len(rep.excluded) == params.size() + 32
    assert rep.passed(1e-5), rep.summary()


def test_linear_network_is_exact():
    cg, params, target = reference_problem(0, hidden=6, nonlinearity="identity")
    rep = finite_diff_check(params, cg, target, readout="linear", n_inputs=16)
    assert rep.excluded == []
    assert rep.max_abs_error < 1e-8, rep.summary()


@pytest.mark.parametrize("op", ["matmul", "typed_affine", "relational_mean", "softmax_row", "concat_cols"])
def test_injected_adjoint_fault_is_detected(op):
    cg, params, target = reference_problem(0, hidden=6)
    with inject_adjoint_fault(op, 1.5):
        rep = finite_diff_check(params, cg, target, n_inputs=8)
    assert not rep.passed(1e-5), f"{op}: {rep.summary()}"
    # and the patch is undone afterwards
    assert finite_diff_check(params, cg, target, n_inputs=8).passed(1e-5)
