import math

import numpy as np
import pytest

from nnshrink.net import (Network, Neuron, NeuronRef, PreconditionError, count_neurons, evaluate,
                          to_affine)
from nnshrink.prop import Box, tighten
from nnshrink.redundancy import (ErrorLedger, Replacement, apply_replacements, best_line,
                                 candidate_lines, certify, classify_phase_by_bounds,
                                 greedy_relaxed_removal, line_error, minimal_error_line,
                                 propagate_error_bounds, relaxed_candidates, simulate_filter)
from nnshrink.verify import (build_forward_query, build_phase_query, build_result_preserving_query,
                             check_goal, distance_to_output, solve)
from nnshrink.zoo import cancellation_net, label_net

from netgen import random_network, random_pwl

R = NeuronRef
PM1 = Box([-1.0], [1.0])


def ws(bias, *terms):
    return Neuron.weighted_sum(bias, [(R(l, i), c) for l, i, c in terms])


def relu_out(weight=1.0):
    return Network(((Neuron.input(),), (ws(0.0, (0, 0, 1.0)),), (Neuron.activation(R(1, 0)),),
                    (ws(0.0, (2, 0, weight)),)))


def two_relu_net():
    # y = 1.5 * ReLU(x) + ReLU(0.5 x + 0.2), both unstable on [-1, 1]
    return Network(((Neuron.input(),), (ws(0.0, (0, 0, 1.0)), ws(0.2, (0, 0, 0.5))),
                    (Neuron.activation(R(1, 0)), Neuron.activation(R(1, 1))),
                    (ws(0.0, (2, 0, 1.5), (2, 1, 1.0)),)))


def outputs(net, X):
    return net.compiled.outputs(X)


# -- phase from bounds -------------------------------------------------------


def test_phase_by_bounds_examples():
    net = relu_out()
    b = tighten(net, Box([0.1], [2.0]), 4)
    assert classify_phase_by_bounds(net, b, R(2, 0)) == 1
    b = tighten(net, PM1, 4)
    assert classify_phase_by_bounds(net, b, R(2, 0)) is None
    net = cancellation_net()
    b = tighten(net, PM1, 16)
    assert b[R(1, 1)] == (0.0, 2.0)
    assert classify_phase_by_bounds(net, b, R(2, 1)) == 1


def test_phase_by_bounds_needs_activation():
    net = relu_out()
    with pytest.raises(PreconditionError):
        classify_phase_by_bounds(net, tighten(net, PM1, 1), R(1, 0))


@pytest.mark.parametrize("seed", range(6))
def test_phase_by_bounds_agrees_with_solver(seed):
    rng = np.random.default_rng(300 + seed)
    net = random_network(rng, max_hidden=3, max_width=5, pwl_prob=0.3)
    box = Box.cube(net.input_dim)
    b = tighten(net, box, 16)
    for v in net.activation_refs():
        seg = classify_phase_by_bounds(net, b, v)
        if seg is not None:
            assert all(solve(q, budget=500).unsat for q in build_phase_query(net, v, seg, box))


# -- minimal error line --------------------------------------------------------


def test_minimal_error_line_examples():
    assert minimal_error_line(-1.0, 1.0) == (0.5, 0.25, 0.25)
    assert minimal_error_line(-2.0, 2.0) == (0.5, 0.5, 0.5)
    grid = np.linspace(-2.0, 2.0, 10_001)
    assert np.abs(np.maximum(grid, 0) - (0.5 * grid + 0.5)).max() == pytest.approx(0.5)
    assert minimal_error_line(-1e-9, 3.0)[2] < 1e-9


@pytest.mark.parametrize("lb, ub", [(0.0, 1.0), (-1.0, 0.0), (0.5, 2.0)])
def test_minimal_error_line_needs_unstable_interval(lb, ub):
    with pytest.raises(PreconditionError):
        minimal_error_line(lb, ub)


def test_minimal_error_line_is_optimal_on_perturbation_grid():
    rng = np.random.default_rng(11)
    for _ in range(100):
        lb, ub = -rng.uniform(0.01, 3.0), rng.uniform(0.01, 3.0)
        a, b, e = minimal_error_line(lb, ub)
        assert line_error(Neuron.activation(R(0, 0)).fn, lb, ub, a, b) == pytest.approx(e)
        da = np.linspace(-0.1, 0.1, 101)[:, None]
        db = np.linspace(-0.1, 0.1, 101)[None, :]
        # for ReLU the deviation of any line peaks at lb, 0 or ub
        errs = np.maximum(np.abs((a + da) * lb + b + db), np.abs(b + db))
        errs = np.maximum(errs, np.abs(ub - ((a + da) * ub + b + db)))
        assert errs.min() >= e - 1e-12


def test_best_line_matches_relu_formula():
    relu = Neuron.activation(R(0, 0)).fn
    for lb, ub in [(-1.0, 1.0), (-0.3, 2.0), (-4.0, 0.5)]:
        np.testing.assert_allclose(best_line(relu, lb, ub), minimal_error_line(lb, ub))


def test_best_line_error_is_exact_for_pwl():
    rng = np.random.default_rng(5)
    for _ in range(50):
        fn = random_pwl(rng)
        lb, ub = -rng.uniform(0, 2), rng.uniform(0, 2)
        a, b, e = best_line(fn, lb, ub)
        grid = np.linspace(lb, ub, 20_001)
        assert np.abs(fn(grid) - (a * grid + b)).max() <= e + 1e-12
        assert line_error(fn, lb, ub, a, b) == pytest.approx(e, abs=1e-12)


def test_candidate_lines_relu_zero_first():
    assert candidate_lines(Neuron.activation(R(0, 0)).fn) == [(0.0, 0.0), (1.0, 0.0)]


# -- certification and the ledger ----------------------------------------------


def test_ledger_zero_case_weight_two():
    net = relu_out(2.0)
    b = tighten(net, Box([-1.0], [0.3]), 4)
    led = propagate_error_bounds(net, [Replacement.zero(R(2, 0), 0.3)], b)
    assert led[R(2, 0)] == (0.3, 0.0)
    np.testing.assert_allclose(led.output_lo, [0.6])
    np.testing.assert_allclose(led.output_hi, [0.0])
    assert led.headline == pytest.approx(0.6)


def test_ledger_without_replacements_is_zero():
    net = cancellation_net()
    led = propagate_error_bounds(net, [], tighten(net, PM1, 4))
    assert isinstance(led, ErrorLedger)
    assert not led.err_lo.any() and not led.err_hi.any()


def test_ledger_identity_case():
    net = relu_out(-1.0)
    b = tighten(net, Box([-0.2], [1.0]), 4)
    led = propagate_error_bounds(net, [Replacement.identity(R(2, 0), 0.2)], b)
    assert led[R(2, 0)] == (0.2, 0.0)
    # a negative weight swaps the sides
    np.testing.assert_allclose(led.output_hi, [0.2])
    np.testing.assert_allclose(led.output_lo, [0.0])


def test_certify_rejects_too_small_epsilon():
    net = relu_out()
    b = tighten(net, PM1, 4)
    with pytest.raises(PreconditionError, match="ub"):
        certify(net, b, Replacement.zero(R(2, 0), 0.5))
    with pytest.raises(PreconditionError, match="lb"):
        certify(net, b, Replacement.identity(R(2, 0), 0.5))
    with pytest.raises(PreconditionError, match="exceeds"):
        certify(net, b, Replacement.line(R(2, 0), 0.5, 0.25, 0.2))
    certify(net, b, Replacement.line(R(2, 0), 0.5, 0.25, 0.25))
    with pytest.raises(PreconditionError):
        propagate_error_bounds(net, [Replacement.zero(R(2, 0), 0.5)], b)


def _random_replacements(rng, net, b):
    reps = []
    for rep in relaxed_candidates(net, b):
        if rng.random() < 0.6:
            reps.append(rep)
    for v in net.activation_refs():
        seg = classify_phase_by_bounds(net, b, v)
        if seg is not None and rng.random() < 0.5:
            fn = net[v].fn
            reps.append(Replacement.line(v, fn.slopes[seg], fn.intercepts[seg], 0.0))
    return reps


@pytest.mark.parametrize("seed", range(15))
def test_ledger_soundness_on_samples(seed):
    rng = np.random.default_rng(400 + seed)
    net = random_network(rng, max_hidden=3, max_width=6, pwl_prob=0.3)
    box = Box.cube(net.input_dim)
    b = tighten(net, box, 16)
    reps = _random_replacements(rng, net, b)
    led = propagate_error_bounds(net, reps, b)
    X = box.sample(rng, 10_000)
    Y, Y2 = outputs(net, X), outputs(apply_replacements(net, reps), X)
    assert np.all(Y - led.output_lo - 1e-9 <= Y2)
    assert np.all(Y2 <= Y + led.output_hi + 1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_ledger_is_subadditive(seed):
    rng = np.random.default_rng(500 + seed)
    cands = []
    while len(cands) < 2:
        net = random_network(rng, max_hidden=3, max_width=6, pwl_prob=0.3)
        b = tighten(net, Box.cube(net.input_dim), 8)
        cands = relaxed_candidates(net, b)
    base, extra = cands[:-1], cands[-1]
    both = propagate_error_bounds(net, cands, b)
    alone = propagate_error_bounds(net, base, b)
    single = propagate_error_bounds(net, [extra], b)
    assert np.all(both.err_lo <= alone.err_lo + single.err_lo + 1e-12)
    assert np.all(both.err_hi <= alone.err_hi + single.err_hi + 1e-12)


def test_two_sequential_lines_add_up():
    # ReLU(ReLU(x)) with both replaced: errors add through the identity-like slopes
    net = Network(((Neuron.input(),), (ws(0.0, (0, 0, 1.0)),), (Neuron.activation(R(1, 0)),),
                   (ws(-0.5, (2, 0, 1.0)),), (Neuron.activation(R(3, 0)),), (ws(0.0, (4, 0, 1.0)),)))
    box = Box([-1.0], [2.0])
    b = tighten(net, box, 8)
    reps = relaxed_candidates(net, b)
    assert len(reps) == 2
    led = propagate_error_bounds(net, reps, b)
    r1 = [r for r in reps if r.neuron == R(2, 0)][0]
    r2 = [r for r in reps if r.neuron == R(4, 0)][0]
    assert led.headline <= r2.a * r1.epsilon + r2.epsilon + 1e-12
    X = box.sample(np.random.default_rng(0), 10_000)
    emp = np.abs(outputs(net, X) - outputs(apply_replacements(net, reps), X)).max()
    assert emp <= led.headline + 1e-12


# -- greedy relaxed removal ------------------------------------------------------


def test_greedy_zero_budget_keeps_unstable_relus():
    net = two_relu_net()
    b = tighten(net, PM1, 8)
    out, led, acc = greedy_relaxed_removal(net, b, 0.0)
    assert out is net and acc == [] and led.headline == 0.0


def test_greedy_infinite_budget_collapses_to_affine():
    net = two_relu_net()
    out, led, acc = greedy_relaxed_removal(net, tighten(net, PM1, 8), math.inf)
    assert len(acc) == 2 and to_affine(out) is not None
    assert count_neurons(out)["activation"] == 0


def test_greedy_budget_between_two_bounds_accepts_one():
    net = two_relu_net()
    b = tighten(net, PM1, 8)
    cands = relaxed_candidates(net, b)
    first = propagate_error_bounds(net, cands[:1], b).headline
    both = propagate_error_bounds(net, cands, b).headline
    assert first < both
    out, led, acc = greedy_relaxed_removal(net, b, (first + both) / 2)
    assert acc == cands[:1]
    assert led.headline == pytest.approx(first)
    X = PM1.sample(np.random.default_rng(1), 10_000)
    emp = np.abs(outputs(net, X) - outputs(out, X)).max()
    assert emp <= led.headline + 1e-12


def test_relaxed_candidates_sorted():
    net = two_relu_net()
    cands = relaxed_candidates(net, tighten(net, PM1, 8))
    keys = [(c.epsilon, c.neuron.layer, c.neuron.index) for c in cands]
    assert keys == sorted(keys)


# -- simulation filter -------------------------------------------------------------


def test_simulation_drops_unstable_phase_candidate():
    net = relu_out()
    res = simulate_filter(net, [R(2, 0)], "phase", PM1, samples=1000, seed=0)
    assert res.survivors == []
    lo, hi = res.dropped[R(2, 0)]
    assert lo[0] < 0 < hi[0]


def test_simulation_keeps_stable_phase_candidate():
    net = cancellation_net()
    res = simulate_filter(net, [R(2, 1)], "phase", PM1, samples=1000)
    assert res.survivors == [(R(2, 1), 1)]


def test_simulation_keeps_cancel_forward_candidate():
    res = simulate_filter(cancellation_net(), [(R(2, 0), (0.0, 0.0))], "forward", PM1,
                          samples=100_000, k=2)
    assert res.survivors == [(R(2, 0), (0.0, 0.0))] and res.dropped == {}


def test_simulation_drops_flipping_candidate_with_witness():
    net = label_net(0.5)
    cand = (R(2, 1), (0.0, 0.0))
    res = simulate_filter(net, [cand], "result_preserving", PM1, samples=1000)
    assert res.survivors == []
    x = res.dropped[cand]
    q = build_result_preserving_query(net, R(2, 1), (0.0, 0.0), PM1)
    assert check_goal(q, x)
    orig = evaluate(net, x).output
    zeroed = evaluate(apply_replacements(net, [Replacement.zero(R(2, 1))]), x).output
    assert np.argmax(orig) != np.argmax(zeroed)


@pytest.mark.parametrize("seed", range(5))
def test_simulation_counterexamples_are_real(seed):
    rng = np.random.default_rng(600 + seed)
    net = random_network(rng, max_hidden=3, max_width=5, min_outputs=2)
    box = Box.cube(net.input_dim)
    cands = [(v, line) for v in net.activation_refs() for line in candidate_lines(net[v].fn)]
    fwd = simulate_filter(net, cands, "forward", box, samples=2000, seed=seed)
    for (v, line), x in fwd.dropped.items():
        assert check_goal(build_forward_query(net, v, line, distance_to_output(net, v), box), x)
    rp = simulate_filter(net, cands, "result_preserving", box, samples=2000, seed=seed)
    for (v, line), x in rp.dropped.items():
        assert check_goal(build_result_preserving_query(net, v, line, box), x)
    ph = simulate_filter(net, net.activation_refs(), "phase", box, samples=2000, seed=seed)
    c = net.compiled
    for v, (x1, x2) in ph.dropped.items():
        s = c.forward(np.array([x1, x2]))[:, c.flat(net[v].source)]
        assert net[v].fn.segment_containing(s.min(), s.max()) is None


def test_simulation_is_deterministic():
    net = random_network(np.random.default_rng(3), max_hidden=3, max_width=5, min_outputs=2)
    box = Box.cube(net.input_dim)
    cands = [(v, (0.0, 0.0)) for v in net.activation_refs()]
    a = simulate_filter(net, cands, "result_preserving", box, samples=500, seed=7)
    b = simulate_filter(net, cands, "result_preserving", box, samples=500, seed=7)
    assert a.survivors == b.survivors
    assert a.dropped.keys() == b.dropped.keys()


def test_replacement_json():
    rep = Replacement.line(R(2, 0), 0.5, 0.25, 0.25)
    assert rep.to_json() == {"layer": 2, "index": 0, "mode": "line", "a": 0.5, "b": 0.25,
                             "epsilon": 0.25}
