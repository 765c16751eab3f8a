import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nnshrink.net import (AffineMap, InputError, Network, Neuron, NeuronRef, ParseError,
                          PiecewiseLinearFn, PreconditionError, RELU, dense_network,
                          eliminate_ws_neuron, evaluate, evaluate_batch, network_to_dict,
                          parse_network, replace_activation, saturate_ws_elimination,
                          serialize_network, to_affine, validate)
from nnshrink.zoo import cancellation_net, label_net

from netgen import random_network

R = NeuronRef


def ws(bias, *terms):
    return Neuron.weighted_sum(bias, [(R(l, i), c) for l, i, c in terms])


# -- evaluation -----------------------------------------------------------


def test_cancel_output_at_one_is_twelve():
    assert evaluate(cancellation_net(), [1.0]).output.tolist() == [12.0]


def test_label_outputs_at_half():
    np.testing.assert_allclose(evaluate(label_net(), [0.5]).output, [1.3, 0.3], atol=1e-12)


def test_relu_at_zero_is_zero():
    net = Network(((Neuron.input(),), (Neuron.activation(R(0, 0)),), (ws(0.0, (1, 0, 1.0)),)))
    assert evaluate(net, [0.0]).output[0] == 0.0


def test_dimension_mismatch_is_input_error():
    with pytest.raises(InputError):
        evaluate(cancellation_net(), [1.0, 2.0])


def test_evaluation_is_bitwise_deterministic():
    net = random_network(np.random.default_rng(5))
    x = np.full(net.input_dim, 0.37)
    a, b = evaluate(net, x), evaluate(net, x)
    assert all(np.array_equal(u, v) for u, v in zip(a.values, b.values))


def test_trace_matches_neuron_definitions():
    net = random_network(np.random.default_rng(11), pwl_prob=0.5)
    x = np.random.default_rng(0).uniform(-1, 1, net.input_dim)
    tr = evaluate(net, x)
    for r in net.refs():
        n = net[r]
        if n.kind == "weighted_sum":
            expect = n.bias + sum(c * tr[s] for s, c in n.terms)
            assert tr[r] == pytest.approx(expect, abs=1e-12)
        elif n.kind == "activation":
            assert tr[r] == pytest.approx(float(n.fn(np.array(tr[n.source]))), abs=1e-12)


# -- piecewise-linear functions ---------------------------------------------


def three_piece():
    # -1 below -1, identity in [-1, 1], 1 above
    return PiecewiseLinearFn((-math.inf, -1.0, 1.0, math.inf), (0.0, 1.0, 0.0), (-1.0, 0.0, 1.0))


def test_breakpoint_belongs_to_right_segment():
    f = three_piece()
    assert f.segment_of(-1.0) == 1
    assert f.segment_of(1.0) == 2
    assert f.segment_of(0.999) == 1


def test_last_segment_is_closed_for_finite_end():
    f = PiecewiseLinearFn((0.0, 1.0, 2.0), (1.0, -1.0), (0.0, 2.0))
    assert f.segment_of(2.0) == 1
    assert float(f(np.array(2.0))) == 0.0
    # the end pieces extend beyond finite outer breakpoints
    assert float(f(np.array(3.0))) == -1.0
    assert float(f(np.array(-1.0))) == -1.0


def test_discontinuous_fn_reported():
    f = PiecewiseLinearFn((-math.inf, 0.0, math.inf), (0.0, 1.0), (0.0, 0.5))
    assert any("discontinuous" in v for v in f.violations())


@given(st.floats(-50, 50, allow_nan=False))
def test_relu_fn_matches_maximum(x):
    assert float(RELU(np.array(x))) == max(x, 0.0)


# -- validation -----------------------------------------------------------


def test_cancel_is_valid():
    assert validate(cancellation_net()) == []


def test_forward_reference_reported():
    net = Network(((Neuron.input(),), (ws(0.0, (2, 0, 1.0)),), (ws(0.0, (1, 0, 1.0)),)))
    problems = validate(net)
    assert len(problems) == 1 and "forward reference" in problems[0]


def test_unsorted_breakpoints_reported():
    bad = PiecewiseLinearFn((-math.inf, 1.0, 0.0, math.inf), (0.0, 1.0, 0.0), (0.0, 0.0, 0.0))
    net = Network(((Neuron.input(),), (ws(0.0, (0, 0, 1.0)),),
                   (Neuron.activation(R(1, 0), bad),), (ws(0.0, (2, 0, 1.0)),)))
    problems = validate(net)
    assert len(problems) == 1 and "breakpoints not sorted" in problems[0]


def test_output_layer_must_be_weighted_sum():
    net = Network(((Neuron.input(),), (ws(0.0, (0, 0, 1.0)),), (Neuron.activation(R(1, 0)),)))
    assert any("output" in p for p in validate(net))


# -- surgery ----------------------------------------------------------------


def test_eliminate_substitutes_bias_and_terms():
    # u = 1 + 2v + 3y with v = 0.5 + 4x  ->  u = 2 + 8x + 3y
    net = Network((
        (Neuron.input(), Neuron.input()),
        (ws(0.5, (0, 0, 4.0)), ws(0.0, (0, 1, 1.0))),
        (ws(1.0, (1, 0, 2.0), (0, 1, 3.0)),),
    ))
    out = eliminate_ws_neuron(net, R(1, 0))
    u = out.layers[-1][0]
    assert u.bias == pytest.approx(2.0)
    assert sorted((s.layer, s.index, c) for s, c in u.terms) == [(0, 0, 8.0), (0, 1, 3.0)]


def test_eliminate_merges_duplicate_terms():
    net = Network((
        (Neuron.input(),),
        (ws(0.0, (0, 0, 2.0)),),
        (ws(0.0, (1, 0, 1.0), (0, 0, 1.0)),),
    ))
    out = eliminate_ws_neuron(net, R(1, 0))
    assert out.layers[-1][0].terms == ((R(0, 0), 3.0),)


def test_eliminate_unconsumed_neuron_keeps_outputs():
    rng = np.random.default_rng(0)
    net = Network((
        (Neuron.input(), Neuron.input()),
        (ws(0.3, (0, 0, 1.0)), ws(1.0, (0, 1, -2.0))),
        (Neuron.activation(R(1, 0)),),
        (ws(0.0, (2, 0, 1.5)),),
    ))
    out = eliminate_ws_neuron(net, R(1, 1))
    X = rng.uniform(-1, 1, (100, 2))
    np.testing.assert_allclose(evaluate_batch(out, X), evaluate_batch(net, X))
    assert validate(out) == []


def test_eliminate_rejects_activation_consumer():
    with pytest.raises(PreconditionError):
        eliminate_ws_neuron(cancellation_net(), R(1, 0))


def test_eliminate_rejects_output_layer():
    net = cancellation_net()
    with pytest.raises(PreconditionError):
        eliminate_ws_neuron(net, R(len(net.layers) - 1, 0))


def test_cancel_zeroed_y_still_outputs_twelve():
    net = replace_activation(cancellation_net(), R(2, 0), (0.0, 0.0))
    net = saturate_ws_elimination(net)
    assert evaluate(net, [1.0]).output[0] == pytest.approx(12.0)
    assert validate(net) == []


def test_label_zeroed_y_outputs():
    net = replace_activation(label_net(), R(2, 1), (0.0, 0.0))
    np.testing.assert_allclose(evaluate(net, [0.5]).output, [1.0, 0.6], atol=1e-12)


def test_replace_activation_identity_on_active_source():
    net = Network(((Neuron.input(),), (ws(2.0, (0, 0, 1.0)),), (Neuron.activation(R(1, 0)),),
                   (ws(0.0, (2, 0, 3.0)),)))
    out = replace_activation(net, R(2, 0), (1.0, 0.0))
    X = np.linspace(-1, 1, 201)[:, None]
    np.testing.assert_array_equal(evaluate_batch(out, X), evaluate_batch(net, X))


def test_replace_activation_line_max_deviation_grid():
    net = Network(((Neuron.input(),), (ws(0.0, (0, 0, 1.0)),), (Neuron.activation(R(1, 0)),),
                   (ws(0.0, (2, 0, 1.0)),)))
    out = replace_activation(net, R(2, 0), (0.5, 0.25))
    X = np.linspace(-1, 1, 10_001)[:, None]
    dev = np.abs(evaluate_batch(out, X) - evaluate_batch(net, X)).max()
    assert dev == pytest.approx(0.25, abs=1e-12)


def test_replace_non_activation_rejected():
    with pytest.raises(PreconditionError):
        replace_activation(cancellation_net(), R(1, 0), (1.0, 0.0))


def test_saturate_two_ws_layers_is_affine():
    net = Network(((Neuron.input(), Neuron.input()),
                   (ws(1.0, (0, 0, 2.0)), ws(0.0, (0, 0, 1.0), (0, 1, 1.0))),
                   (ws(-1.0, (1, 0, 1.0), (1, 1, 3.0)),)))
    out = saturate_ws_elimination(net)
    assert len(out.layers) == 2
    A = to_affine(net)
    np.testing.assert_allclose(A.matrix, [[5.0, 3.0]])
    np.testing.assert_allclose(A.offset, [0.0])


def test_saturate_leaves_cancel_unchanged():
    net = cancellation_net()
    assert saturate_ws_elimination(net) == net


def test_all_relus_linearized_collapses_cancel():
    net = cancellation_net()
    for r in net.activation_refs():
        net = replace_activation(net, r, (1.0, 0.0))
    A = to_affine(net)
    X = np.random.default_rng(1).uniform(-1, 1, (1000, 1))
    np.testing.assert_allclose(A(X), evaluate_batch(net, X), rtol=1e-6, atol=1e-9)


def test_to_affine_none_with_live_relu():
    assert to_affine(label_net()) is None


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_surgery_preserves_function_and_validity(seed):
    rng = np.random.default_rng(seed)
    net = random_network(rng)
    acts = net.activation_refs()
    for r in rng.permutation(len(acts))[: len(acts) // 2]:
        net2 = replace_activation(net, acts[r], (1.0, 0.0))
        net = net2
    # now compare saturated vs. unsaturated versions of the same function
    out = saturate_ws_elimination(net)
    assert validate(out) == []
    X = rng.uniform(-1, 1, (200, net.input_dim))
    y, z = evaluate_batch(net, X), evaluate_batch(out, X)
    assert np.all(np.abs(y - z) <= 1e-6 * (1 + np.abs(y)))


# -- JSON ---------------------------------------------------------------------


def test_roundtrip_cancel():
    net = cancellation_net()
    assert parse_network(serialize_network(net)) == net


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_roundtrip_random(seed):
    net = random_network(np.random.default_rng(seed), pwl_prob=0.4)
    assert parse_network(serialize_network(net)) == net


def test_roundtrip_mixed_layer():
    net = replace_activation(cancellation_net(), R(2, 0), (0.0, 0.0))
    doc = network_to_dict(net)
    assert doc["layers"][2]["kind"] == "mixed"
    assert parse_network(json.dumps(doc)) == net


def test_relu_shorthand_and_inf_strings():
    doc = network_to_dict(label_net())
    act = doc["layers"][2]["neurons"][0]
    assert act["fn"] == "relu"
    act["fn"] = {"breakpoints": ["-inf", 0, "inf"], "slopes": [0, 1], "intercepts": [0, 0]}
    assert parse_network(json.dumps(doc))[R(2, 0)].fn == RELU


def test_missing_layers_key():
    with pytest.raises(ParseError) as err:
        parse_network('{"name": "x"}')
    assert err.value.path == "$.layers"


def test_string_coefficient_names_term():
    doc = network_to_dict(label_net())
    doc["layers"][1]["neurons"][0]["terms"][0]["coeff"] = "2"
    with pytest.raises(ParseError) as err:
        parse_network(json.dumps(doc))
    assert err.value.path == "$.layers[1].neurons[0].terms[0].coeff"


def test_dense_network_matches_numpy():
    rng = np.random.default_rng(2)
    W1, b1, W2, b2 = rng.normal(size=(4, 3)), rng.normal(size=4), rng.normal(size=(2, 4)), rng.normal(size=2)
    net = dense_network([W1, W2], [b1, b2])
    X = rng.normal(size=(50, 3))
    np.testing.assert_allclose(evaluate_batch(net, X), np.maximum(X @ W1.T + b1, 0) @ W2.T + b2)


def test_affine_map_json_roundtrip():
    A = AffineMap(np.array([[1.0, 2.0]]), np.array([3.0]))
    B = AffineMap.from_json(json.loads(json.dumps(A.to_json())))
    np.testing.assert_array_equal(B.matrix, A.matrix)
    np.testing.assert_array_equal(B.offset, A.offset)
