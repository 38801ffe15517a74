import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from riskgrid import explain as E
from riskgrid.exceptions import ConfigurationError, ExplanationError

from oracles import hybrid_value, interaction_index, shapley_by_permutations


def linear(w, b=0.0):
    w = np.asarray(w, float)
    return lambda X: X @ w + b


def wiggly(X):
    X = np.atleast_2d(X)
    return (np.sin(X[:, 0] * X[:, 1]) + X[:, 2] ** 2 * X[:, 3]
            + np.maximum(X[:, 4] - X[:, 1], 0) + 0.3 * X[:, 0])


def test_additive_model_worked_example():
    vf = E.ValueFunction(linear([1.0, 2.0]), [0.0, 0.0])
    exp = E.shapley_exact(vf, [1.0, 1.0])
    np.testing.assert_allclose(exp[0].phi, [1.0, 2.0], atol=1e-12)
    assert exp[0].base_value == 0.0 and exp[0].prediction == 3.0


def test_enumeration_matches_permutation_oracle():
    rng = np.random.default_rng(0)
    for _ in range(5):
        x, base = rng.normal(size=5), rng.normal(size=5)
        phi, b, pred = E.exact_phi(E.ValueFunction(wiggly, base), x)
        want = shapley_by_permutations(hybrid_value(wiggly, x, base), 5)
        np.testing.assert_allclose(phi[0], want, atol=1e-12)


def test_axioms_on_random_models():
    rng = np.random.default_rng(1)
    x, base = rng.normal(size=6), rng.normal(size=6)
    wig6 = lambda X: wiggly(X) + 0.5 * X[:, 5]  # noqa: E731
    phi, b, pred = E.exact_phi(E.ValueFunction(wig6, base), x)
    # efficiency
    assert abs(pred[0] - b[0] - phi[0].sum()) <= 1e-9

    # symmetry: features 0 and 1 enter symmetrically
    sym = lambda X: X[:, 0] * X[:, 1] + X[:, 2]  # noqa: E731
    x2 = np.array([1.5, 1.5, 0.3])
    phi2, _, _ = E.exact_phi(E.ValueFunction(sym, [0.2, 0.2, 0.0]), x2)
    assert phi2[0, 0] == pytest.approx(phi2[0, 1], abs=1e-12)

    # dummy: sample equals baseline in feature 3
    x3 = x.copy()
    x3[3] = base[3]
    phi3, _, _ = E.exact_phi(E.ValueFunction(wig6, base), x3)
    assert phi3[0, 3] == 0.0

    # linearity
    g = linear(rng.normal(size=6))
    combo = lambda X: 2.0 * wig6(X) - 3.0 * g(X)  # noqa: E731
    pa = E.exact_phi(E.ValueFunction(wig6, base), x)[0]
    pb = E.exact_phi(E.ValueFunction(g, base), x)[0]
    pc = E.exact_phi(E.ValueFunction(combo, base), x)[0]
    np.testing.assert_allclose(pc, 2 * pa - 3 * pb, atol=1e-12)


def test_linear_model_recovers_weights_times_offset():
    w = np.array([0.5, -1.0, 2.0, 0.0])
    x, base = np.array([1.0, 2.0, -1.0, 5.0]), np.array([0.5, 0.5, 0.5, 0.5])
    phi = E.exact_phi(E.ValueFunction(linear(w, 3.0), base), x)[0][0]
    np.testing.assert_allclose(phi, w * (x - base), atol=1e-12)


def test_multi_output_and_target_selection():
    model = lambda X: np.column_stack([X[:, 0], X[:, 1] * 2])  # noqa: E731
    vf = E.ValueFunction(model, [0, 0], target_names=["a", "b"])
    exps = E.shapley_exact(vf, [1.0, 1.0])
    assert [e.target for e in exps] == ["a", "b"]
    one = E.shapley_exact(E.ValueFunction(model, [0, 0], 1, ["a", "b"]), [1, 1])
    assert one.target == "b"
    np.testing.assert_allclose(one.phi, [0.0, 2.0])


def test_exact_limit():
    vf = E.ValueFunction(linear(np.ones(13)), np.zeros(13))
    with pytest.raises(ExplanationError):
        E.exact_phi(vf, np.ones(13))


def test_sampled_is_exact_for_additive_models():
    w = np.arange(1.0, 9.0)
    vf = E.ValueFunction(linear(w), np.zeros(8))
    phi = E.sampled_phi(vf, np.ones(8), 4, seed=0)[0][0]
    np.testing.assert_allclose(phi, w, atol=1e-12)


def test_sampled_satisfies_efficiency_and_needs_even_count():
    rng = np.random.default_rng(2)
    x, base = rng.normal(size=5), rng.normal(size=5)
    vf = E.ValueFunction(wiggly, base)
    phi, b, pred = E.sampled_phi(vf, x, 10, seed=1)
    assert abs(pred[0] - b[0] - phi[0].sum()) <= 1e-9
    with pytest.raises(ConfigurationError):
        E.sampled_phi(vf, x, 3)


def test_explain_rows_independent_of_threads(monkeypatch):
    rng = np.random.default_rng(3)
    X = rng.normal(size=(6, 14))
    model = lambda Z: np.sin(Z).sum(axis=1) + Z[:, 0] * Z[:, 1]  # noqa: E731
    vf = E.ValueFunction(model, np.zeros(14))
    monkeypatch.setenv("RISKGRID_THREADS", "1")
    a = E.explain_rows(vf, X, n_permutations=8, seed=5)
    monkeypatch.setenv("RISKGRID_THREADS", "3")
    b = E.explain_rows(vf, X, n_permutations=8, seed=5)
    np.testing.assert_array_equal(a, b)


def test_interactions_match_oracle():
    rng = np.random.default_rng(4)
    x, base = rng.normal(size=5), rng.normal(size=5)
    vf = E.ValueFunction(wiggly, base)
    got = E.exact_interactions(vf, x)[0]
    v = hybrid_value(wiggly, x, base)
    for i in range(5):
        assert got[i, i] == 0.0
        for j in range(i + 1, 5):
            assert got[i, j] == pytest.approx(interaction_index(v, 5, i, j),
                                              abs=1e-12)
            assert got[j, i] == got[i, j]


def test_sampled_interactions_converge():
    rng = np.random.default_rng(5)
    x, base = rng.normal(size=5), rng.normal(size=5)
    vf = E.ValueFunction(wiggly, base)
    exact = E.exact_interactions(vf, x)[0]
    approx = E.sampled_interactions(vf, x, n_draws=4000, seed=0)[0]
    assert np.abs(approx - exact).max() < 0.05 * np.abs(exact).max()


def test_pure_product_interaction():
    # f = x0 * x1 with zero baseline: the pair gets the whole product
    model = lambda X: X[:, 0] * X[:, 1]  # noqa: E731
    vf = E.ValueFunction(model, np.zeros(3))
    I = E.exact_interactions(vf, np.array([2.0, 3.0, 1.0]))[0]
    assert I[0, 1] == pytest.approx(6.0)
    assert I[0, 2] == 0.0 and I[1, 2] == 0.0


def test_interaction_screen_and_matrix():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(40, 6))
    model = lambda Z: Z[:, 1] * Z[:, 4] + 0.1 * Z[:, 2] * Z[:, 3] + Z[:, 0]  # noqa: E731
    top = E.interaction_screen(model, X, np.zeros(6), 2, n_samples=20)
    assert top == [(1, 4), (2, 3)]
    mat = E.interaction_matrix(model, X, np.zeros(6), n_samples=20,
                               method="sampled", n_draws=8)
    assert mat.top(1) == [(1, 4)]
    with pytest.raises(ConfigurationError):
        mat.top(16)
    with pytest.raises(ConfigurationError):
        E.interaction_screen(model, X, np.zeros(6), 0)


def test_importance_ranks_by_mean_abs_phi():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(50, 4))
    imp = E.importance(linear([0.1, -3.0, 1.0, 0.0]), X, np.zeros(4),
                       n_samples=30, feature_names=list("abcd"))
    assert [n for n, _ in imp.ranking()] == ["b", "c", "a", "d"]
    assert imp.to_csv().splitlines()[1].startswith("b,")


def test_dependence_triples():
    phi = np.array([[0.1, 0.2], [0.3, 0.4]])
    X = np.array([[1.0, 2.0], [3.0, 4.0]])
    t = E.dependence_triples(phi, X, 0, 1)
    np.testing.assert_array_equal(t, [[1.0, 0.1, 2.0], [3.0, 0.3, 4.0]])
    csv_text = E.dependence_csv(t, "LSBP", "TC")
    assert csv_text.splitlines()[0] == "LSBP,phi_LSBP,TC"


def _example_explanation():
    phi = np.array([0.5, -0.2, 0.0, 1.5, -0.9, 0.05, 0.3, -0.01])
    names = [f"f{i}" for i in range(8)]
    return E.Explanation(3, "high", 0.1, phi, 0.1 + phi.sum(),
                         np.arange(8.0), names)


def test_explanation_json_shape():
    d = json.loads(json.dumps(_example_explanation().to_dict()))
    assert set(d) == {"sample_id", "target", "base_value", "prediction", "phi"}
    assert set(d["phi"][0]) == {"feature", "value", "phi"}
    assert len(d["phi"]) == 8


def test_force_data_and_svg():
    fd = E.force_data(_example_explanation())
    assert [f.feature for f in fd.forces][:3] == ["f3", "f4", "f0"]
    assert "f2" not in [f.feature for f in fd.forces]
    svg = fd.to_svg()
    root = ET.fromstring(svg.split("?>", 1)[1])
    assert root.get("version") == "1.1"
    ns = "{http://www.w3.org/2000/svg}"
    fills = [r.get("fill") for r in root.iter(ns + "rect")]
    assert fills.count(E.RED) == 4 and fills.count(E.BLUE) == 3
    labels = [t.text for t in root.iter(ns + "text") if t.text in
              {f"f{i}" for i in range(8)}]
    assert sorted(labels) == sorted(["f3", "f4", "f0", "f6", "f1", "f5"])
    assert "f7" not in labels


def test_transition_tendency_examples():
    assert E.transition_tendency([0, 0, 3.6051, 0]) == (2, 0, False)
    top, second, flagged = E.transition_tendency([0, 0, 0.40, 0.21])
    assert (top, second, flagged) == (2, 3, True)
    assert not E.transition_tendency([0, 0, 0.40, 0.21], threshold=0.6)[2]
