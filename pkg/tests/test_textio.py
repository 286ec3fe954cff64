import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brute import random_mdp, random_policy
from drlope.errors import ParseError
from drlope.mdp import TabularMdp
from drlope.textio import (
    dumps_mdp,
    dumps_nuisance,
    dumps_policies,
    load_mdp,
    loads_mdp,
    loads_nuisance,
    loads_policies,
    save_mdp,
)


@given(seed=st.integers(0, 5000), two_point=st.booleans())
@settings(max_examples=30, deadline=None)
def test_mdp_round_trip_is_bit_exact(seed, two_point):
    mdp = random_mdp(seed, noise="two_point" if two_point else "gaussian")
    back = loads_mdp(dumps_mdp(mdp))
    for name in ("transition", "reward_mean", "reward_var"):
        np.testing.assert_array_equal(getattr(back, name), getattr(mdp, name))
    assert (back.gamma, back.r_max, back.reward_noise) == (mdp.gamma, mdp.r_max, mdp.reward_noise)


def test_policies_round_trip():
    pe, pb = random_policy(1, 3, 2), random_policy(2, 3, 2)
    e2, b2 = loads_policies(dumps_policies(pe, pb))
    np.testing.assert_array_equal(e2.action_probs, pe.action_probs)
    np.testing.assert_array_equal(b2.initial_dist, pb.initial_dist)


def test_nuisance_round_trip():
    w = np.array([0.1, 2.5])
    q = np.array([[1.0, 2.0], [3.0, 4.0]])
    prov, w2, q2, fold = loads_nuisance(dumps_nuisance("Fitted", w, q, fold_id=1))
    assert prov == "Fitted" and fold == 1
    np.testing.assert_array_equal(w2, w)
    np.testing.assert_array_equal(q2, q)


def test_comments_and_blank_lines_ignored():
    text = dumps_mdp(random_mdp(1, S=2, A=1))
    lines = text.splitlines()
    noisy = "\n".join([lines[0], "# a comment", ""] + lines[1:])
    loads_mdp(noisy)


def test_bad_number_reports_line_and_column():
    text = dumps_mdp(random_mdp(1, S=2, A=1)).splitlines()
    idx = next(i for i, line in enumerate(text) if line.startswith("matrix reward_mean"))
    text[idx + 1] = "abc"
    with pytest.raises(ParseError) as err:
        loads_mdp("\n".join(text))
    assert err.value.line == idx + 2
    assert err.value.column == 1
    assert "abc" in str(err.value)


@pytest.mark.parametrize("text,fragment", [
    ("", "empty"),
    ("hello 1\n", "header"),
    ("drlope-matrix 9\nkind mdp\nend\n", "version"),
    ("drlope-matrix 1\nkind mdp\n", "missing 'end'"),
    ("drlope-matrix 1\nkind mdp\nmatrix x 1 2\n1.0\nend\n", "values, expected"),
])
def test_malformed_documents(text, fragment):
    with pytest.raises(ParseError, match=fragment):
        loads_mdp(text)


def test_invalid_mdp_content_is_parse_error():
    text = dumps_mdp(random_mdp(1, S=2, A=1)).replace("gamma 0.", "gamma 1")
    with pytest.raises(ParseError):
        loads_mdp(text)


def test_save_is_atomic_and_loadable(tmp_path):
    mdp = random_mdp(4)
    path = tmp_path / "m.txt"
    save_mdp(path, mdp)
    assert [p.name for p in tmp_path.iterdir()] == ["m.txt"]
    np.testing.assert_array_equal(load_mdp(path).transition, mdp.transition)


def test_bad_header_value_has_position():
    mdp = TabularMdp(np.ones((1, 1, 1)), np.zeros((1, 1)), np.zeros((1, 1)), 0.9, 1.0)
    lines = dumps_mdp(mdp).splitlines()
    k = next(i for i, line in enumerate(lines) if line.startswith("gamma"))
    lines[k] = "gamma   x"
    with pytest.raises(ParseError) as err:
        loads_mdp("\n".join(lines))
    assert (err.value.line, err.value.column) == (k + 1, 9)
