import numpy as np
import pytest

from ecgipf.filter import Particle
from ecgipf.template import FrontTemplate, reconstruct_batch, reconstruct_tmv, v_template


def test_template_anchor_values():
    assert v_template(0.0, 5.0) == 0.5
    assert v_template(-5.0, 5.0) == 0.0
    assert v_template(5.0, 5.0) == 1.0
    assert v_template(2.5, 5.0) == pytest.approx(27 / 32)


def test_template_saturates():
    np.testing.assert_array_equal(v_template(np.array([-100.0, -5.01, 5.01, 100.0]), 5.0), [0, 0, 1, 1])


@pytest.mark.parametrize("w", [0.0, -1.0])
def test_template_rejects_width(w):
    with pytest.raises(ValueError):
        v_template(0.0, w)
    with pytest.raises(ValueError):
        FrontTemplate(w)


def test_template_callable():
    assert FrontTemplate(5.0)(2.5) == v_template(2.5, 5.0)


def test_center_value(table2):
    f = reconstruct_tmv(Particle(np.array([3]), np.array([10.0])), table2, FrontTemplate(5.0))
    assert f.values[3] == 1.0


def test_front_midpoint(table2):
    c, x = 3, 40
    r = table2.rows(c)[x]
    f = reconstruct_tmv(Particle(np.array([c]), np.array([r])), table2, FrontTemplate(5.0))
    assert f.values[x] == pytest.approx(0.5)


def test_null_radius_center_has_no_effect(table2):
    tpl = FrontTemplate(5.0)
    one = reconstruct_tmv(Particle(np.array([3]), np.array([20.0])), table2, tpl).values
    two = reconstruct_tmv(Particle(np.array([3, 100]), np.array([20.0, 0.0])), table2, tpl).values
    far = table2.rows(100) > 5.0
    np.testing.assert_array_equal(one[far], two[far])


def test_out_of_range_center(table2):
    with pytest.raises(IndexError):
        reconstruct_batch(np.array([[table2.n_vertices]]), np.array([[1.0]]), table2, 5.0)


def test_batch_matches_single(table2):
    rng = np.random.default_rng(0)
    c = rng.integers(0, table2.n_vertices, (7, 3))
    r = rng.uniform(0, 60, (7, 3))
    batch = reconstruct_batch(c, r, table2, 5.0)
    for i in range(7):
        single = np.max(v_template(r[i][:, None] - table2.rows(c[i]), 5.0), axis=0)
        np.testing.assert_allclose(batch[i], single)
