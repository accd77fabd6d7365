import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ieces.dataset import gen_synthetic
from ieces.encoder import EncoderConfig
from ieces.siamese import contrastive_loss, encode_templates
from ieces.theory import (M_GRID, SEP_GRID, boundary_grid, boundary_gradient_check, boundary_minimizer,
                          constraint1_feasibility, convexity_probe, midpoint_gap, restricted_loss,
                          separation_margin, surface, surface_fd_error, theory_suite)
from ieces.trainer import build_model


def test_surface_hand_example():
    pt = surface(1.0, 2.0, 6.25)
    assert pt.value == pytest.approx(1.0 + 2.25)
    assert pt.grad == (2.0, -4.0)


def test_surface_agrees_with_pair_losses():
    for ds, dd in [(0.3, 1.0), (2.0, 3.0), (0.0, 2.5)]:
        assert surface(ds, dd, 6.25).value == pytest.approx(
            contrastive_loss(ds, 0, 6.25) + contrastive_loss(dd, 1, 6.25))


def test_hinge_kink_uses_inactive_branch():
    assert surface(1.0, 2.5, 6.25).grad[1] == 0.0
    with pytest.raises(ValueError):
        surface(-1.0, 0.0, 1.0)


def test_surface_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    pts = [(float(a), float(b)) for a, b in rng.uniform(0.05, 5, size=(100, 2)) if abs(b * b - 6.25) > 1e-2]
    assert surface_fd_error(6.25, pts) <= 1e-8


def test_boundary_grid_on_boundary_and_excludes_origin():
    pts = boundary_grid(6.25, 0.5, 50)
    assert np.all(pts[:, 1] - pts[:, 0] == pytest.approx(0.5))
    assert pts[:, 0].min() > 0 and pts[-1, 0] == pytest.approx(7.5)


def test_boundary_dot_hand_values():
    check = boundary_gradient_check(6.25, 1.0, 3)
    assert check.passed
    # D_same=2.5, D_diff=3.5 lies past the hinge: dot = 2*D_same
    far = boundary_gradient_check(6.25, 3.0, 1)
    assert far.worst == pytest.approx(2 * 7.5)


@pytest.mark.parametrize("m", M_GRID)
@pytest.mark.parametrize("m_sep", SEP_GRID)
def test_boundary_gradient_check_passes_on_grid(m, m_sep):
    res = boundary_gradient_check(m, m_sep, 100)
    assert res.passed and res.worst > 0 and res.points == 100


def test_boundary_check_rejects_empty_range():
    with pytest.raises(ValueError):
        boundary_gradient_check(6.25, 0.0)
    with pytest.raises(ValueError):
        boundary_minimizer(0.0, 0.5)


def test_minimizer_closed_form_example():
    res = boundary_minimizer(6.25, 0.5)
    assert res.closed_form == 2.0
    assert abs(res.d_star - 2.0) <= 1e-6


@pytest.mark.parametrize("m", M_GRID)
@pytest.mark.parametrize("m_sep", SEP_GRID)
def test_minimizer_matches_closed_form(m, m_sep):
    res = boundary_minimizer(m, m_sep)
    if m > m_sep ** 2:
        assert abs(res.d_star - (math.sqrt(m) - m_sep)) <= 1e-6
    else:
        assert res.closed_form is None and res.d_star == 0.0


def test_minimizer_when_separation_exceeds_margin():
    res = boundary_minimizer(1.0, 1.5)
    assert res.d_star == 0.0 and res.value == 0.0


@given(st.floats(0.5, 30), st.floats(0.05, 2))
@settings(max_examples=40, deadline=None)
def test_minimizer_beats_random_feasible_points(m, m_sep):
    res = boundary_minimizer(m, m_sep)
    rng = np.random.default_rng(0)
    probes = rng.uniform(0, 3 * math.sqrt(m) + m_sep, size=200)
    assert all(res.value <= restricted_loss(float(d), m, m_sep) + 1e-9 for d in probes)


def test_convexity_witness_by_hand():
    mid, avg = midpoint_gap((0.0, 0.0), (0.0, 2.5), 6.25, "diff")
    assert mid == pytest.approx(4.6875) and avg == pytest.approx(3.125)
    assert mid > avg


def test_same_term_is_convex():
    assert convexity_probe(6.25, 3000, 0, "same").violation_fraction == 0.0


def test_full_loss_violates_convexity_with_witnesses():
    probe = convexity_probe(6.25, 3000, 0, "full")
    assert probe.violation_fraction > 0
    assert 1 <= len(probe.witnesses) <= 10
    for p, q, mid, avg in probe.witnesses:
        again_mid, again_avg = midpoint_gap(p, q, 6.25)
        assert again_mid == mid and again_mid > again_avg


def test_probe_deterministic_and_validated():
    assert convexity_probe(6.25, 500, 3) == convexity_probe(6.25, 500, 3)
    with pytest.raises(ValueError):
        convexity_probe(0.0)
    with pytest.raises(ValueError):
        midpoint_gap((0, 0), (1, 1), 1.0, "both")


def test_separation_margin_on_constructed_codes():
    tpl = np.array([[0.0, 0.0], [10.0, 0.0]])
    codes = np.array([[1.0, 0.0], [9.0, 0.0], [0.0, 2.0]])
    feas = separation_margin(codes, [0, 1, 0], tpl)
    assert feas.max_same == pytest.approx(2.0)
    assert feas.min_diff == pytest.approx(9.0)
    assert feas.m_sep == pytest.approx(7.0) and feas.feasible


def test_single_class_sample_is_undefined():
    feas = separation_margin(np.zeros((3, 2)), [1, 1, 1], np.ones((2, 2)))
    assert feas.m_sep is None and not feas.feasible


def test_untrained_model_reports_without_failing():
    split, tpl = gen_synthetic(3, 10, seed=0)
    tiny = EncoderConfig(stem_widths=(2, 2), inception_widths=(1, 1, 1, 1), head_widths=(2, 2), code_length=8)
    model = build_model(3, tiny, seed=0)
    feas = constraint1_feasibility(model.encoder, encode_templates(model.encoder, tpl), split.test)
    assert feas.m_sep is not None and math.isfinite(feas.m_sep)


def test_suite_passes_quickly():
    start = time.perf_counter()
    outcomes = theory_suite(100, 0)
    assert time.perf_counter() - start <= 10.0
    hard = [o for o in outcomes if not o.informational]
    assert all(o.passed for o in hard), [o for o in hard if not o.passed]
    info = [o for o in outcomes if o.informational]
    assert len(info) == 1 and info[0].passed
