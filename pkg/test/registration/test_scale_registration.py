"""
Tests for src/registration.py robust scale estimation and correspondence selection.
"""

import os
import sys

import numpy as np
import pytest

from src.geometry import ConfidenceMap, PointMap, RigidPose
from src.models import FramePrediction, WindowPrediction, WindowSpec
from src.registration import (
    CorrespondenceSet,
    EmptyCorrespondenceError,
    EstimationError,
    IrlsConfig,
    estimate_scale_closed_form,
    estimate_scale_irls,
    huber,
    irls_scale,
    select_correspondences,
    weighted_median,
)

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))


def _cloud(rng, n=200):
    return rng.normal(size=(n, 3)) + np.array([0.0, 0.0, 5.0])


def _perpendicular(rng, p, magnitude):
    """Vectors of the given magnitude orthogonal to each row of p."""
    raw = rng.normal(size=p.shape)
    unit_p = p / np.linalg.norm(p, axis=1, keepdims=True)
    raw -= np.sum(raw * unit_p, axis=1, keepdims=True) * unit_p
    return magnitude * raw / np.linalg.norm(raw, axis=1, keepdims=True)


def test_huber_loss_branches():
    """
    Test quadratic and linear branches of the Huber loss.
    """
    values = huber(np.array([0.5, -0.5, 3.0]), 1.0)
    assert np.allclose(values, [0.125, 0.125, 2.5])


def test_irls_recovers_exact_scale(rng):
    """
    Test q = λp gives λ.
    """
    p = _cloud(rng)
    result = irls_scale(p, 1.75 * p)
    assert result.scale == pytest.approx(1.75, rel=1e-12)
    assert result.converged


def test_irls_scalar_inputs():
    """
    Test 1-D inputs are treated as scalar pairs.
    """
    assert irls_scale([1.0, 2.0, 4.0], [0.5, 1.0, 2.0]).scale == pytest.approx(0.5)


def test_irls_scale_equivariance(rng):
    """
    Test multiplying every target by λ multiplies the estimate by λ.
    """
    p = _cloud(rng)
    q = 1.3 * p + rng.normal(scale=0.2, size=p.shape)
    base = irls_scale(p, q).scale
    for factor in (0.25, 3.0, 40.0):
        assert irls_scale(p, factor * q).scale == pytest.approx(factor * base, rel=1e-9)


def test_irls_objective_is_non_increasing(rng):
    """
    Test the Huber objective never increases across IRLS iterations.
    """
    for _ in range(20):
        p = _cloud(rng)
        q = rng.uniform(0.5, 2.0) * p + rng.normal(scale=0.3, size=p.shape)
        outliers = rng.random(p.shape[0]) < 0.3
        q[outliers] = rng.normal(scale=20.0, size=(int(outliers.sum()), 3))
        history = irls_scale(p, q).objective_history
        assert len(history) >= 2
        for before, after in zip(history, history[1:]):
            assert after <= before * (1 + 1e-12) + 1e-12


def test_irls_beats_closed_form_with_gross_outliers(rng):
    """
    Test 30% gross outliers: IRLS error < 1% and always below the closed-form error.
    """
    for _ in range(20):
        truth = rng.uniform(0.5, 2.0)
        p = _cloud(rng, 400)
        q = truth * p + rng.normal(scale=0.01, size=p.shape)
        outliers = rng.permutation(p.shape[0])[:120]
        q[outliers] = _perpendicular(rng, p[outliers], 500.0)
        corr = CorrespondenceSet.from_pairs(p, q)
        irls_error = abs(estimate_scale_irls(corr) / truth - 1.0)
        closed_error = abs(estimate_scale_closed_form(corr) / truth - 1.0)
        assert irls_error < 0.01
        assert closed_error > irls_error


def test_fixed_huber_delta_is_used(rng):
    """
    Test an explicit delta overrides the adaptive default.
    """
    p = _cloud(rng)
    result = irls_scale(p, 2.0 * p, IrlsConfig(huber_delta=0.5))
    assert result.delta == 0.5
    default = irls_scale(p, 2.0 * p)
    assert default.delta == pytest.approx(0.1 * np.median(np.linalg.norm(2.0 * p, axis=1)))


def test_irls_errors():
    """
    Test empty, zero and non-finite inputs.
    """
    with pytest.raises(EmptyCorrespondenceError):
        irls_scale(np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.raises(EstimationError):
        irls_scale(np.zeros((4, 3)), np.ones((4, 3)))
    with pytest.raises(EstimationError):
        irls_scale(np.full((2, 3), np.nan), np.ones((2, 3)))
    with pytest.raises(EmptyCorrespondenceError):
        estimate_scale_closed_form(CorrespondenceSet.from_pairs(np.zeros((0, 3)), np.zeros((0, 3))))


def test_irls_config_validation():
    """
    Test IrlsConfig rejects invalid settings.
    """
    with pytest.raises(ValueError):
        IrlsConfig(huber_delta=0.0)
    with pytest.raises(ValueError):
        IrlsConfig(max_iters=0)


def _window_with_confidence(spec, conf_fn, offset=0.0):
    frames = []
    for timestamp in spec.frames:
        points = np.zeros((2, 3, 3))
        points[..., 0] = np.arange(3)[None, :]
        points[..., 1] = np.arange(2)[:, None]
        points[..., 2] = -5.0 - offset - timestamp
        frames.append(
            FramePrediction(
                timestamp,
                PointMap(points, np.ones((2, 3), dtype=bool)),
                RigidPose.identity(),
                ConfidenceMap(conf_fn(timestamp)),
            )
        )
    return WindowPrediction(spec, tuple(frames))


def test_select_correspondences_uses_strict_median_gate():
    """
    Test only pixels strictly above each window's median are paired.
    """
    prev = _window_with_confidence(
        WindowSpec(1, 1, 3), lambda t: np.arange(6, dtype=float).reshape(2, 3) + t
    )
    curr = _window_with_confidence(
        WindowSpec(2, 2, 3), lambda t: np.full((2, 3), 1.0) + np.eye(2, 3) * 5.0, offset=1.0
    )
    corr = select_correspondences(prev, curr, [2, 3])
    # gates: prev median 5.0, curr median 1.0
    assert corr.frames.tolist() == [2, 3]
    assert corr.pixels.tolist() == [[1, 1], [1, 1]]
    assert np.allclose(corr.q[:, 2], corr.p[:, 2] - 1.0)


def test_constant_confidence_selects_nothing():
    """
    Test a constant confidence map leaves no pixel strictly above its median.
    """
    prev = _window_with_confidence(WindowSpec(1, 1, 2), lambda t: np.ones((2, 3)))
    curr = _window_with_confidence(WindowSpec(2, 2, 2), lambda t: np.ones((2, 3)))
    assert len(select_correspondences(prev, curr, [2])) == 0


def test_select_correspondences_rejects_empty_overlap():
    """
    Test an empty overlap list is an error.
    """
    prev = _window_with_confidence(WindowSpec(1, 1, 2), lambda t: np.ones((2, 3)))
    with pytest.raises(ValueError):
        select_correspondences(prev, prev, [])


def test_reversed_set_swaps_roles(rng):
    """
    Test reversed() swaps p and q so the scale inverts.
    """
    p = _cloud(rng)
    corr = CorrespondenceSet.from_pairs(p, 0.5 * p)
    assert estimate_scale_irls(corr.reversed()) == pytest.approx(2.0, rel=1e-12)


def _layered_pairs(rng, truth, background=110, foreground=120, bias=1.3):
    """Far pairs at the true scale plus a larger count of near pairs scaled by ``bias``."""
    dirs = rng.normal(size=(background + foreground, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    p = dirs * np.where(np.arange(dirs.shape[0]) < background, 10.0, 4.0)[:, None]
    ratio = np.where(np.arange(dirs.shape[0]) < background, truth, truth * bias)
    return p, ratio[:, None] * p


def test_weighted_median():
    """
    Test the weighted median picks the value holding half the weight.
    """
    assert weighted_median(np.array([3.0, 1.0, 2.0]), np.ones(3)) == 2.0
    assert weighted_median(np.array([1.0, 2.0, 3.0, 4.0]), np.array([1.0, 1.0, 1.0, 10.0])) == 4.0


def test_rescaled_delta_ignores_near_majority(rng):
    """
    Test residual-rescaled IRLS recovers the far-point scale when biased near points
    are the count majority, where a target-norm delta stays biased.
    """
    for truth in (0.6, 1.0, 1.8):
        p, q = _layered_pairs(rng, truth)
        rescaled = irls_scale(p, q, IrlsConfig(rescale=True))
        fixed = irls_scale(p, q, IrlsConfig())
        assert rescaled.converged
        assert rescaled.scale == pytest.approx(truth, rel=1e-5)
        assert abs(fixed.scale / truth - 1.0) > 1e-3


def test_rescaled_irls_scale_equivariance(rng):
    """
    Test the rescaled threshold keeps the estimate equivariant to target scaling.
    """
    p, q = _layered_pairs(rng, 1.2)
    q = q + rng.normal(scale=0.05, size=q.shape)
    config = IrlsConfig(rescale=True)
    base = irls_scale(p, q, config).scale
    for factor in (0.5, 7.0):
        assert irls_scale(p, factor * q, config).scale == pytest.approx(factor * base, rel=1e-9)
