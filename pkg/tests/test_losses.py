import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from fdgan.losses import (
    NUM_EPS,
    LossReport,
    LossWeights,
    TrainingDivergence,
    adversarial_discriminator_loss,
    adversarial_generator_loss,
    new_stats,
    reconstruction_loss,
    same_pose_loss,
    total_objective,
    verification_loss,
)

probs = st.floats(0.01, 0.99)


@settings(max_examples=50, deadline=None)
@given(probs, st.booleans())
def test_verification_matches_scalar_formula(d, same):
    got = float(verification_loss(torch.tensor([d], dtype=torch.float64), torch.tensor([float(same)])))
    assert got == pytest.approx(-math.log(d) if same else -math.log(1 - d), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(probs, probs, st.floats(0, 0.3))
def test_discriminator_loss_formula(r, f, eps):
    got = float(adversarial_discriminator_loss(torch.tensor([r], dtype=torch.float64),
                                               torch.tensor([f], dtype=torch.float64), eps))
    want = -((1 - eps) * math.log(r) + eps * math.log(1 - r)) - math.log(1 - f)
    assert got == pytest.approx(want, rel=1e-12)


def test_branches_sum_and_patch_maps_average():
    a, b = torch.full((3,), 0.3), torch.full((3,), 0.6)
    assert float(adversarial_generator_loss([a, b])) == pytest.approx(-math.log(0.3) - math.log(0.6), rel=1e-6)
    patch = torch.full((3, 2, 2), 0.3)
    assert float(adversarial_generator_loss(patch)) == pytest.approx(-math.log(0.3), rel=1e-6)


def test_saturated_scores_are_clamped_and_counted():
    stats = new_stats()
    loss = verification_loss(torch.tensor([0.0, 1.0], dtype=torch.float64), torch.tensor([1.0, 0.0]), stats)
    assert math.isfinite(float(loss))
    assert float(loss) == pytest.approx(-math.log(NUM_EPS), rel=1e-3)
    assert stats["verification"] == 2


def test_empty_adversarial_inputs():
    with pytest.raises(ValueError):
        adversarial_discriminator_loss(torch.empty(0), torch.tensor([0.5]))
    with pytest.raises(ValueError):
        adversarial_generator_loss([])


def test_reconstruction_mask():
    g, t = torch.zeros(3, 3, 4, 4), torch.ones(3, 3, 4, 4)
    t[0] = 5
    assert float(reconstruction_loss(g, t, torch.tensor([False, True, True]))) == 1.0
    g.requires_grad_(True)
    none = reconstruction_loss(g, t, torch.zeros(3, dtype=torch.bool))
    assert float(none.detach()) == 0.0 and none.requires_grad
    with pytest.raises(ValueError):
        reconstruction_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 2))


def test_same_pose_rejects_negatives():
    x = torch.zeros(2, 3, 4, 4)
    assert float(same_pose_loss(x, x + 1, torch.ones(2))) == 1.0
    with pytest.raises(ValueError):
        same_pose_loss(x, x, torch.tensor([1.0, 0.0]))


def test_objective_weights_and_divergence():
    parts = {"L_v": 1.0, "L_id_G": 1.0, "L_pd_G": 1.0, "L_r": 1.0, "L_sp": 1.0}
    w = LossWeights(lambda_id=0.0, lambda_pd=0.0, lambda_sp=0.0)
    assert float(total_objective(parts, w)) == 11.0
    with pytest.raises(TrainingDivergence) as err:
        total_objective({**parts, "L_r": float("nan")}, w)
    assert err.value.term == "L_r"


def test_weights_validation_and_report_roundtrip():
    with pytest.raises(ValueError):
        LossWeights(lambda_r=-1)
    with pytest.raises(ValueError):
        LossWeights.from_dict({"lambda_q": 1})
    rep = LossReport(L_v=0.5, total=2.0)
    assert LossReport.from_dict(rep.to_dict()) == rep
