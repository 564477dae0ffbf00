import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oshp.dual_metric import (AGMHead, NPMHead, agm_forward, attend, beta_schedule, cgs_forward, count_parameters,
                              npm_forward, similarity_map)
from oshp.errors import ContractError


def test_cosine_trivial_cases():
    p = torch.tensor([1.0, 2.0, -1.0])
    f = p[:, None, None].expand(3, 4, 5)
    assert torch.allclose(similarity_map(f, p), torch.ones(1, 4, 5), atol=1e-6)
    ortho = torch.tensor([1.0, 0.0, 1.0])[:, None, None].expand(3, 2, 2)
    assert torch.count_nonzero(similarity_map(ortho, p)) == 0
    assert torch.count_nonzero(similarity_map(f, torch.zeros(3))) == 0


def test_cosine_matches_per_pixel_oracle():
    g = torch.Generator().manual_seed(0)
    f = torch.randn(6, 4, 3, generator=g, dtype=torch.float64)
    protos = torch.randn(3, 6, generator=g, dtype=torch.float64)
    out = similarity_map(f, protos)
    for k in range(3):
        for y in range(4):
            for x in range(3):
                v, p = f[:, y, x], protos[k]
                ref = float(v @ p) / ((float(p.norm()) + 1e-8) * (float(v.norm()) + 1e-8))
                assert abs(out[k, y, x].item() - ref) < 1e-6
    assert out.abs().max() <= 1 + 1e-8
    with pytest.raises(ContractError):
        similarity_map(f, torch.randn(2, 5))


def test_zero_attention_is_pure_residual():
    f = torch.randn(4, 3, 3)
    assert torch.equal(attend(f, torch.zeros(2, 3, 3))[1], f)


def test_agm_single_class_background_is_phi_bg():
    torch.manual_seed(0)
    head = AGMHead(8).double()
    f = torch.randn(8, 5, 5, dtype=torch.float64)
    p = torch.randn(1, 8, dtype=torch.float64)
    pred = agm_forward(f, p, head)
    r = attend(f, similarity_map(f, p))
    l0 = head.phi_bg(r)[0, 0]
    l1 = head.phi(r)[0, 0]
    ref = torch.log_softmax(torch.stack([l0, l1]), dim=0)
    assert torch.allclose(pred.log_probs, ref, atol=1e-12)


@pytest.mark.parametrize("k", [1, 2, 5])
def test_predictions_are_normalised(k):
    torch.manual_seed(k)
    f = torch.randn(8, 6, 6)
    protos = torch.randn(k, 8)
    for pred in (agm_forward(f, protos, AGMHead(8)), npm_forward(similarity_map(f, protos), NPMHead())):
        assert pred.log_probs.shape == (k + 1, 6, 6)
        assert torch.allclose(pred.probs.sum(0), torch.ones(6, 6), atol=1e-6)
        assert (pred.probs >= 0).all()


def test_npm_background_map():
    head = NPMHead(init_scale=1.0)
    ones = torch.ones(3, 2, 2)
    pred = npm_forward(ones, head)
    # A0 = 0, every omega(A_c) = 1
    ref = torch.log_softmax(torch.tensor([0.0, 1.0, 1.0, 1.0]), 0)
    assert torch.allclose(pred.log_probs[:, 0, 0], ref, atol=1e-6)
    a = 0.3
    pred = npm_forward(torch.full((2, 1, 1), a), head)
    ref = torch.log_softmax(torch.tensor([1 - a, a, a]), 0)
    assert torch.allclose(pred.log_probs[:, 0, 0], ref, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1))
def test_npm_is_monotone_in_similarity(a1, a2):
    sims = torch.tensor([[[a1]], [[a2]]], dtype=torch.float64)
    p = npm_forward(sims, NPMHead(1.0).double()).probs[:, 0, 0]
    if a1 > a2:
        assert p[1] > p[2]
    elif a1 == a2:
        assert p[1] == p[2]


def test_heads_need_a_foreground_class():
    with pytest.raises(ContractError):
        agm_forward(torch.randn(4, 2, 2), torch.zeros(0, 4), AGMHead(4))
    with pytest.raises(ContractError):
        npm_forward(torch.zeros(0, 2, 2), NPMHead())


def test_labels_upsample_and_map_to_class_ids():
    lp = torch.log_softmax(torch.tensor([[[0.0, 5.0]], [[5.0, 0.0]]]), 0)
    from oshp.dual_metric import PredictionMap
    pred = PredictionMap(lp, [0, 7])
    assert pred.labels().tolist() == [[7, 0]]
    assert pred.labels((2, 4)).tolist() == [[7, 7, 0, 0]] * 2


def test_beta_schedule():
    assert beta_schedule(0, 50) == 1.0
    assert beta_schedule(50, 50) == 0.0
    assert beta_schedule(25, 50) == 0.5
    with pytest.raises(ContractError):
        beta_schedule(51, 50)
    with pytest.raises(ContractError):
        beta_schedule(0, 0)


def test_cgs_swap_symmetry():
    torch.manual_seed(3)
    head = AGMHead(6).double()
    f = torch.randn(6, 4, 4, dtype=torch.float64)
    protos = torch.randn(2, 6, dtype=torch.float64)
    swapped = AGMHead(6).double()
    swapped.phi.load_state_dict(head.phi_bg.state_dict())
    swapped.phi_bg.load_state_dict(head.phi.state_dict())
    a = cgs_forward(f, protos, head).log_probs
    b = cgs_forward(f, protos.flip(0), swapped).log_probs
    assert torch.equal(a, b.flip(0))
    assert torch.allclose(a.exp().sum(0), torch.ones(4, 4, dtype=torch.float64), atol=1e-12)


def test_cgs_modes():
    head = AGMHead(4)
    f, protos = torch.randn(4, 3, 3), torch.randn(2, 4)
    avg = cgs_forward(f, protos, head, mode="averaged")
    assert torch.equal(avg.log_probs, agm_forward(f, protos[1:], head, [0, 1]).log_probs)
    with pytest.raises(ContractError):
        cgs_forward(f, protos, head, mode="nope")
    with pytest.raises(ContractError):
        cgs_forward(f, protos[:1], head)


def test_npm_is_far_lighter_than_agm():
    assert count_parameters(NPMHead()) == 4
    assert count_parameters(AGMHead(64)) >= 100 * count_parameters(NPMHead())
