import pytest
import torch

from oshp.config import ConfigError
from oshp.embedding import Embedder, EncoderConfig
from oshp.errors import ContractError


@pytest.fixture(scope="module")
def embedder():
    torch.manual_seed(0)
    return Embedder(EncoderConfig(feature_dim=32, cgs_dim=24, fgs_dim=40)).eval()


def test_output_shape_follows_stride(embedder):
    x = torch.rand(2, 3, 64, 64)
    g = embedder.encode(x)
    assert g.shape == (2, 32, 16, 16)
    out = embedder(x)
    assert out["cgs"].shape == (2, 24, 16, 16)
    assert out["fgs"].shape == (2, 40, 16, 16)


def test_stride_two_shape():
    e = Embedder(EncoderConfig(downsample_factor=2, feature_dim=8, width=4, cgs_dim=4, fgs_dim=4))
    assert e.encode(torch.rand(1, 3, 64, 64)).shape == (1, 8, 32, 32)


def test_eval_mode_is_deterministic(embedder):
    x = torch.rand(1, 3, 64, 64)
    assert torch.equal(embedder(x)["fgs"], embedder(x)["fgs"])


def test_support_and_query_share_weights():
    torch.manual_seed(1)
    e = Embedder(EncoderConfig(feature_dim=16, width=8, cgs_dim=8, fgs_dim=8)).double()
    s, q = torch.rand(1, 3, 64, 64, dtype=torch.float64), torch.rand(1, 3, 64, 64, dtype=torch.float64)
    joint = e.encode(torch.cat([s, q]))
    assert torch.equal(joint[0], e.encode(s)[0])
    assert torch.equal(joint[1], e.encode(q)[0])

    def grads(x):
        e.zero_grad()
        e.encode(x).sum().backward()
        return {n: p.grad.clone() for n, p in e.encoder.named_parameters()}

    g_s, g_q = grads(s), grads(q)
    e.zero_grad()
    (e.encode(s).sum() + e.encode(q).sum()).backward()
    # both branches write into the same parameter tensors
    for n, p in e.encoder.named_parameters():
        assert torch.allclose(p.grad, g_s[n] + g_q[n], rtol=1e-10, atol=1e-12)


def test_shape_mismatch_is_rejected(embedder):
    with pytest.raises(ContractError):
        embedder.encode(torch.rand(1, 3, 60, 64))
    with pytest.raises(ContractError):
        embedder.project(torch.rand(1, 32, 4, 4), "mid")


def test_projection_matches_matmul_oracle(embedder):
    g = torch.randn(1, 32, 5, 6)
    out = embedder.project(g, "fgs")
    conv = embedder.proj["fgs"]
    w, b = conv.weight[:, :, 0, 0], conv.bias
    for y in range(5):
        for x in range(6):
            ref = w @ g[0, :, y, x] + b
            assert torch.allclose(out[0, :, y, x], ref, atol=1e-6)


def test_projection_linearity():
    e = Embedder(EncoderConfig())
    conv = e.proj["cgs"]
    with torch.no_grad():
        conv.bias.zero_()
    assert torch.count_nonzero(e.project(torch.zeros(1, 64, 3, 3), "cgs")) == 0
    g = torch.randn(1, 64, 3, 3)
    assert torch.allclose(e.project(2.5 * g, "cgs"), 2.5 * e.project(g, "cgs"), atol=1e-5)


def test_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(input_size=(62, 64))
    with pytest.raises(ConfigError):
        EncoderConfig(downsample_factor=3)
    with pytest.raises(ConfigError):
        EncoderConfig(feature_dim=1)
    assert EncoderConfig().feature_size == (16, 16)
