import numpy as np
import pytest

from isacdiff.encoders import (
    ConditionEncoder,
    CrossModalFusion,
    EncoderConfig,
    LocationEncoder,
    SensingEncoder,
    location_features,
    sensing_planes,
)
from isacdiff.numerics import ConfigurationError, Tensor, grad_check

PAPER = EncoderConfig(receive_aps=2, antennas=8)
TINY = EncoderConfig(receive_aps=2, antennas=3, conv_filters=(2, 3, 2), token_dim=4,
                     location_hidden=5, heads=2, ffn_hidden=6, mmt_dim=5)


def random_planes(rng, batch, cfg=PAPER):
    h = rng.standard_normal((batch, cfg.receive_aps, cfg.antennas, cfg.antennas)) \
        + 1j * rng.standard_normal((batch, cfg.receive_aps, cfg.antennas, cfg.antennas))
    return sensing_planes(h)


def test_sensing_planes_layout():
    h = np.arange(8).reshape(2, 2, 2) * (1 + 2j)
    p = sensing_planes(h)
    assert p.shape == (2, 2, 2, 2)
    np.testing.assert_array_equal(p[:, 0], h.real)
    np.testing.assert_array_equal(p[:, 1], h.imag)


def test_paper_dimensions():
    rng = np.random.default_rng(0)
    enc = ConditionEncoder(PAPER, rng)
    planes = random_planes(rng, 3)
    tokens, pooled = enc.encode_sensing(planes)
    assert tokens.shape == (3, 2, 16)
    assert pooled.shape == (3, 16)
    assert enc.location(location_features(rng.uniform(0, 100, (3, 2)))).shape == (3, 16)
    assert enc(planes, location_features(rng.uniform(0, 100, (3, 2)))).shape == (3, 128)


def test_shape_mismatch_is_configuration_error():
    enc = SensingEncoder(PAPER, np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        enc(np.zeros((2, 3, 2, 8, 8)))
    fusion = CrossModalFusion(PAPER, np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        fusion(np.zeros((2, 2, 16)), np.zeros((2, 8)))


def test_zero_input_is_reproducible_constant():
    enc = SensingEncoder(PAPER, np.random.default_rng(1))
    enc.eval()
    a = enc(np.zeros((2, 2, 2, 8, 8))).data
    b = enc(np.zeros((2, 2, 2, 8, 8))).data
    assert a.tobytes() == b.tobytes()
    # zero planes make every token the same bias-propagated vector
    np.testing.assert_array_equal(a[0, 0], a[1, 1])


def test_permuting_aps_permutes_tokens():
    rng = np.random.default_rng(2)
    enc = SensingEncoder(PAPER, rng)
    planes = random_planes(rng, 4)
    for mode in ("train", "eval"):
        getattr(enc, mode)()
        tokens = enc(planes).data
        swapped = enc(planes[:, ::-1]).data
        np.testing.assert_allclose(swapped, tokens[:, ::-1], rtol=1e-12, atol=1e-12)


def test_location_features_geometry():
    f = location_features(np.array([[100.0, 50.0], [0.0, 50.0], [0.0, 100.0]]), (0.0, 50.0))
    np.testing.assert_allclose(f[0], [1.0, 0.5, 1.0, 0.0])
    np.testing.assert_allclose(f[1], [0.0, 0.5, 0.0, 0.0])
    np.testing.assert_allclose(f[2], [0.0, 1.0, 0.5, np.pi / 2])


def test_location_encoder_single_hidden_layer():
    enc = LocationEncoder(PAPER, np.random.default_rng(0))
    shapes = [layer.weight.shape for layer in enc.net.layers]
    assert shapes == [(4, 64), (64, 16)]


def test_cross_attention_weights_are_distributions():
    rng = np.random.default_rng(3)
    fusion = CrossModalFusion(PAPER, rng)
    fusion(rng.standard_normal((5, 2, 16)), rng.standard_normal((5, 16)))
    w = fusion.cross_attn.last_weights
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-9)


def test_single_token_cross_attention_weight_one():
    cfg = EncoderConfig(receive_aps=1, antennas=4)
    rng = np.random.default_rng(4)
    fusion = CrossModalFusion(cfg, rng)
    tokens = rng.standard_normal((3, 1, 16))
    fusion(tokens, rng.standard_normal((3, 16)))
    assert np.all(fusion.cross_attn.last_weights == 1.0)
    # the attended value is the single (self-attended) token's value projection
    ca = fusion.cross_attn
    t = tokens + fusion.self_attn(tokens, tokens).data
    query = rng.standard_normal((3, 1, 16))
    expected = (t @ ca.w_v.data + ca.b_v.data) @ ca.w_o.data + ca.b_o.data
    np.testing.assert_allclose(ca(query, t).data, expected, rtol=1e-12, atol=1e-12)


def test_encoder_deterministic_repeat():
    rng = np.random.default_rng(5)
    enc = ConditionEncoder(PAPER, rng)
    planes, loc = random_planes(rng, 4), location_features(rng.uniform(0, 100, (4, 2)))
    assert enc(planes, loc).data.tobytes() == enc(planes, loc).data.tobytes()


def test_embedding_norms_finite_over_many_samples():
    rng = np.random.default_rng(6)
    enc = ConditionEncoder(EncoderConfig(receive_aps=2, antennas=4), rng)
    enc.eval()
    cfg = enc.cfg
    out = enc(random_planes(rng, 1000, cfg), location_features(rng.uniform(0, 100, (1000, 2)))).data
    norms = np.linalg.norm(out, axis=-1)
    assert np.all(np.isfinite(norms)) and norms.max() < 1e6


@pytest.mark.parametrize("seed", range(10))
def test_end_to_end_gradient(seed):
    rng = np.random.default_rng(seed)
    enc = ConditionEncoder(TINY, rng)
    planes = Tensor(random_planes(rng, 3, TINY), requires_grad=True)
    loc = Tensor(location_features(rng.uniform(0, 100, (3, 2))), requires_grad=True)
    params = [p for _, p in enc.named_parameters()]
    report = grad_check(lambda *args: enc(planes, loc), [planes, loc, *params])
    assert report.passed, report.failures[:5]
