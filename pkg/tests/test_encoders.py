import math

import numpy as np
import pytest
import torch

from config import TrainConfig
from models.encoders import (
    ImageCodec, LinearImageCodec, TemporalCodec, ViTImageCodec, build_codec, day_encoding, decode_image,
    decode_timeseries, default_pool_factors, encode_image, encode_timeseries, select_reconstruction_dates
)
from models.schema import ImageEncoderKind, ModalityKind, ModalitySpec
from services.verification import identity_image_codec
from utils.errors import ConfigError, ShapeMismatchError


# --- Image codec ---

@pytest.mark.parametrize('side,factors', [(8, (2, 2, 2)), (12, (3, 2, 2)), (50, (5, 5, 2)), (7, (7,))])
def test_default_pool_factors(side, factors):
    assert default_pool_factors(side) == factors


def test_one_pixel_patches_cannot_be_pooled():
    with pytest.raises(ConfigError):
        default_pool_factors(1)


def test_image_codec_shapes():
    codec = ImageCodec(3, 8, 16)
    z, trace = codec.encode(torch.randn(5, 3, 8, 8))
    assert z.shape == (5, 16)
    assert len(trace.indices) == 3 and len(trace) == 5
    assert codec.decode(z, trace).shape == (5, 3, 8, 8)
    assert codec.decode(z).shape == (5, 3, 8, 8)


def test_image_codec_rejects_wrong_patch():
    with pytest.raises(ShapeMismatchError):
        ImageCodec(3, 8, 16).encode(torch.randn(1, 3, 4, 4))


def test_trace_from_another_codec_is_rejected():
    z, trace = ImageCodec(3, 8, 16).encode(torch.randn(2, 3, 8, 8))
    with pytest.raises(ShapeMismatchError):
        ImageCodec(3, 8, 16, pool_factors=(4, 2)).decode(z, trace)


def test_unpooling_follows_the_trace():
    codec = identity_image_codec(side=4)
    x = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
    x[0, 0, 3, 1] = 2.0
    z, trace = encode_image(x[0], codec)
    assert float(z[0]) == 2.0
    out = decode_image(z, trace, codec)
    assert float(out[0, 3, 1]) == 2.0
    assert float(out.abs().sum()) == 2.0


def test_disabled_bypass_uses_the_top_left_convention():
    codec = identity_image_codec(side=4)
    codec.bypass = False
    x = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
    x[0, 0, 3, 1] = 2.0
    z, trace = codec.encode(x)
    out = codec.decode(z, trace)
    assert float(out[0, 0, 0, 0]) == 2.0
    assert float(out.abs().sum()) == 2.0


def test_trace_rows_can_be_selected():
    codec = ImageCodec(2, 4, 8)
    z, trace = codec.encode(torch.randn(4, 2, 4, 4))
    part = trace.select([1, 3])
    assert torch.allclose(codec.decode(z[[1, 3]], part), codec.decode(z, trace)[[1, 3]], atol=1e-6)


def test_linear_codec_round_trip_shape():
    codec = LinearImageCodec(2, 4, 8)
    z, trace = codec.encode(torch.randn(3, 2, 4, 4))
    assert trace is None
    assert codec.decode(z).shape == (3, 2, 4, 4)


def test_bypass_lowers_the_error_on_max_pool_structured_patches():
    rng = np.random.default_rng(0)
    x = torch.zeros(20, 1, 4, 4, dtype=torch.float64)
    for n in range(20):
        row, col = divmod(int(rng.integers(1, 16)), 4)
        x[n, 0, row, col] = float(rng.uniform(1.0, 3.0))
    codec = identity_image_codec(side=4)
    z, trace = codec.encode(x)
    traced = float(((codec.decode(z, trace) - x) ** 2).mean())
    codec.bypass = False
    fixed = float(((codec.decode(z, trace) - x) ** 2).mean())
    assert traced == 0.0
    assert fixed > traced


def test_vit_codec_shapes():
    codec = ViTImageCodec(3, 8, 8, subpatch=4, heads=2)
    z, trace = codec.encode(torch.randn(5, 3, 8, 8))
    assert z.shape == (5, 8) and trace is None
    assert codec.decode(z).shape == (5, 3, 8, 8)
    with pytest.raises(ShapeMismatchError):
        codec.encode(torch.randn(5, 3, 4, 4))


def test_vit_decoder_puts_each_piece_in_its_place():
    codec = ViTImageCodec(1, 4, 4, subpatch=2, heads=1).double()
    with torch.no_grad():
        codec.positions.copy_(torch.arange(4, dtype=torch.float64)[:, None].expand(4, 4))
        codec.decoder.weight.fill_(0.25)
        codec.decoder.bias.zero_()
    out = codec.decode(torch.zeros(1, 4, dtype=torch.float64))[0, 0]
    # pieces are numbered row-major over the 2 x 2 layout
    expected = torch.tensor([[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]], dtype=torch.float64)
    assert torch.equal(out, expected)


def test_vit_subpatch_must_divide_the_patch():
    with pytest.raises(ConfigError):
        ViTImageCodec(3, 10, 8, subpatch=4)


def test_image_encoder_setting_picks_the_codec():
    spec = ModalitySpec('vhr', ModalityKind.IMAGE, 3, 1.0, patch_side_px=10)
    assert isinstance(build_codec(spec, TrainConfig(d=8, heads=2, image_encoder=ImageEncoderKind.VIT, vit_subpatch=5)),
                      ViTImageCodec)
    assert isinstance(build_codec(spec, TrainConfig(d=8, heads=2, image_encoder=ImageEncoderKind.LINEAR)), LinearImageCodec)
    assert isinstance(build_codec(spec, TrainConfig(d=8, heads=2)), ImageCodec)


# --- Day encoding ---

def test_day_encoding_has_constant_norm():
    enc = day_encoding(torch.arange(1, 366), 16, torch.float64)
    norms = enc.norm(dim=-1)
    assert torch.allclose(norms, torch.full_like(norms, math.sqrt(8)))


def test_day_encoding_similarity_falls_with_distance():
    enc = day_encoding(torch.tensor([100, 101, 102, 130]), 32, torch.float64)
    sim = [float(enc[0] @ enc[i]) for i in range(4)]
    assert sim[0] > sim[1] > sim[2]
    assert sim[2] > sim[3]


@pytest.mark.parametrize('day', [0, 366])
def test_day_encoding_rejects_days_outside_the_year(day):
    with pytest.raises(ValueError):
        day_encoding(torch.tensor([day]), 8)


# --- Temporal codec ---

def test_temporal_codec_shapes_and_weights():
    codec = TemporalCodec(3, 16, heads=4, key_dim=4)
    values = torch.randn(2, 3, 6)
    days = torch.tensor([[1, 30, 60, 90, 120, 150]] * 2)
    valid = torch.tensor([[True] * 6, [True] * 4 + [False] * 2])
    z, trace = codec.encode(values, days, valid)
    assert z.shape == (2, 16)
    assert torch.allclose(trace.weights.sum(dim=1), torch.ones(2))
    assert (trace.weights[1, 4:] == 0).all()
    assert codec.decode(z, days).shape == (2, 3, 6)


def test_invalid_dates_do_not_change_the_embedding():
    codec = TemporalCodec(2, 8, heads=2, key_dim=4)
    days = torch.tensor([[5, 50, 100]])
    valid = torch.tensor([[True, True, False]])
    values = torch.randn(1, 2, 3)
    other = values.clone()
    other[0, :, 2] = 100.0
    assert torch.equal(codec.encode(values, days, valid)[0], codec.encode(other, days, valid)[0])


def test_series_without_valid_dates_is_rejected():
    codec = TemporalCodec(2, 8, heads=2, key_dim=4)
    with pytest.raises(ValueError):
        codec.encode(torch.randn(1, 2, 2), torch.tensor([[1, 2]]), torch.tensor([[False, False]]))


def test_single_series_helpers():
    codec = TemporalCodec(2, 8, heads=2, key_dim=4)
    z, weights = encode_timeseries(torch.randn(2, 4), [3, 9, 27, 81], [True] * 4, codec)
    assert z.shape == (8,) and weights.shape == (4,)
    assert decode_timeseries(z, [3, 9, 27, 81], codec).shape == (2, 4)


def test_shuffling_the_dates_does_not_change_the_embedding():
    codec = TemporalCodec(2, 8, heads=2, key_dim=4).double()
    gen = torch.Generator().manual_seed(0)
    values = torch.randn(2, 6, generator=gen, dtype=torch.float64)
    days = torch.tensor([4, 33, 80, 150, 151, 300])
    valid = torch.tensor([True, True, False, True, True, True])
    perm = torch.randperm(6, generator=gen)
    z, weights = encode_timeseries(values, days, valid, codec)
    z_perm, weights_perm = encode_timeseries(values[:, perm], days[perm], valid[perm], codec)
    torch.testing.assert_close(z_perm, z, rtol=0, atol=1e-12)
    torch.testing.assert_close(weights_perm, weights[perm], rtol=0, atol=1e-12)


def test_each_decoded_date_depends_only_on_its_day():
    codec = TemporalCodec(3, 8, heads=2, key_dim=4).double()
    z = torch.randn(8, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    days = [10, 200, 10, 365, 1]
    out = decode_timeseries(z, days, codec)
    assert out.shape == (3, 5)
    for t, day in enumerate(days):
        torch.testing.assert_close(out[:, t], decode_timeseries(z, [day], codec)[:, 0], rtol=0, atol=1e-12)
    torch.testing.assert_close(out[:, 0], out[:, 2], rtol=0, atol=0)


# --- Date selection ---

@pytest.mark.parametrize('length,expected', [(4, 1), (8, 2), (12, 3), (61, 16)])
def test_date_selection_count(length, expected):
    weights = np.random.default_rng(length).random(length)
    assert len(select_reconstruction_dates(weights, 0.25)) == expected


def test_date_selection_picks_the_top_weights_lowest_index_first():
    weights = [0.1, 0.3, 0.3, 0.05, 0.3, 0.2, 0.0, 0.0]
    assert select_reconstruction_dates(weights, 0.25) == [1, 2]
    assert select_reconstruction_dates(weights, 0.5) == [1, 2, 4, 5]


def test_date_selection_ignores_invalid_dates():
    weights = [0.9, 0.05, 0.05]
    assert select_reconstruction_dates(weights, 0.25, valid=[False, True, True]) == [1]
