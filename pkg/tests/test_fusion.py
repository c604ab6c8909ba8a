import numpy as np
import pytest
import torch

from models.fusion import FusionNetwork, RelPosTable, mask_tokens, relative_bias
from models.schema import MaskStrategy
from services.verification import check_fusion_invariants, index_batch


def tiny_network(blocks=1, positional='relative'):
    torch.manual_seed(0)
    return FusionNetwork(8, blocks=blocks, heads=2, rel_buckets=4, cell_m=1.0, max_grid=(2, 2),
                         positional=positional).double().eval()


CELLS = np.array([[0.5, 0.5], [1.5, 0.5], [0.5, 1.5]])


def two_tile_inputs():
    positions = np.concatenate([CELLS] * 4)
    codes = np.repeat([0, 0, 1, 1], 3)
    tokens = torch.randn(12, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    return tokens, positions, codes, np.concatenate([CELLS, CELLS]), np.repeat([0, 1], 3)


# --- Masking ---

def test_random_mask_takes_floor_of_ratio():
    batch = index_batch(3, 2, 3)
    mask = mask_tokens(batch, 0.5, MaskStrategy.RANDOM, seed=4)
    assert len(mask.rows) == 9
    assert mask == mask_tokens(batch, 0.5, MaskStrategy.RANDOM, seed=4)


def test_spatial_mask_removes_whole_patches():
    batch = index_batch(3, 2, 4)
    mask = mask_tokens(batch, 0.5, 'spatial', seed=0)
    for tile_id, span in batch.tile_partition.items():
        patches = {batch.indices[i].patch for i in span if i in mask.rows}
        assert len(patches) == 2
        for i in span:
            assert (i in mask.rows) == (batch.indices[i].patch in patches)


def test_modality_mask_removes_one_modality_per_tile():
    batch = index_batch(3, 2, 4)
    mask = mask_tokens(batch, 0.5, 'modality', seed=0)
    for span in batch.tile_partition.values():
        hidden = {batch.indices[i].modality for i in span if i in mask.rows}
        assert len(hidden) == 1
        assert sum(i in mask.rows for i in span) == 4


@pytest.mark.parametrize('ratio', [-0.1, 1.0])
def test_mask_ratio_range(ratio):
    with pytest.raises(ValueError):
        mask_tokens(index_batch(2, 1, 2), ratio, 'random', seed=0)


def test_zero_ratio_masks_nothing():
    assert not mask_tokens(index_batch(2, 1, 2), 0.0, 'random', seed=0).rows


# --- Relative positions ---

def test_same_patch_lands_in_the_first_bucket():
    table = RelPosTable(2, buckets=4, cell_m=10.0, max_distance=30.0)
    assert int(table.bucket(torch.tensor(0.0))) == 0
    assert int(table.bucket(torch.tensor(10.0))) > 0
    assert int(table.bucket(torch.tensor(1000.0))) == 3


def test_relative_bias_is_symmetric_and_blocks_other_tiles():
    table = RelPosTable(2, buckets=4, cell_m=1.0, max_distance=3.0)
    with torch.no_grad():
        table.bias.copy_(torch.arange(8, dtype=torch.float32).reshape(4, 2))
    positions = np.concatenate([CELLS, CELLS])
    bias = relative_bias(positions, [0, 0, 0, 1, 1, 1], table)
    assert bias.shape == (2, 6, 6)
    within = bias[:, :3, :3]
    assert torch.equal(within, within.transpose(-1, -2))
    assert torch.isinf(bias[:, :3, 3:]).all() and (bias[:, :3, 3:] < 0).all()


def test_three_four_five_offset_lands_in_the_bucket_holding_50_m():
    table = RelPosTable(1, buckets=8, cell_m=10.0, max_distance=100.0)
    with torch.no_grad():
        table.bias.copy_(torch.arange(8, dtype=torch.float32)[:, None])
    edges = table.edges.numpy()
    expected = int(np.searchsorted(edges, 50.0, side='right'))
    assert edges[expected - 1] <= 50.0 < edges[expected]
    bias = relative_bias([(0.0, 0.0), (30.0, 40.0)], [0, 0], table)
    assert float(bias[0, 0, 1]) == float(bias[0, 1, 0]) == expected
    assert float(bias[0, 0, 0]) == 0.0


# --- Combining network ---

def test_outputs_one_row_per_slot():
    tokens, positions, codes, slot_pos, slot_codes = two_tile_inputs()
    out = tiny_network()(tokens, torch.zeros(12, dtype=torch.bool), positions, codes, slot_pos, slot_codes)
    assert out.shape == (6, 8)


def test_tiles_do_not_see_each_other():
    net = tiny_network(blocks=2)
    tokens, positions, codes, slot_pos, slot_codes = two_tile_inputs()
    mask = torch.zeros(12, dtype=torch.bool)
    with torch.no_grad():
        base = net(tokens, mask, positions, codes, slot_pos, slot_codes)
        alone = net(tokens[:6], mask[:6], positions[:6], codes[:6], slot_pos[:3], slot_codes[:3])
    assert torch.allclose(base[:3], alone, atol=1e-12)


def test_masked_token_content_is_irrelevant():
    net = tiny_network()
    tokens, positions, codes, slot_pos, slot_codes = two_tile_inputs()
    mask = torch.zeros(12, dtype=torch.bool)
    mask[[0, 5]] = True
    other = tokens.clone()
    other[mask] = 7.0
    with torch.no_grad():
        assert torch.equal(net(tokens, mask, positions, codes, slot_pos, slot_codes),
                           net(other, mask, positions, codes, slot_pos, slot_codes))


def test_absolute_positions_mode():
    tokens, positions, codes, slot_pos, slot_codes = two_tile_inputs()
    out = tiny_network(positional='absolute')(tokens, torch.zeros(12, dtype=torch.bool), positions, codes,
                                              slot_pos, slot_codes)
    assert out.shape == (6, 8) and torch.isfinite(out).all()


def test_invariants_check_passes():
    result = check_fusion_invariants()
    assert result.passed, result.detail
