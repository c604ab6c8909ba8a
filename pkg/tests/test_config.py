import pytest
import yaml

from config import (
    DEFAULT_SPLIT, SyntheticConfig, TrainConfig, config_from_dict, dump_default_config, load_run_config
)
from models.schema import ContrastiveMode, ImageEncoderKind, MaskStrategy
from utils.errors import ConfigError


def write(tmp_path, document):
    path = tmp_path / 'run.yaml'
    path.write_text(yaml.safe_dump(document), encoding='utf-8')
    return str(path)


def test_defaults_without_a_file():
    train, synthetic, sections = load_run_config()
    assert train == TrainConfig() and synthetic == SyntheticConfig()
    assert sections['split'] == DEFAULT_SPLIT


def test_flags_win_over_the_file(tmp_path):
    path = write(tmp_path, {'train': {'d': 32, 'gamma': 0.5, 'mask_strategy': 'spatial'}})
    train, _, _ = load_run_config(path, {'train': {'gamma': 0.2, 'd': None}})
    assert train.d == 32 and train.gamma == 0.2
    assert train.mask_strategy is MaskStrategy.SPATIAL


def test_dumped_defaults_load_back(tmp_path):
    path = tmp_path / 'defaults.yaml'
    path.write_text(dump_default_config(), encoding='utf-8')
    train, synthetic, _ = load_run_config(str(path))
    assert train == TrainConfig() and synthetic == SyntheticConfig()


@pytest.mark.parametrize('document', [
    {'train': {'nope': 1}},
    {'trian': {}},
    {'train': {'gamma': 'warm'}},
    {'train': {'reconstruction': 'yes'}},
    {'train': {'contrastive': 'sometimes'}},
    {'train': {'mask_ratio': 1.0}},
    {'train': {'d': 10, 'heads': 4}},
    {'train': {'vit_subpatch': 0}},
    {'train': {'image_encoder': 'swin'}},
    {'synthetic': {'optical_length': [5, 3]}},
    {'split': {'train': -1}},
])
def test_invalid_documents_are_config_errors(tmp_path, document):
    with pytest.raises(ConfigError):
        load_run_config(write(tmp_path, document))


def test_comma_separated_modalities():
    cfg = config_from_dict(TrainConfig, {'modalities': 'vhr,radar_ts', 'contrastive': 'naive'}, 'train')
    assert cfg.modalities == ['vhr', 'radar_ts'] and cfg.contrastive is ContrastiveMode.NAIVE


def test_vit_image_encoder_is_a_choice():
    cfg = config_from_dict(TrainConfig, {'image_encoder': 'vit', 'vit_subpatch': 5}, 'train')
    assert cfg.image_encoder is ImageEncoderKind.VIT
    assert cfg.architecture()['image_encoder'] == 'vit' and cfg.architecture()['vit_subpatch'] == 5


def test_architecture_fields_are_plain_values():
    arch = TrainConfig(pool_factors=(2, 2)).architecture()
    assert arch['pool_factors'] == [2, 2] and arch['positional'] == 'relative'
