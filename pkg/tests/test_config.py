import pytest

from vdguide.config import PRESETS, config_hash, from_ini, preset, to_ini
from vdguide.errors import InvalidConfigError
from vdguide.losses import LossWeights


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_ini_round_trip(name):
    cfg = preset(name)
    assert from_ini(to_ini(cfg)) == cfg


def test_partial_file_keeps_preset_values():
    cfg = from_ini("[pipeline]\npreset = scale-only\n[guidance]\ninner_steps = 7\n")
    assert cfg.guidance.inner_steps == 7
    assert cfg.guidance.geometry_weights == LossWeights.zeros()


def test_unknown_keys_and_sections_rejected():
    with pytest.raises(InvalidConfigError, match="bogus"):
        from_ini("[guidance]\nbogus = 1\n")
    with pytest.raises(InvalidConfigError, match="extra"):
        from_ini("[extra]\na = 1\n")


def test_bad_values_rejected():
    with pytest.raises(InvalidConfigError):
        from_ini("[guidance]\ninner_steps = many\n")
    with pytest.raises(InvalidConfigError):
        from_ini("[guidance]\nguided_steps = 9\n")
    with pytest.raises(InvalidConfigError):
        preset("nonexistent")


def test_preset_contents():
    full = preset("full").guidance
    assert full.guided_steps == (2, 1) and full.order == "geometry_then_scale"
    assert full.inner_steps == 30 and full.inner_step_size == 1e-2
    base = preset("baseline").guidance
    assert not base.scale_enabled and not base.geometry_enabled
    assert preset("post-opt").post == "both" and not preset("post-opt").guidance.guided_steps
    assert preset("ours-s").guidance.guided_steps == (2,)
    assert preset("no-normal").guidance.geometry_weights.alpha_n == 0.0
    assert preset("last-3").guidance.guided_steps == (3, 2, 1)


def test_schedule_from_parameters():
    cfg = from_ini("[schedule]\nsteps = 4\nfirst = 0.9\nlast = 0.1\n")
    assert len(cfg.schedule.alpha_bar) == 4


def test_hash_is_sha256_of_bytes():
    assert config_hash(b"") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
    assert config_hash(b"a") != config_hash(b"b")
