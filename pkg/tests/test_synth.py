import numpy as np
import pytest

from tinytrack.dataset import is_tiny, load_manifest
from tinytrack.synth import SynthConfig, generate_sequence, preset_configs, render_sequence, write_dataset


def test_deterministic_per_seed():
    cfg = SynthConfig(image_size=(160, 120), frames=8, seed=4, distractor_count=1)
    f1, r1 = generate_sequence(cfg)
    f2, r2 = generate_sequence(cfg)
    np.testing.assert_array_equal(f1, f2)
    np.testing.assert_array_equal(r1.boxes, r2.boxes)
    f3, _ = generate_sequence(SynthConfig(image_size=(160, 120), frames=8, seed=5, distractor_count=1))
    assert not np.array_equal(f1, f3)


def test_boxes_match_rendered_coverage():
    seq = render_sequence(SynthConfig(image_size=(160, 120), object_size=11.3, speed=1.7, frames=10, seed=2))
    H, W = seq.target_alpha.shape[1:]
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    for t in range(10):
        a = seq.target_alpha[t].astype(np.float64)
        x, y, w, h = seq.record.annotations[t].box.as_list()
        assert a.sum() == pytest.approx(w * h, rel=2e-3)
        cx, cy = (a * xx).sum() / a.sum(), (a * yy).sum() / a.sum()
        assert abs(cx - (x + w / 2)) < 0.02 and abs(cy - (y + h / 2)) < 0.02


def test_tiny_presets_are_tiny():
    for cfg in preset_configs(5, seed=1, tiny=True, frames=4):
        _, rec = generate_sequence(cfg)
        assert is_tiny(rec)
    for cfg in preset_configs(3, seed=1, tiny=False, frames=4, image_size=(160, 120)):
        _, rec = generate_sequence(cfg)
        assert not is_tiny(rec)


def test_attributes_follow_rendering():
    fast = generate_sequence(SynthConfig(image_size=(320, 240), speed=20, frames=6, seed=0))[1]
    assert fast.attributes.FM
    slow = generate_sequence(SynthConfig(image_size=(320, 240), speed=1, frames=6, seed=0))[1]
    assert not slow.attributes.FM
    dark = generate_sequence(SynthConfig(image_size=(64, 64), illumination_drop=0.4, frames=3))[1]
    assert dark.attributes.IV and dark.attributes.LI
    occ = generate_sequence(SynthConfig(image_size=(64, 64), occluder=(4, 2), occluder_fraction=0.5, frames=8))[1]
    assert occ.attributes.PO and not occ.attributes.FO
    grow = generate_sequence(SynthConfig(image_size=(320, 240), object_size=8, scale_rate=1.04, speed=0,
                                         frames=40))[1]
    assert grow.attributes.SV


def test_frames_are_uint8_and_sized():
    frames, rec = generate_sequence(SynthConfig(image_size=(96, 64), object_size=8, frames=3))
    assert frames.shape == (3, 64, 96, 3) and frames.dtype == np.uint8
    assert rec.image_size == (96, 64)
    np.testing.assert_array_equal(rec.load_frame(2), frames[2])


@pytest.mark.parametrize("kw", [dict(object_size=1), dict(frames=1), dict(motion="teleport"), dict(speed=-1),
                                dict(occluder=(5, 5)), dict(illumination_drop=0), dict(image_size=(4, 4))])
def test_bad_configs(kw):
    with pytest.raises(ValueError):
        SynthConfig(**kw)


def test_config_dict_round_trip():
    cfg = SynthConfig(occluder=(10, 3), image_size=(100, 80), object_size=8)
    assert SynthConfig.from_dict(cfg.to_dict()) == cfg


def test_written_dataset_loads(tmp_path):
    write_dataset(tmp_path, preset_configs(2, seed=0, tiny=True, frames=5), "syn")
    m = load_manifest(tmp_path)
    assert m.names() == ["syn000", "syn001"] and not m.errors
    assert m["syn001"].load_frame(4).shape == (240, 320, 3)
