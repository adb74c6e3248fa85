import sys
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

sys.path.append(str(Path(__file__).resolve().parents[1]))

from nightforge import enhance, transfer
from nightforge.errors import ParameterError
from nightforge.imgcore import Image
from nightforge.transfer import DarkenConfig

DEGENERATE = DarkenConfig(gamma_range=(1.0, 1.0), scale_range=(1.0, 1.0), sigma_read=0.0, sigma_shot=0.0)


def _bright_fixture(seed=0, width=40, height=30):
    rng = np.random.default_rng(seed)
    return Image(rng.uniform(0.2, 0.8, size=(3, height, width)))


def test_darken_identity_and_arithmetic():
    img = _bright_fixture()
    np.testing.assert_array_equal(transfer.darken(img, 1.0, 1.0).data, img.data)
    quarter = transfer.darken(Image.full(2, 2, 0.25), 2.0, 1.0)
    np.testing.assert_allclose(quarter.data, 0.0625)


def test_darken_never_brightens_and_is_monotone():
    ramp = Image(np.linspace(0.0, 1.0, 50).reshape(1, 1, 50))
    out = transfer.darken(ramp, 2.7, 0.3)
    assert np.all(out.data <= ramp.data)
    assert np.all(np.diff(out.data[0, 0]) >= 0.0)


def test_darken_rejects_invalid_parameters():
    img = Image.full(2, 2, 0.5)
    with pytest.raises(ParameterError):
        transfer.darken(img, 0.5, 0.5)
    with pytest.raises(ParameterError):
        transfer.darken(img, 2.0, 0.0)
    with pytest.raises(ParameterError):
        transfer.darken(img, 2.0, 1.5)


def test_darken_config_validates_ranges():
    with pytest.raises(ValidationError):
        DarkenConfig(gamma_range=(0.5, 2.0))
    with pytest.raises(ValidationError):
        DarkenConfig(scale_range=(0.4, 0.2))
    with pytest.raises(ValidationError):
        DarkenConfig(sigma_read=-0.1)


def test_zero_noise_is_identity():
    img = _bright_fixture()
    rng, _ = transfer.derive_stream(0, 0)
    out = transfer.add_noise(img, DarkenConfig(sigma_read=0.0, sigma_shot=0.0), rng)
    np.testing.assert_array_equal(out.data, img.data)


def test_read_noise_std_on_black_image():
    black = Image(np.zeros((1, 1000, 1000)))
    rng, _ = transfer.derive_stream(0, 0)
    noise = transfer.sample_noise(black, DarkenConfig(sigma_read=0.02, sigma_shot=0.5), rng)
    assert noise.shape == (1, 1000, 1000)
    assert abs(noise.std() - 0.02) <= 0.02 * 0.02


def test_noise_draw_order_is_row_major_channel_minor():
    img = Image(np.zeros((3, 2, 2)))
    cfg = DarkenConfig(sigma_read=1.0, sigma_shot=0.0)
    rng, stream_seed = transfer.derive_stream(4, 2)
    noise = transfer.sample_noise(img, cfg, rng)
    flat = np.random.default_rng(stream_seed).normal(size=12)
    np.testing.assert_allclose(noise[:, 0, 0], flat[0:3])
    np.testing.assert_allclose(noise[:, 0, 1], flat[3:6])


def test_derive_stream_depends_only_on_seed_and_index():
    _, a = transfer.derive_stream(7, 3)
    _, b = transfer.derive_stream(7, 3)
    _, c = transfer.derive_stream(7, 4)
    assert a == b
    assert a != c
    with pytest.raises(ParameterError):
        transfer.derive_stream(-1, 0)


def test_pipeline_is_deterministic():
    img = _bright_fixture(seed=1)
    first = transfer.transfer_pipeline(img, DarkenConfig(), image_index=5, seed=11)
    second = transfer.transfer_pipeline(img, DarkenConfig(), image_index=5, seed=11)
    np.testing.assert_array_equal(first.image.data, second.image.data)
    assert (first.gamma, first.scale) == (second.gamma, second.scale)


def test_pipeline_samples_within_ranges_and_outputs_unit_range():
    img = _bright_fixture(seed=2)
    cfg = DarkenConfig()
    for index in range(5):
        result = transfer.transfer_pipeline(img, cfg, image_index=index)
        assert 2.0 <= result.gamma <= 3.5
        assert 0.1 <= result.scale <= 0.35
        assert result.image.linear_range
        assert 0.0 <= result.image.data.min() and result.image.data.max() <= 1.0


def test_degenerate_pipeline_collapses_to_msrcr():
    img = _bright_fixture(seed=3)
    result = transfer.transfer_pipeline(img, DEGENERATE, image_index=0)
    np.testing.assert_array_equal(result.image.data, enhance.msrcr(img).data)


def test_default_darkening_pulls_bright_images_below_threshold():
    img = _bright_fixture(seed=4)
    for index in range(10):
        result = transfer.transfer_pipeline(img, DarkenConfig(), image_index=index)
        assert result.dark.mean() < 0.15


def test_config_seed_overrides_pipeline_seed():
    img = _bright_fixture(seed=5)
    pinned = DarkenConfig(seed=9)
    a = transfer.transfer_pipeline(img, pinned, image_index=1, seed=0)
    b = transfer.transfer_pipeline(img, pinned, image_index=1, seed=123)
    assert a.stream_seed == b.stream_seed


def test_write_manifest(tmp_path):
    img = _bright_fixture(seed=6, width=16, height=16)
    results = [
        (f"img_{i}.png", transfer.transfer_pipeline(img, DarkenConfig(), image_index=i)) for i in range(3)
    ]
    target = transfer.write_manifest(tmp_path / "manifest.tsv", results)
    lines = target.read_text().splitlines()
    assert len(lines) == 3
    path, gamma, scale, seed = lines[1].split("\t")
    assert path == "img_1.png"
    assert float(gamma) == pytest.approx(results[1][1].gamma, abs=1e-6)
    assert float(scale) == pytest.approx(results[1][1].scale, abs=1e-6)
    assert int(seed) == results[1][1].stream_seed
