import numpy as np
import pytest

from litehtr.imaging import (
    AugmentParams,
    ImageTensor,
    ImagingError,
    augment,
    flip_horizontal,
    load_image,
    pad_batch,
    replicate_channels,
    resize,
    save_image,
)


def rand_img(h, w, c=1, seed=0):
    rng = np.random.default_rng(seed)
    return ImageTensor(rng.uniform(0, 1, (h, w, c)).astype(np.float32))


def test_image_validation():
    with pytest.raises(ImagingError):
        ImageTensor(np.zeros((4, 4), dtype=np.float32))
    with pytest.raises(ImagingError):
        ImageTensor(np.full((2, 2, 1), 1.5, dtype=np.float32))
    with pytest.raises(ImagingError):
        ImageTensor(np.full((2, 2, 1), np.nan, dtype=np.float32))


def test_resize_paper_geometry():
    img = rand_img(1024, 1024)
    out = resize(img, 512, 2048)
    assert (out.height, out.width) == (512, 2048)


def test_resize_identity():
    img = rand_img(33, 47)
    out = resize(img, 33, 47)
    np.testing.assert_array_equal(out.data, img.data)


def test_resize_constant():
    img = ImageTensor(np.full((10, 20, 1), 0.5, dtype=np.float32))
    out = resize(img, 37, 13)
    np.testing.assert_allclose(out.data, 0.5, atol=1e-6)


def test_resize_invalid():
    with pytest.raises(ImagingError):
        resize(rand_img(4, 4), 0, 5)


def test_flip_involution():
    img = rand_img(7, 9, 3)
    np.testing.assert_array_equal(flip_horizontal(flip_horizontal(img)).data, img.data)


def test_flip_1x2():
    img = ImageTensor(np.array([[[0.1], [0.9]]], dtype=np.float32))
    np.testing.assert_allclose(flip_horizontal(img).data[0, :, 0], [0.9, 0.1])


def test_flip_symmetric_unchanged():
    half = np.random.default_rng(1).uniform(0, 1, (5, 3, 1)).astype(np.float32)
    img = ImageTensor(np.concatenate([half, half[:, ::-1]], axis=1))
    np.testing.assert_array_equal(flip_horizontal(img).data, img.data)


def test_augment_identity_params():
    img = rand_img(16, 16)
    out = augment(img, AugmentParams.identity(seed=5))
    np.testing.assert_array_equal(out.data, img.data)


def test_augment_deterministic():
    img = rand_img(24, 24)
    p = AugmentParams(seed=42)
    a = augment(img, p)
    b = augment(img, p)
    np.testing.assert_array_equal(a.data, b.data)
    assert (a.height, a.width) == (img.height, img.width)


def test_augment_noise_sigma():
    # constant 0.5 image, identity geometry, fixed sigma: the sample std of
    # out-in should land near the requested sigma
    img = ImageTensor(np.full((64, 64, 1), 0.5, dtype=np.float32))
    p = AugmentParams((0, 0), (0, 0), (1, 1), 0.0, (0.05, 0.05), seed=3)
    out = augment(img, p)
    observed = float(np.std(out.data - img.data))
    assert abs(observed - 0.05) < 0.2 * 0.05


def test_augment_bad_ranges():
    with pytest.raises(ImagingError):
        AugmentParams(rotation_deg=(2.0, -2.0))


def test_pad_batch_maxima():
    a = rand_img(2, 3, seed=1)
    b = rand_img(4, 2, seed=2)
    batch = pad_batch([a, b])
    assert batch.images.shape == (2, 4, 3, 1)
    assert np.all(batch.images[1, :, 2] == 0)  # second image's padded column
    assert np.all(batch.images[0, 2:, :] == 0)  # first image's padded rows
    assert batch.sizes == ((2, 3), (4, 2))


def test_pad_batch_single():
    a = rand_img(5, 6)
    batch = pad_batch([a])
    assert batch.mask.all()
    np.testing.assert_array_equal(batch.images[0], a.data)


def test_pad_batch_mask_conservation():
    imgs = [rand_img(h, w, seed=h * w) for h, w in [(2, 3), (4, 2), (3, 3)]]
    batch = pad_batch(imgs)
    assert batch.mask.sum() == sum(im.height * im.width for im in imgs)


def test_pad_batch_crop_round_trip():
    imgs = [rand_img(h, w, seed=h + w) for h, w in [(8, 3), (4, 9), (6, 6)]]
    batch = pad_batch(imgs)
    for i, im in enumerate(imgs):
        np.testing.assert_array_equal(batch.crop(i).data, im.data)


def test_pad_batch_errors():
    with pytest.raises(ImagingError):
        pad_batch([])
    with pytest.raises(ImagingError):
        pad_batch([rand_img(2, 2, 1), rand_img(2, 2, 3)])


def test_png_round_trip(tmp_path):
    img = ImageTensor((np.arange(12, dtype=np.float32) / 11).reshape(3, 4, 1))
    path = tmp_path / "x.png"
    save_image(img, path)
    back = load_image(path, channels=1)
    np.testing.assert_allclose(back.data, img.data, atol=1 / 255 + 1e-6)


def test_replicate_channels():
    g = rand_img(4, 4, 1)
    rgb = replicate_channels(g, 3)
    assert rgb.channels == 3
    np.testing.assert_array_equal(rgb.data[:, :, 0], g.data[:, :, 0])
