"""Shapes dataset, folder ingestion, and the kNN probe."""

import numpy as np
import pytest

from maskcluster import data as D
from maskcluster.encoder import EncoderConfig, init_encoder_params


TINY = EncoderConfig(image_size=16, patch_size=4, embed_dim=8, depth=1,
                     heads=2, mlp_ratio=2)


def tiny_params(rng):
    enc = init_encoder_params(TINY, rng, requires_grad=False)
    return {f"teacher.enc.{k}": t for k, t in enc.items()}


def test_make_shapes_properties():
    images, labels = D.make_shapes(64, 32, seed=0)
    assert images.shape == (64, 3, 32, 32)
    assert images.min() >= 0.0 and images.max() <= 1.0
    assert labels.min() >= 0 and labels.max() <= 9
    # deterministic
    again, labels2 = D.make_shapes(64, 32, seed=0)
    np.testing.assert_array_equal(images, again)
    np.testing.assert_array_equal(labels, labels2)


def test_shapes_classes_are_visually_distinct():
    # red vs blue classes must differ in channel balance
    images, labels = D.make_shapes(400, 32, seed=1)
    red = images[labels < 5].mean(axis=(0, 2, 3))
    blue = images[labels >= 5].mean(axis=(0, 2, 3))
    assert red[0] > red[2] and blue[2] > blue[0]


def test_load_synthetic_shuffles_deterministically():
    spec = D.DatasetSpec(n=32, seed=3)
    a_img, a_lab = D.load_dataset(spec)
    b_img, b_lab = D.load_dataset(spec)
    np.testing.assert_array_equal(a_img, b_img)
    np.testing.assert_array_equal(a_lab, b_lab)
    with pytest.raises(D.IngestionError):
        D.load_dataset(D.DatasetSpec(source="synthetic:nope"))


def test_folder_roundtrip(tmp_path):
    D.write_shapes_dataset(str(tmp_path), n=24, size=16, seed=0)
    spec = D.DatasetSpec(source=str(tmp_path), image_size=16, seed=0)
    images, labels = D.load_dataset(spec)
    assert images.shape == (24, 3, 16, 16)
    assert len(np.unique(labels)) > 1


def test_folder_skips_undecodable_files(tmp_path, caplog):
    D.write_shapes_dataset(str(tmp_path), n=12, size=16, seed=0)
    junk = tmp_path / sorted(tmp_path.iterdir())[0].name / "broken.png"
    junk.write_bytes(b"this is not an image")
    spec = D.DatasetSpec(source=str(tmp_path), image_size=16, seed=0)
    with caplog.at_level("WARNING"):
        images, _ = D.load_dataset(spec)
    assert images.shape[0] == 12
    assert any("broken.png" in r.getMessage() for r in caplog.records)


def test_folder_errors(tmp_path):
    with pytest.raises(D.IngestionError):
        D.load_dataset(D.DatasetSpec(source=str(tmp_path / "missing")))
    empty_root = tmp_path / "root"
    (empty_root / "classA").mkdir(parents=True)
    (empty_root / "classA" / "bad.png").write_bytes(b"nope")
    with pytest.raises(D.IngestionError):
        D.load_dataset(D.DatasetSpec(source=str(empty_root)))


def test_embed_images_normalized(rng):
    params = tiny_params(rng)
    images = rng.uniform(size=(7, 3, 16, 16))
    emb = D.embed_images(params, TINY, images, batch=3)
    assert emb.shape == (7, TINY.embed_dim)
    np.testing.assert_allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-10)


def test_knn_probe_bounds_and_validation(rng):
    params = tiny_params(rng)
    images, labels = D.make_shapes(60, 16, seed=2)
    acc = D.knn_probe(params, TINY, images[:40], labels[:40],
                      images[40:], labels[40:], k=5)
    assert 0.0 <= acc <= 1.0
    with pytest.raises(ValueError):
        D.knn_probe(params, TINY, images[:4], labels[:4],
                    images[40:], labels[40:], k=5)


def test_knn_probe_perfect_on_duplicated_train_point(rng):
    # querying with exact copies of train images must be classified right
    params = tiny_params(rng)
    images, labels = D.make_shapes(30, 16, seed=4)
    acc = D.knn_probe(params, TINY, images, labels, images[:10], labels[:10],
                      k=1)
    assert acc == 1.0
