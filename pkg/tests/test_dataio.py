import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from psamsod.dataio import (
    DataError,
    Sample,
    SyntheticSpec,
    augment_flip,
    generate_synthetic,
    load_dataset,
    read_netpbm,
    render_sample,
    stack_batch,
    write_pgm,
    write_ppm,
    write_saliency_pgm,
)


@pytest.fixture(scope="module")
def synth200(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    generate_synthetic(SyntheticSpec(n_samples=200, seed=3), root)
    return root


def test_netpbm_round_trip_and_header(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (5, 7, 3), dtype=np.uint8)
    grey = rng.integers(0, 256, (5, 7), dtype=np.uint8)
    p6 = write_ppm(tmp_path / "a.ppm", img)
    p5 = write_pgm(tmp_path / "a.pgm", grey)
    assert p6.read_bytes().startswith(b"P6\n7 5\n255\n")
    assert np.array_equal(read_netpbm(p6), img)
    assert np.array_equal(read_netpbm(p5), grey)


def test_netpbm_comments_and_rejections(tmp_path):
    f = tmp_path / "c.pgm"
    f.write_bytes(b"P5\n# a comment\n2 1\n255\n" + bytes([3, 250]))
    assert read_netpbm(f).tolist() == [[3, 250]]
    f.write_bytes(b"P5\n2 1\n65535\n" + bytes(4))
    with pytest.raises(DataError):
        read_netpbm(f)
    f.write_bytes(b"P5\n2 2\n255\n" + bytes(3))
    with pytest.raises(DataError):
        read_netpbm(f)
    f.write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(DataError):
        read_netpbm(f)


def test_saliency_pgm_rounds_to_nearest(tmp_path):
    p = np.array([[0.0, 0.5, 1.0, 0.2 / 255]])
    out = read_netpbm(write_saliency_pgm(tmp_path / "s.pgm", p))
    assert out.tolist() == [[0, 128, 255, 0]]


def test_load_round_trip_within_one_level(tmp_path):
    rng = np.random.default_rng(1)
    (tmp_path / "i").mkdir()
    (tmp_path / "m").mkdir()
    img = rng.random((3, 6, 8))
    mask = rng.random((6, 8))
    write_ppm(tmp_path / "i" / "x.ppm", np.rint(img.transpose(1, 2, 0) * 255).astype(np.uint8))
    write_pgm(tmp_path / "m" / "x.pgm", np.rint(mask * 255).astype(np.uint8))
    (s,) = load_dataset(tmp_path / "i", tmp_path / "m")
    assert s.id == "x"
    assert np.abs(s.image - img).max() <= 1 / 255
    assert np.array_equal(s.mask[0], (np.rint(mask * 255) / 255 >= 0.5).astype(float))


def test_load_errors_and_empty(tmp_path):
    (tmp_path / "i").mkdir()
    (tmp_path / "m").mkdir()
    assert load_dataset(tmp_path / "i", tmp_path / "m") == []
    write_ppm(tmp_path / "i" / "a.ppm", np.zeros((4, 4, 3), np.uint8))
    with pytest.raises(DataError, match="a.ppm"):
        load_dataset(tmp_path / "i", tmp_path / "m")
    write_pgm(tmp_path / "m" / "a.pgm", np.zeros((4, 5), np.uint8))
    with pytest.raises(DataError, match="differ"):
        load_dataset(tmp_path / "i", tmp_path / "m")
    with pytest.raises(DataError):
        load_dataset(tmp_path / "nope", tmp_path / "m")


def test_sample_invariants():
    with pytest.raises(DataError):
        Sample(np.zeros((3, 4, 4)), np.zeros((1, 4, 5)))
    with pytest.raises(DataError):
        Sample(np.full((3, 4, 4), 2.0), np.zeros((1, 4, 4)))
    with pytest.raises(DataError):
        Sample(np.zeros((3, 4, 4)), np.full((1, 4, 4), 0.5))


def test_generation_deterministic(tmp_path):
    spec = SyntheticSpec(n_samples=4, seed=11)
    a, b = generate_synthetic(spec, tmp_path / "a"), generate_synthetic(spec, tmp_path / "b")
    files = sorted(p.relative_to(a) for p in a.rglob("*.p?m"))
    assert len(files) == 8
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes()
    c = generate_synthetic(SyntheticSpec(n_samples=4, seed=12), tmp_path / "c")
    assert (a / files[0]).read_bytes() != (c / files[0]).read_bytes()


def test_generated_set_coverage_band_and_binary(synth200):
    ds = load_dataset(synth200 / "images", synth200 / "masks")
    assert len(ds) == 200 and [s.id for s in ds] == sorted(s.id for s in ds)
    cov = np.array([s.mask.mean() for s in ds])
    assert np.all((cov >= 0.05) & (cov <= 0.60))
    assert 0.05 <= cov.mean() <= 0.60
    raw = read_netpbm(synth200 / "masks" / "0000.pgm")
    assert set(np.unique(raw)) <= {0, 255}


def test_loader_determinism(synth200):
    a = load_dataset(synth200 / "images", synth200 / "masks")
    b = load_dataset(synth200 / "images", synth200 / "masks")
    assert [s.id for s in a] == [s.id for s in b]
    assert all(np.array_equal(x.image, y.image) and np.array_equal(x.mask, y.mask) for x, y in zip(a, b))


def test_shapes_stand_out_from_background():
    spec = SyntheticSpec()
    rng = np.random.default_rng(0)
    gaps = []
    for _ in range(20):
        img, mask = render_sample(rng, spec)
        fg, bg = img[mask > 0].astype(float), img[mask == 0].astype(float)
        gaps.append(np.abs(fg.mean(0) - bg.mean(0)).max())
        assert bg.std(0).max() < 40  # low-contrast texture
    assert np.median(gaps) > 50


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(kinds=("hexagon",))
    with pytest.raises(ValueError):
        SyntheticSpec(min_coverage=0.7, max_coverage=0.6)
    with pytest.raises(ValueError):
        SyntheticSpec(shapes_per_image=(0, 2))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_flip_involution_and_counts(seed):
    rng = np.random.default_rng(seed)
    s = Sample(rng.random((3, 5, 6)), (rng.random((1, 5, 6)) > 0.5).astype(float), "s")
    once = augment_flip(s, 0.0)
    twice = augment_flip(once, 0.0)
    assert np.array_equal(twice.image, s.image) and np.array_equal(twice.mask, s.mask)
    assert once.mask.sum() == s.mask.sum()
    assert np.array_equal(once.image, s.image[:, :, ::-1])
    assert augment_flip(s, 0.7) is s


def test_flip_of_symmetric_sample_is_identity():
    half = np.random.default_rng(2).random((3, 4, 3))
    img = np.concatenate([half, half[:, :, ::-1]], axis=2)
    mask = np.zeros((1, 4, 6))
    mask[:, 1:3, 2:4] = 1
    out = augment_flip(Sample(img, mask), 0.1)
    assert np.array_equal(out.image, img) and np.array_equal(out.mask, mask)


def test_stack_batch():
    s = Sample(np.zeros((3, 4, 4)), np.ones((1, 4, 4)))
    x, y = stack_batch([s, s])
    assert x.shape == (2, 3, 4, 4) and y.shape == (2, 1, 4, 4)
