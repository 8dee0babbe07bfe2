import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from afenet import data as D
from afenet.spectral import high_frequency_fraction


# --- netpbm -----------------------------------------------------------------------

def test_image_roundtrip_bytes(tmp_path, rng):
    img = rng.integers(0, 256, (9, 13, 3), dtype=np.uint8)
    D.save_image(tmp_path / "a.ppm", img)
    np.testing.assert_array_equal(D.load_image_u8(tmp_path / "a.ppm"), img)
    D.save_image(tmp_path / "b.ppm", D.load_image(tmp_path / "a.ppm"))
    assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()


def test_load_scales_to_unit(tmp_path):
    img = np.zeros((1, 2, 3), np.uint8)
    img[0, 1] = 255
    D.save_image(tmp_path / "x.ppm", img)
    out = D.load_image(tmp_path / "x.ppm")
    assert out.shape == (3, 1, 2) and out.dtype == np.float32
    assert out[:, 0, 1].tolist() == [1.0, 1.0, 1.0] and out[:, 0, 0].tolist() == [0.0] * 3


def test_label_roundtrip(tmp_path, rng):
    lab = rng.integers(0, 5, (7, 4))
    D.save_label(tmp_path / "l.pgm", lab)
    np.testing.assert_array_equal(D.load_label(tmp_path / "l.pgm"), lab)
    with pytest.raises(ValueError):
        D.save_label(tmp_path / "bad.pgm", np.full((2, 2), 300))


def test_header_comments_accepted(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n# max\n255\n\x01\x02")
    np.testing.assert_array_equal(D.load_label(tmp_path / "c.pgm"), [[1, 2]])


@pytest.mark.parametrize("payload,err", [
    (b"P6\n2 2\n255\n" + b"\0" * 5, D.TruncatedImageError),
    (b"P3\n2 2\n255\n" + b"\0" * 12, D.WrongMagicError),
    (b"P6\n2 x\n255\n" + b"\0" * 12, D.MalformedHeaderError),
    (b"P6\n2 2\n65535\n" + b"\0" * 24, D.MalformedHeaderError),
    (b"P6\n0 2\n255\n", D.MalformedHeaderError),
    (b"P6\n99999999 99999999\n255\n", D.DimensionOverflowError),
    (b"P6\n123456789012 1\n255\n", D.DimensionOverflowError),
    (b"P6\n2 2", D.TruncatedImageError),
    (b"", D.TruncatedImageError),
])
def test_malformed_inputs(tmp_path, payload, err):
    (tmp_path / "bad.ppm").write_bytes(payload)
    with pytest.raises(err):
        D.load_image(tmp_path / "bad.ppm")


def test_truncation_message(tmp_path):
    (tmp_path / "t.ppm").write_bytes(b"P6\n4 4\n255\n" + b"\0" * 10)
    with pytest.raises(D.ImageFormatError, match="truncated"):
        D.load_image(tmp_path / "t.ppm")


@settings(max_examples=200, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.binary(max_size=64), st.integers(0, 40))
def test_fuzz_never_crashes(tmp_path, junk, cut):
    good = b"P6\n3 2\n255\n" + bytes(range(18))
    for payload in (junk, good[:cut], good[:cut] + junk, b"P6" + junk):
        p = tmp_path / "f.ppm"
        p.write_bytes(payload)
        try:
            D.load_image(p)
        except D.ImageFormatError:
            pass


def test_colorize_exact(rng):
    lab = rng.integers(0, 5, (6, 6))
    out = D.colorize(lab)
    for k in range(5):
        assert np.all(out[lab == k] == D.PALETTE[k])
    with pytest.raises(ValueError):
        D.colorize(np.full((2, 2), 5))


# --- tiling ------------------------------------------------------------------------------

def test_tile_exact_division():
    patches = D.tile(np.zeros((3, 1024, 1024), np.float32), np.zeros((1024, 1024), np.int64), 512, 512)
    assert len(patches) == 4


def test_tile_edge_anchoring():
    assert D.tile_origins(100, 64, 64) == [0, 36]
    img = np.arange(3 * 100 * 100, dtype=np.float32).reshape(3, 100, 100)
    lab = np.arange(100 * 100).reshape(100, 100)
    patches = D.tile(img, lab, 64, 64)
    assert len(patches) == 4
    # raster order: second patch is the top-right one anchored at column 36
    np.testing.assert_array_equal(patches[1].label, lab[:64, 36:])
    np.testing.assert_array_equal(patches[3].image, img[:, 36:, 36:])


def test_tile_reassembly(rng):
    img = rng.uniform(size=(3, 96, 64)).astype(np.float32)
    lab = rng.integers(0, 5, (96, 64))
    patches = D.tile(img, lab, 32, 32)
    out = np.zeros_like(lab)
    for smp, (y, x) in zip(patches, [(y, x) for y in range(0, 96, 32) for x in range(0, 64, 32)]):
        out[y:y + 32, x:x + 32] = smp.label
    np.testing.assert_array_equal(out, lab)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.data())
def test_tile_coverage(h, w, draw):
    patch = draw.draw(st.integers(1, min(h, w)))
    # a stride wider than the patch skips pixels by construction
    stride = draw.draw(st.integers(1, patch))
    seen = np.zeros((h, w), bool)
    for y in D.tile_origins(h, patch, stride):
        for x in D.tile_origins(w, patch, stride):
            assert y + patch <= h and x + patch <= w
            seen[y:y + patch, x:x + patch] = True
    assert seen.all()


def test_tile_errors():
    with pytest.raises(ValueError):
        D.tile_origins(10, 11, 1)
    with pytest.raises(ValueError):
        D.tile_origins(10, 5, 0)


# --- synthetic corpora ----------------------------------------------------------------------

def test_synth_deterministic():
    a = D.synth_dataset(D.SynthSpec(seed=3, count=6))
    b = D.synth_dataset(D.SynthSpec(seed=3, count=6))
    assert all(x.image.tobytes() == y.image.tobytes() and x.label.tobytes() == y.label.tobytes()
               for x, y in zip(a, b))
    c = D.synth_dataset(D.SynthSpec(seed=4, count=6))
    assert any(x.image.tobytes() != y.image.tobytes() for x, y in zip(a, c))


def test_urban_richer_in_high_frequencies():
    urban = [high_frequency_fraction(s.image) for s in D.synth_kind("urban", 32, 0)]
    rural = [high_frequency_fraction(s.image) for s in D.synth_kind("rural", 32, 0)]
    assert np.mean(urban) > np.mean(rural)


def test_labels_valid_and_geometry():
    for kind in ("urban", "rural"):
        for smp in D.synth_kind(kind, 8, 1):
            assert smp.label.min() >= 0 and smp.label.max() < len(D.CLASS_NAMES)
            assert smp.image.min() >= 0 and smp.image.max() <= 1
    urban = np.concatenate([s.label.ravel() for s in D.synth_kind("urban", 8, 1)])
    rural = np.concatenate([s.label.ravel() for s in D.synth_kind("rural", 8, 1)])
    assert set(np.unique(urban)) <= {0, 1, 2} and set(np.unique(rural)) <= {0, 3, 4}


def test_default_corpus_histogram_non_degenerate():
    ds = D.synth_dataset(D.SynthSpec())
    assert len(ds) == 64
    h = np.bincount(np.concatenate([s.label.ravel() for s in ds]), minlength=5)
    assert np.all(h / h.sum() >= 0.01)


def test_synth_spec_validation():
    with pytest.raises(ValueError):
        D.SynthSpec(urban_fraction=1.5)


def test_urban_fraction_extremes():
    assert {s.kind for s in D.synth_dataset(D.SynthSpec(count=5, urban_fraction=1.0))} == {"urban"}
    assert {s.kind for s in D.synth_dataset(D.SynthSpec(count=5, urban_fraction=0.0))} == {"rural"}


def test_dataset_dir_roundtrip(tmp_path):
    ds = D.synth_dataset(D.SynthSpec(seed=1, count=3, size=32))
    D.write_dataset(tmp_path, ds)
    lines = (tmp_path / "manifest.txt").read_text().splitlines()
    assert lines[0].split()[:2] == ["0000", ds[0].kind]
    back = D.read_dataset(tmp_path)
    for a, b in zip(ds, back):
        np.testing.assert_array_equal(a.label, b.label)
        assert np.max(np.abs(a.image - b.image)) <= 0.5 / 255 + 1e-6
        assert (a.kind, a.seed) == (b.kind, b.seed)


def test_empty_dataset_dir(tmp_path):
    D.write_dataset(tmp_path, [])
    assert (tmp_path / "manifest.txt").read_text() == ""
    assert D.read_dataset(tmp_path) == []
    with pytest.raises(FileNotFoundError):
        D.read_dataset(tmp_path / "nope")


def test_sample_shape_mismatch():
    with pytest.raises(ValueError):
        D.Sample(np.zeros((3, 4, 4)), np.zeros((4, 5), np.int64))
