import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cskn import data as dio
from cskn.data import DataFormatError, Dataset, TruncatedFileError
from cskn.kernels import ContractError


# -- LIBSVM ----------------------------------------------------------------------

def test_parse_single_line():
    ds = dio.parse_libsvm("+1 1:0.5 3:2.0\n")
    np.testing.assert_array_equal(ds.features, [[0.5, 0.0, 2.0]])
    assert ds.label_map == {1: 0}
    assert ds.labels.tolist() == [0]


def test_parse_remaps_sorted_and_overrides_dimension():
    ds = dio.parse_libsvm("7 2:1\n-1 1:3\n3\n", n_features=4)
    assert ds.features.shape == (3, 4)
    assert ds.label_map == {-1: 0, 3: 1, 7: 2}
    assert ds.labels.tolist() == [2, 0, 1]
    assert ds.n_classes == 3


@pytest.mark.parametrize("text, where", [
    ("", "no samples"),
    ("# only a comment\n\n", "no samples"),
    ("1 1:0.5\n2 3:x\n", "line 2"),
    ("1 2:0.5 1:1.0\n", "line 1"),
    ("1 1:1 1:2\n", "ascending"),
    ("1 0:1\n", "line 1"),
    ("abc 1:1\n", "line 1"),
    ("1 1-2\n", "line 1"),
])
def test_parse_errors(text, where):
    with pytest.raises(DataFormatError, match=where):
        dio.parse_libsvm(text)


def test_parse_index_beyond_dimension():
    with pytest.raises(DataFormatError):
        dio.parse_libsvm("1 5:1\n", n_features=3)


def test_parse_reuses_label_map():
    train = dio.parse_libsvm("a 1:1\n".replace("a", "2") + "5 1:2\n")
    test = dio.parse_libsvm("5 1:1\n", label_map=train.label_map)
    assert test.labels.tolist() == [1]
    with pytest.raises(DataFormatError):
        dio.parse_libsvm("9 1:1\n", label_map=train.label_map)


def test_parse_regression():
    ds = dio.parse_libsvm("0.25 1:1\n-3 2:1\n", task="regression")
    assert ds.task == "regression"
    np.testing.assert_array_equal(ds.labels, [0.25, -3.0])


def test_load_libsvm(tmp_path):
    p = tmp_path / "toy.libsvm"
    p.write_text("1 1:1 2:2\n2 2:3\n")
    ds = dio.load_libsvm(p)
    assert ds.features.shape == (2, 2)
    assert str(p) in ds.provenance


values = st.floats(-1e6, 1e6, allow_nan=False).filter(lambda v: v != 0)


@given(st.lists(st.tuples(st.sampled_from([-1, 1, 4, 9]),
                          st.dictionaries(st.integers(0, 7), values, max_size=8)),
                min_size=1, max_size=12))
@settings(max_examples=80)
def test_libsvm_roundtrip(rows):
    X = np.zeros((len(rows), 8))
    for r, (_, entries) in enumerate(rows):
        for i, v in entries.items():
            X[r, i] = v
    raw = [lab for lab, _ in rows]
    label_map = {lab: k for k, lab in enumerate(sorted(set(raw)))}
    ds = Dataset(X, np.array([label_map[l] for l in raw]), label_map=label_map)
    back = dio.parse_libsvm(dio.serialize_libsvm(ds), n_features=8)
    np.testing.assert_array_equal(back.features, X)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.label_map == label_map


def test_dataset_label_range():
    with pytest.raises(ContractError):
        Dataset(np.zeros((2, 1)), np.array([0, 3]), n_classes=2)
    with pytest.raises(ContractError):
        Dataset(np.zeros((2, 1)), np.array([0]))


# -- IDX ------------------------------------------------------------------------

def idx_pair(n=3, h=2, w=2, labels=None, seed=0):
    px = np.random.default_rng(seed).integers(0, 256, (n, h, w), dtype=np.uint8)
    labels = np.arange(n) % 10 if labels is None else np.asarray(labels)
    img = struct.pack(">IIII", 0x803, n, h, w) + px.tobytes()
    lab = struct.pack(">II", 0x801, n) + labels.astype(np.uint8).tobytes()
    return img, lab, px


def test_read_idx():
    img, lab, px = idx_pair(labels=[9, 0, 3])
    ds = dio.read_idx(io.BytesIO(img), io.BytesIO(lab))
    assert ds.features.shape == (3, 2, 2, 1)
    np.testing.assert_array_equal(ds.features[..., 0], px / 255.0)
    assert ds.labels.tolist() == [9, 0, 3]
    assert ds.normalization.mode == "pixel"
    assert ds.features.min() >= 0 and ds.features.max() <= 1


def test_idx_roundtrip():
    img, lab, _ = idx_pair(n=5, h=3, w=4)
    ds = dio.read_idx(io.BytesIO(img), io.BytesIO(lab))
    assert dio.write_idx(ds) == (img, lab)


@pytest.mark.parametrize("which", ["image", "label"])
def test_idx_bad_magic(which):
    img, lab, _ = idx_pair()
    if which == "image":
        img = struct.pack(">I", 0x801) + img[4:]
    else:
        lab = struct.pack(">I", 0x803) + lab[4:]
    with pytest.raises(DataFormatError, match="magic"):
        dio.read_idx(io.BytesIO(img), io.BytesIO(lab))


@pytest.mark.parametrize("cut", [3, 10, 17, -1])
def test_idx_truncated(cut):
    img, lab, _ = idx_pair()
    with pytest.raises(TruncatedFileError):
        dio.read_idx(io.BytesIO(img[:cut]), io.BytesIO(lab))
    with pytest.raises(TruncatedFileError):
        dio.read_idx(io.BytesIO(img), io.BytesIO(lab[:-1]))


def test_idx_count_mismatch():
    img, _, _ = idx_pair(n=3)
    _, lab, _ = idx_pair(n=4)
    with pytest.raises(DataFormatError, match="count"):
        dio.read_idx(io.BytesIO(img), io.BytesIO(lab))


def test_load_idx_files(tmp_path):
    img, lab, _ = idx_pair()
    (tmp_path / "i").write_bytes(img)
    (tmp_path / "l").write_bytes(lab)
    assert len(dio.load_idx(tmp_path / "i", tmp_path / "l")) == 3


@pytest.mark.slow
def test_mnist_train_shape(mnist):
    train, test = mnist
    assert train.features.shape == (60000, 28, 28, 1)
    assert test.features.shape == (10000, 28, 28, 1)
    assert train.n_classes == 10


@pytest.mark.slow
def test_mnist_stratified_1k(mnist):
    train, _ = mnist
    sub = dio.subsample(train, 1000, seed=0, balanced=True)
    counts = np.bincount(sub.labels, minlength=10)
    assert counts.sum() == 1000
    assert (np.abs(counts - 100) <= 1).all()


# -- subsampling ------------------------------------------------------------------

def make_ds(counts, seed=0):
    y = np.repeat(np.arange(len(counts)), counts)
    X = np.random.default_rng(seed).normal(size=(y.size, 3))
    return Dataset(X, y)


def test_subsample_identity_and_determinism():
    ds = make_ds([10, 5, 5])
    full = dio.subsample(ds, 20, seed=1)
    np.testing.assert_array_equal(np.sort(full.features, axis=0), np.sort(ds.features, axis=0))
    a = dio.subsample(ds, 7, seed=3)
    b = dio.subsample(ds, 7, seed=3)
    assert a.features.tobytes() == b.features.tobytes()
    with pytest.raises(ContractError):
        dio.subsample(ds, 21, seed=0)


@given(st.lists(st.integers(1, 40), min_size=2, max_size=6), st.integers(0, 10**6), st.data())
@settings(max_examples=60, deadline=None)
def test_subsample_stratified_proportions(counts, seed, data):
    ds = make_ds(counts)
    size = data.draw(st.integers(0, len(ds)))
    sub = dio.subsample(ds, size, seed)
    assert len(sub) == size
    got = np.bincount(sub.labels, minlength=len(counts))
    exact = np.array(counts) * size / len(ds)
    assert (np.abs(got - exact) < 1).all()


@given(st.lists(st.integers(1, 40), min_size=2, max_size=6), st.integers(0, 10**6), st.data())
@settings(max_examples=60, deadline=None)
def test_subsample_balanced_counts(counts, seed, data):
    ds = make_ds(counts)
    size = data.draw(st.integers(0, len(ds)))
    got = np.bincount(dio.subsample(ds, size, seed, balanced=True).labels, minlength=len(counts))
    assert got.sum() == size
    assert (got <= counts).all()
    # classes that are not exhausted differ by at most one
    open_ = got[got < np.array(counts)]
    if open_.size:
        assert open_.max() - open_.min() <= 1
        assert open_.min() >= got.max() - 1


def test_subsample_balanced_example():
    ds = make_ds([500, 300, 20])
    got = np.bincount(dio.subsample(ds, 300, seed=0, balanced=True).labels)
    assert got.tolist() == [140, 140, 20]


def test_subsample_unstratified():
    ds = make_ds([50, 50])
    sub = dio.subsample(ds, 30, seed=0, stratified=False)
    assert len(sub) == 30


# -- normalization -----------------------------------------------------------------

def test_unit_norm():
    ds = Dataset(np.array([[0.0, 2.0], [0.0, 0.0], [3.0, 4.0]]), np.array([0, 1, 0]))
    out = dio.normalize(ds, "unit_norm")
    np.testing.assert_allclose(np.linalg.norm(out.features, axis=1), [1.0, 0.0, 1.0])
    assert out.normalization.zero_rows == (1,)


def test_standardize_and_replay():
    rng = np.random.default_rng(0)
    train = Dataset(rng.normal(5, 3, (200, 4)), np.zeros(200, dtype=np.int64))
    const = Dataset(np.hstack([train.features, np.ones((200, 1))]), train.labels)
    out = dio.normalize(train, "standardize")
    assert np.abs(out.features.mean(axis=0)).max() <= 1e-10
    assert np.abs(out.features.std(axis=0) - 1).max() <= 1e-10
    # constant column: std floor keeps values finite
    assert np.isfinite(dio.normalize(const, "standardize").features).all()
    test = Dataset(rng.normal(-2, 1, (50, 4)), np.zeros(50, dtype=np.int64))
    replay = dio.apply_normalization(test, out.normalization)
    expected = (test.features - train.features.mean(axis=0)) / train.features.std(axis=0)
    np.testing.assert_allclose(replay.features, expected, rtol=1e-12)
    restored = dio.Normalization.from_dict(out.normalization.to_dict())
    np.testing.assert_array_equal(dio.apply_normalization(test, restored).features, replay.features)


def test_pixel_and_none():
    raw = Dataset(np.array([[0.0, 255.0]]), np.array([0]))
    np.testing.assert_array_equal(dio.normalize(raw, "pixel").features, [[0.0, 1.0]])
    np.testing.assert_array_equal(dio.normalize(raw, "none").features, raw.features)
    img, lab, _ = idx_pair()
    scaled = dio.read_idx(io.BytesIO(img), io.BytesIO(lab))
    np.testing.assert_array_equal(dio.normalize(scaled, "pixel").features, scaled.features)


def test_unknown_mode():
    with pytest.raises(ContractError):
        dio.normalize(make_ds([2, 2]), "whiten")
