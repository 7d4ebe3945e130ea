import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from classfool.analysis import report
from classfool.attack import FoolConfig, NormBound, Perturbation, filter_nonsource, perturb_and_clip, run_fool_attack
from classfool.errors import (
    CountMismatchError,
    FormatError,
    HeaderError,
    InputError,
    MagicError,
    TruncatedError,
    VersionError,
)
from classfool.explain import GaussianSampler
from classfool.formats import (
    classifier_bytes,
    classifier_from_bytes,
    export_adversarial,
    export_visualization,
    idx_bytes,
    idx_from_bytes,
    load_classifier,
    load_dataset,
    load_idx,
    load_perturbation,
    load_sampler,
    perturbation_bytes,
    perturbation_from_bytes,
    pnm_bytes,
    pnm_from_bytes,
    read_mask,
    round_half_away,
    sampler_bytes,
    sampler_from_bytes,
    save_classifier,
    save_idx_dataset,
    save_perturbation,
    save_sampler,
    write_idx,
    write_pnm,
)
from classfool.nn import LabeledDataset, forward, reference_architecture
from oracles import random_net, rng_for
from test_attack import attack_setup

# 10.0 and 1.0 as little-endian binary64
F64_TEN = bytes.fromhex("0000000000002440")
F64_ONE = bytes.fromhex("000000000000f03f")
U32 = {n: n.to_bytes(4, "little") for n in range(8)}


def any_floats():
    return st.floats(allow_nan=True, allow_infinity=True, allow_subnormal=True, width=64)


# ---------------------------------------------------------------- PFPT

def test_pfpt_known_bytes():
    pert = Perturbation(np.ones((1, 1, 1)), NormBound("linf", 10.0))
    expected = (b"PFPT" + U32[1] + U32[0] + F64_TEN + U32[3] + U32[1] * 3 + F64_ONE)
    assert perturbation_bytes(pert) == expected
    back = perturbation_from_bytes(expected)
    assert back.bound == NormBound("linf", 10.0) and back.p.tobytes() == pert.p.tobytes()


@pytest.mark.parametrize("mode,tag", [("linf", 0), ("l2", 1), ("unbounded", 2)])
def test_pfpt_mode_tags(mode, tag):
    data = perturbation_bytes(Perturbation(np.zeros((2, 2, 1)), NormBound(mode, 3.0)))
    assert data[8:12] == U32[tag]


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, array_shapes(min_dims=3, max_dims=3, max_side=5), elements=any_floats()),
       st.sampled_from(["linf", "l2", "unbounded"]), st.floats(0.001, 1e6))
def test_pfpt_round_trip_bit_exact(p, mode, eta):
    pert = Perturbation(p, NormBound(mode, eta))
    back = perturbation_from_bytes(perturbation_bytes(pert))
    assert back.p.tobytes() == p.tobytes() and back.p.shape == p.shape
    assert back.bound.mode == mode and np.float64(back.bound.eta).tobytes() == np.float64(eta).tobytes()
    assert perturbation_bytes(back) == perturbation_bytes(pert)


def test_pfpt_file_round_trip(tmp_path):
    p = rng_for(80).normal(size=(28, 28, 1))
    save_perturbation(tmp_path / "p.pfpt", Perturbation(p, NormBound("l2", 2000.0)))
    back = load_perturbation(tmp_path / "p.pfpt")
    assert back.p.tobytes() == p.tobytes()
    assert [f.name for f in tmp_path.iterdir()] == ["p.pfpt"]


def malformed(data):
    """Each corruption paired with the error it must raise."""
    yield b"XXXX" + data[4:], MagicError
    yield data[:4] + U32[2] + data[8:], VersionError
    yield data + b"\0", HeaderError
    for cut in range(len(data)):
        yield data[:cut], TruncatedError


def test_pfpt_malformed():
    data = perturbation_bytes(Perturbation(np.ones((2, 1, 1)), NormBound("linf", 10.0)))
    for bad, err in malformed(data):
        with pytest.raises(err):
            perturbation_from_bytes(bad)
    with pytest.raises(HeaderError):
        perturbation_from_bytes(data[:8] + U32[7] + data[12:])


def test_error_classes_are_distinct():
    kinds = [MagicError, VersionError, TruncatedError, HeaderError, CountMismatchError]
    assert all(issubclass(k, FormatError) for k in kinds)
    assert len({k for k in kinds}) == 5
    for a in kinds:
        for b in kinds:
            assert a is b or not issubclass(a, b)


# ---------------------------------------------------------------- PFNN

def test_pfnn_header_bytes():
    clf = reference_architecture(seed=3)
    data = classifier_bytes(clf)
    assert data[:4] == b"PFNN"
    assert data[4:8] == U32[1]
    assert data[8:12] == (10).to_bytes(4, "little")
    assert data[12:24] == (28).to_bytes(4, "little") * 2 + U32[1]


@pytest.mark.parametrize("k", range(10))
def test_pfnn_round_trip_bit_exact(k, tmp_path):
    clf = random_net(rng_for(81, k))
    path = tmp_path / "m.pfnn"
    save_classifier(path, clf)
    back = load_classifier(path)
    assert classifier_bytes(back) == path.read_bytes()
    assert back.input_shape == clf.input_shape and back.num_classes == clf.num_classes
    assert back.conv_base_end == clf.conv_base_end
    for a, b in zip(clf.layers, back.layers):
        assert a.kind == b.kind
        if a.kind in ("conv2d", "dense"):
            assert a.weight.tobytes() == b.weight.tobytes() and a.bias.tobytes() == b.bias.tobytes()
    x = rng_for(82, k).uniform(0, 255, (3,) + clf.input_shape)
    assert forward(back, x).tobytes() == forward(clf, x).tobytes()


def test_pfnn_reference_architecture_round_trip():
    clf = reference_architecture(seed=5)
    back = classifier_from_bytes(classifier_bytes(clf))
    assert classifier_bytes(back) == classifier_bytes(clf)


def test_pfnn_malformed():
    data = classifier_bytes(random_net(rng_for(83), (4, 4, 1), 3))
    for bad, err in malformed(data):
        with pytest.raises(err):
            classifier_from_bytes(bad)
    # unknown layer tag right after the fixed header
    with pytest.raises(HeaderError):
        classifier_from_bytes(data[:32] + U32[7] + data[36:])


# ---------------------------------------------------------------- PFGS

def test_pfgs_round_trip(tmp_path):
    sampler = GaussianSampler.fit(rng_for(84).uniform(0, 255, (10, 8, 8, 1)))
    save_sampler(tmp_path / "g.pfgs", sampler)
    back = load_sampler(tmp_path / "g.pfgs")
    assert back.mean.tobytes() == sampler.mean.tobytes() and back.cov.tobytes() == sampler.cov.tobytes()
    assert (back.factor, back.jitter, back.input_shape) == (sampler.factor, sampler.jitter, sampler.input_shape)
    assert sampler_bytes(back) == (tmp_path / "g.pfgs").read_bytes()


def test_pfgs_malformed():
    data = sampler_bytes(GaussianSampler.fit(rng_for(85).uniform(0, 255, (4, 4, 4, 1))))
    for bad, err in malformed(data):
        with pytest.raises(err):
            sampler_from_bytes(bad)


# ---------------------------------------------------------------- IDX

def test_idx_known_bytes():
    data = bytes.fromhex("00000803" "00000001" "00000002" "00000002") + bytes(4)
    assert idx_bytes(np.zeros((1, 2, 2), np.uint8)) == data
    np.testing.assert_array_equal(idx_from_bytes(data), np.zeros((1, 2, 2)))
    assert idx_from_bytes(bytes.fromhex("00000801" "00000001" "ff"))[0] == 255
    # dimension sizes are big-endian
    big = idx_bytes(np.zeros(258, np.uint8))
    assert big[4:8] == bytes.fromhex("00000102")


def test_idx_loads_pixels_as_reals(tmp_path):
    write_idx(tmp_path / "i.idx", np.array([[[0, 255], [7, 128]]], np.uint8))
    write_idx(tmp_path / "l.idx", np.array([3], np.uint8))
    ds = load_idx(tmp_path / "i.idx", tmp_path / "l.idx")
    assert ds.images.dtype == np.float64 and ds.images.shape == (1, 2, 2, 1)
    np.testing.assert_array_equal(ds.images[0, :, :, 0], [[0.0, 255.0], [7.0, 128.0]])
    assert ds.labels.tolist() == [3]


@settings(max_examples=100, deadline=None)
@given(arrays(np.uint8, array_shapes(min_dims=1, max_dims=4, min_side=0, max_side=6)))
def test_idx_round_trip(a):
    back = idx_from_bytes(idx_bytes(a))
    assert back.shape == a.shape and back.tobytes() == a.tobytes()


def test_idx_malformed(tmp_path):
    good = idx_bytes(np.arange(6, dtype=np.uint8).reshape(1, 2, 3))
    with pytest.raises(HeaderError):
        idx_from_bytes(b"\x01" + good[1:])
    with pytest.raises(HeaderError):
        idx_from_bytes(good[:2] + b"\x0d" + good[3:])
    with pytest.raises(HeaderError):
        idx_from_bytes(good + b"\0")
    with pytest.raises(HeaderError):
        idx_from_bytes(bytes.fromhex("00000800"))
    for cut in range(len(good)):
        with pytest.raises(TruncatedError):
            idx_from_bytes(good[:cut])
    write_idx(tmp_path / "i.idx", np.zeros((2, 2, 2), np.uint8))
    write_idx(tmp_path / "l.idx", np.zeros(3, np.uint8))
    with pytest.raises(CountMismatchError):
        load_idx(tmp_path / "i.idx", tmp_path / "l.idx")
    write_idx(tmp_path / "l.idx", np.array([0, 12], np.uint8))
    with pytest.raises(InputError):
        load_idx(tmp_path / "i.idx", tmp_path / "l.idx", num_classes=10)


def test_idx_dataset_round_trip(tmp_path):
    rng = rng_for(86)
    ds = LabeledDataset(rng.integers(0, 256, (5, 4, 4, 1)).astype(float), rng.integers(0, 10, 5))
    save_idx_dataset(tmp_path / "d", ds)
    back = load_dataset(tmp_path / "d")
    assert back.images.tobytes() == ds.images.tobytes() and back.labels.tolist() == ds.labels.tolist()
    with pytest.raises(InputError):
        save_idx_dataset(tmp_path / "e", LabeledDataset(ds.images + 0.5, ds.labels))


# ---------------------------------------------------------------- PGM / PPM

@settings(max_examples=100, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 6), st.integers(1, 6), st.sampled_from([1, 3]))))
def test_pnm_round_trip(image):
    back = pnm_from_bytes(pnm_bytes(image))
    assert back.tobytes() == image.tobytes() and back.shape == image.shape


def test_pnm_header_and_comments():
    assert pnm_bytes(np.zeros((2, 3), np.uint8)) == b"P5\n3 2\n255\n" + bytes(6)
    data = b"P6 # colour\n1 # width\n 1\n255\n" + bytes([1, 2, 3])
    assert pnm_from_bytes(data).tolist() == [[[1, 2, 3]]]


def test_pnm_malformed():
    with pytest.raises(MagicError):
        pnm_from_bytes(b"P3\n1 1\n255\n0 0 0")
    with pytest.raises(HeaderError):
        pnm_from_bytes(b"P5\n1 1\n65535\n\0\0")
    with pytest.raises(HeaderError):
        pnm_from_bytes(b"P5\nx 1\n255\n\0")
    with pytest.raises(TruncatedError):
        pnm_from_bytes(b"P5\n2 2\n255\n\0\0\0")
    with pytest.raises(TruncatedError):
        pnm_from_bytes(b"P5\n2 2")
    with pytest.raises(InputError):
        pnm_bytes(np.zeros((2, 2, 2), np.uint8))


def test_pnm_directory_dataset(tmp_path):
    for label in (0, 3):
        (tmp_path / str(label)).mkdir()
        for k in range(2):
            write_pnm(tmp_path / str(label) / f"{k}.pgm", np.full((3, 3), 10 * label + k, np.uint8))
    (tmp_path / "notes").mkdir()
    ds = load_dataset(tmp_path)
    assert ds.labels.tolist() == [0, 0, 3, 3]
    assert ds.images[:, 0, 0, 0].tolist() == [0.0, 1.0, 30.0, 31.0]


def test_read_mask(tmp_path):
    m = np.zeros((4, 4), np.uint8)
    m[1, 2] = 7
    write_pnm(tmp_path / "m.pgm", m)
    mask = read_mask(tmp_path / "m.pgm", (4, 4, 3))
    assert mask.shape == (4, 4, 3) and mask.sum() == 3 and np.all(mask[1, 2] == 1)
    with pytest.raises(InputError):
        read_mask(tmp_path / "m.pgm", (5, 5, 1))


# ---------------------------------------------------------------- exports

def test_round_half_away_from_zero():
    np.testing.assert_array_equal(round_half_away([0.5, 1.5, 2.5, -0.5, -1.5, 0.49, -2.51]),
                                  [1, 2, 3, -1, -2, 0, -3])


def test_visualization_examples():
    assert np.all(export_visualization(np.zeros((3, 3, 1))) == 128)
    assert export_visualization(np.array([12.7]))[0] == 255
    assert export_visualization(np.array([-12.8]))[0] == 0
    assert export_visualization(np.array([1e6, -1e6])).tolist() == [255, 0]
    assert export_visualization(np.array([0.25, -0.25])).tolist() == [131, 126]


@settings(max_examples=300, deadline=None)
@given(st.floats(-13, 13), st.floats(-13, 13))
def test_visualization_monotone(a, b):
    lo, hi = sorted((a, b))
    va, vb = export_visualization(np.array([lo, hi]))
    assert va <= vb


def test_adversarial_export():
    s = np.array([[[0.0], [100.0], [255.0]]])
    np.testing.assert_array_equal(export_adversarial(s, 0.0)[..., 0], [[0, 100, 255]])
    p = np.array([[[-10.0], [30.4], [300.0]]])
    np.testing.assert_array_equal(export_adversarial(s, p)[..., 0], [[10, 70, 0]])
    np.testing.assert_array_equal(export_adversarial(s, -p)[..., 0], [[0, 130, 255]])
    rng = rng_for(87)
    s = rng.uniform(0, 255, (5, 5, 1))
    p = rng.normal(0, 50, (5, 5, 1))
    np.testing.assert_array_equal(export_adversarial(s, p), np.floor(perturb_and_clip(s, p) + 0.5).astype(np.uint8))


def test_attack_output_reloaded_gives_same_report(tmp_path):
    clf, ds, _, _ = attack_setup()
    cfg = FoolConfig(target_label=1, source_label=0, bound=NormBound("linf", 40.0), max_iters=30, min_iters=0,
                     eval_every=10)
    pert, _ = run_fool_attack(clf, ds.of_class(0), filter_nonsource(clf, ds.excluding(0), cfg), cfg)
    save_perturbation(tmp_path / "p.pfpt", pert)
    save_classifier(tmp_path / "m.pfnn", clf)
    a = report(clf, pert.p, ds, 0, 1)
    b = report(load_classifier(tmp_path / "m.pfnn"), load_perturbation(tmp_path / "p.pfpt").p, ds, 0, 1)
    assert a == b
