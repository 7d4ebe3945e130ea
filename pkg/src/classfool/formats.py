"""
File formats.

IDX (big-endian, unsigned-byte payloads) for datasets; binary PGM/PPM for
images and masks; three little-endian containers of our own:

PFNN  classifier checkpoint
    b"PFNN" | u32 version | u32 num_classes | u32 H, W, C | u32 conv_base_end
    (0xFFFFFFFF when absent) | u32 n_layers | layers...
    layer: u32 kind (0 conv2d, 1 relu, 2 maxpool2d, 3 flatten, 4 dense), then
    conv2d: u32 stride, u32 padding (0 same, 1 valid), tensor weight, tensor bias
    maxpool2d: u32 size, u32 stride
    dense: tensor weight, tensor bias
PFPT  perturbation
    b"PFPT" | u32 version | u32 mode (0 linf, 1 l2, 2 unbounded) | f64 eta | tensor p
PFGS  Gaussian sampler
    b"PFGS" | u32 version | u32 factor | f64 jitter | u32 H, W, C | tensor mean | tensor cov

tensor: u32 rank | u32 dims[rank] | f64 data[prod(dims)], row-major.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .attack import MODES, NormBound, Perturbation
from .errors import CountMismatchError, HeaderError, InputError, MagicError, TruncatedError, VersionError
from .explain import GaussianSampler
from .nn import Classifier, Conv2D, Dense, Flatten, LabeledDataset, MaxPool2D, ReLU

VERSION = 1
NO_BASE = 0xFFFFFFFF
KIND_TAGS = {"conv2d": 0, "relu": 1, "maxpool2d": 2, "flatten": 3, "dense": 4}
PADDING_TAGS = {"same": 0, "valid": 1}


def atomic_write(path, data):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data, what):
        self.data = memoryview(data)
        self.pos = 0
        self.what = what

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedError(f"{self.what}: truncated at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def f64(self):
        return struct.unpack("<d", self.take(8))[0]

    def tensor(self):
        rank = self.u32()
        dims = struct.unpack(f"<{rank}I", self.take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)

    def header(self, magic):
        got = bytes(self.take(4))
        if got != magic:
            raise MagicError(f"{self.what}: bad magic {got!r}, expected {magic!r}")
        version = self.u32()
        if version != VERSION:
            raise VersionError(f"{self.what}: unsupported version {version}")

    def finish(self):
        if self.pos != len(self.data):
            raise HeaderError(f"{self.what}: {len(self.data) - self.pos} trailing bytes")


def _tensor(a):
    a = np.ascontiguousarray(a, dtype="<f8")
    return struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape) + a.tobytes()


def _u32(*values):
    return struct.pack(f"<{len(values)}I", *values)


# ----------------------------------------------------------------------------
# PFNN
# ----------------------------------------------------------------------------

def classifier_bytes(clf):
    out = [b"PFNN", _u32(VERSION, clf.num_classes, *clf.input_shape),
           _u32(NO_BASE if clf.conv_base_end is None else clf.conv_base_end, len(clf.layers))]
    for layer in clf.layers:
        out.append(_u32(KIND_TAGS[layer.kind]))
        if layer.kind == "conv2d":
            out += [_u32(layer.stride, PADDING_TAGS[layer.padding]), _tensor(layer.weight), _tensor(layer.bias)]
        elif layer.kind == "maxpool2d":
            out.append(_u32(layer.size, layer.stride))
        elif layer.kind == "dense":
            out += [_tensor(layer.weight), _tensor(layer.bias)]
    return b"".join(out)


def classifier_from_bytes(data, what="PFNN"):
    r = _Reader(data, what)
    r.header(b"PFNN")
    num_classes = r.u32()
    shape = (r.u32(), r.u32(), r.u32())
    base = r.u32()
    n_layers = r.u32()
    layers = []
    tags = {v: k for k, v in KIND_TAGS.items()}
    paddings = {v: k for k, v in PADDING_TAGS.items()}
    for _ in range(n_layers):
        tag = r.u32()
        if tag not in tags:
            raise HeaderError(f"{what}: unknown layer tag {tag}")
        kind = tags[tag]
        if kind == "conv2d":
            stride, pad = r.u32(), r.u32()
            if pad not in paddings:
                raise HeaderError(f"{what}: unknown padding tag {pad}")
            layers.append(Conv2D(r.tensor(), r.tensor(), stride, paddings[pad]))
        elif kind == "maxpool2d":
            layers.append(MaxPool2D(r.u32(), r.u32()))
        elif kind == "dense":
            layers.append(Dense(r.tensor(), r.tensor()))
        elif kind == "relu":
            layers.append(ReLU())
        else:
            layers.append(Flatten())
    r.finish()
    try:
        return Classifier(tuple(layers), shape, num_classes, None if base == NO_BASE else base)
    except ValueError as exc:
        raise HeaderError(f"{what}: inconsistent network: {exc}") from exc


def save_classifier(path, clf):
    atomic_write(path, classifier_bytes(clf))


def load_classifier(path):
    return classifier_from_bytes(Path(path).read_bytes(), str(path))


# ----------------------------------------------------------------------------
# PFPT
# ----------------------------------------------------------------------------

def perturbation_bytes(pert):
    return b"PFPT" + _u32(VERSION, MODES.index(pert.bound.mode)) + struct.pack("<d", pert.bound.eta) + _tensor(pert.p)


def perturbation_from_bytes(data, what="PFPT"):
    r = _Reader(data, what)
    r.header(b"PFPT")
    mode = r.u32()
    if mode >= len(MODES):
        raise HeaderError(f"{what}: unknown bound mode {mode}")
    eta = r.f64()
    p = r.tensor()
    r.finish()
    return Perturbation(p, NormBound(MODES[mode], eta))


def save_perturbation(path, pert):
    atomic_write(path, perturbation_bytes(pert))


def load_perturbation(path):
    return perturbation_from_bytes(Path(path).read_bytes(), str(path))


# ----------------------------------------------------------------------------
# PFGS
# ----------------------------------------------------------------------------

def sampler_bytes(s):
    return (b"PFGS" + _u32(VERSION, s.factor) + struct.pack("<d", s.jitter) + _u32(*s.input_shape)
            + _tensor(s.mean) + _tensor(s.cov))


def sampler_from_bytes(data, what="PFGS"):
    r = _Reader(data, what)
    r.header(b"PFGS")
    factor = r.u32()
    jitter = r.f64()
    shape = (r.u32(), r.u32(), r.u32())
    mean = r.tensor()
    cov = r.tensor()
    r.finish()
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1] or cov.shape[0] != mean.size:
        raise HeaderError(f"{what}: covariance does not match the mean")
    return GaussianSampler(mean, cov, shape, factor, jitter)


def save_sampler(path, sampler):
    atomic_write(path, sampler_bytes(sampler))


def load_sampler(path):
    return sampler_from_bytes(Path(path).read_bytes(), str(path))


# ----------------------------------------------------------------------------
# IDX
# ----------------------------------------------------------------------------

def idx_bytes(array):
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise InputError("only unsigned-byte IDX payloads are supported")
    return bytes([0, 0, 0x08, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()


def idx_from_bytes(data, what="IDX"):
    data = memoryview(data)
    if len(data) < 4:
        raise TruncatedError(f"{what}: truncated header")
    if data[0] != 0 or data[1] != 0:
        raise HeaderError(f"{what}: malformed magic {bytes(data[:4])!r}")
    if data[2] != 0x08:
        raise HeaderError(f"{what}: unsupported type code {data[2]:#04x}")
    rank = data[3]
    if rank < 1:
        raise HeaderError(f"{what}: rank must be at least 1")
    if len(data) < 4 + 4 * rank:
        raise TruncatedError(f"{what}: truncated dimension list")
    dims = struct.unpack(f">{rank}I", data[4:4 + 4 * rank])
    n = int(np.prod(dims))
    payload = data[4 + 4 * rank:]
    if len(payload) < n:
        raise TruncatedError(f"{what}: payload has {len(payload)} bytes, header declares {n}")
    if len(payload) > n:
        raise HeaderError(f"{what}: {len(payload) - n} bytes beyond the declared payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims).copy()


def write_idx(path, array):
    atomic_write(path, idx_bytes(array))


def read_idx(path):
    return idx_from_bytes(Path(path).read_bytes(), str(path))


def load_idx(images_path, labels_path, split="train", num_classes=None):
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim not in (3, 4):
        raise HeaderError(f"{images_path}: image file must have rank 3 or 4")
    if labels.ndim != 1:
        raise HeaderError(f"{labels_path}: label file must have rank 1")
    if len(images) != len(labels):
        raise CountMismatchError(f"{len(images)} images but {len(labels)} labels")
    if num_classes is not None and labels.size and labels.max() >= num_classes:
        raise InputError(f"label {labels.max()} out of range for {num_classes} classes")
    if images.ndim == 3:
        images = images[..., None]
    return LabeledDataset(images.astype(np.float64), labels.astype(np.int64), split)


def save_idx_dataset(directory, dataset):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    images = np.asarray(dataset.images)
    if np.any(images != np.round(images)):
        raise InputError("IDX datasets store whole byte values only")
    write_idx(directory / "images.idx", images.astype(np.uint8))
    write_idx(directory / "labels.idx", np.asarray(dataset.labels).astype(np.uint8))


# ----------------------------------------------------------------------------
# PGM / PPM
# ----------------------------------------------------------------------------

def pnm_bytes(image):
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise InputError("PNM export expects bytes")
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[..., 0]
    if image.ndim == 2:
        magic = b"P5"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
    else:
        raise InputError("PNM images must have 1 or 3 channels")
    h, w = image.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + image.tobytes()


def pnm_from_bytes(data, what="PNM"):
    data = bytes(data)
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedError(f"{what}: truncated header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    magic = fields[0]
    if magic not in (b"P5", b"P6"):
        raise MagicError(f"{what}: unsupported magic {magic!r}")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise HeaderError(f"{what}: malformed header") from exc
    if maxval != 255:
        raise HeaderError(f"{what}: maxval must be 255, got {maxval}")
    c = 1 if magic == b"P5" else 3
    n = w * h * c
    payload = data[pos:]
    if len(payload) < n:
        raise TruncatedError(f"{what}: payload has {len(payload)} bytes, expected {n}")
    return np.frombuffer(payload[:n], dtype=np.uint8).reshape(h, w, c).copy()


def write_pnm(path, image):
    atomic_write(path, pnm_bytes(image))


def read_pnm(path):
    return pnm_from_bytes(Path(path).read_bytes(), str(path))


def load_pnm_directory(directory, split="train"):
    """Dataset from ``directory/<label>/*.pgm|*.ppm``."""
    directory = Path(directory)
    images, labels = [], []
    for sub in sorted(p for p in directory.iterdir() if p.is_dir()):
        try:
            label = int(sub.name)
        except ValueError:
            continue
        for f in sorted(sub.iterdir()):
            if f.suffix.lower() in (".pgm", ".ppm"):
                images.append(read_pnm(f))
                labels.append(label)
    if not images:
        raise InputError(f"no PGM/PPM images under {directory}")
    if len({im.shape for im in images}) != 1:
        raise InputError("images in a directory dataset must share one shape")
    return LabeledDataset(np.stack(images).astype(np.float64), np.array(labels), split)


def load_dataset(path, split="train", num_classes=None):
    """IDX pair (``images.idx`` + ``labels.idx``) or a per-label PGM/PPM tree."""
    path = Path(path)
    if (path / "images.idx").exists():
        return load_idx(path / "images.idx", path / "labels.idx", split, num_classes)
    if path.is_dir():
        return load_pnm_directory(path, split)
    raise InputError(f"no dataset at {path}")


# ----------------------------------------------------------------------------
# exports
# ----------------------------------------------------------------------------

def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def to_bytes(x):
    return np.clip(round_half_away(x), 0, 255).astype(np.uint8)


def export_visualization(p, gain=10.0, offset=128.0):
    """Perturbation as an image: ``clamp(round(10 p + 128), 0, 255)``."""
    return to_bytes(gain * np.asarray(p, dtype=np.float64) + offset)


def export_adversarial(sample, p):
    return to_bytes(np.clip(np.asarray(sample, dtype=np.float64) - p, 0, 255))


def read_mask(path, shape=None):
    """PGM/PPM mask; any nonzero byte marks the corrupt region."""
    mask = (read_pnm(path) > 0).astype(np.float64)
    if shape is not None:
        if mask.shape[:2] != tuple(shape[:2]):
            raise InputError(f"mask is {mask.shape[:2]}, expected {tuple(shape[:2])}")
        if mask.shape[2] != shape[2]:
            mask = np.repeat(mask[..., :1], shape[2], axis=2)
    return mask


