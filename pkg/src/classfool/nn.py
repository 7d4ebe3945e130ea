"""
Minimal differentiable image classifier in numpy.

Inputs are single images of shape ``(H, W, C)`` or batches ``(N, H, W, C)``
with pixel values in ``[0, 255]``. Everything runs in float64 so that input
gradients can be checked against finite differences at tight tolerances.

Supported layer kinds: conv2d, relu, maxpool2d, flatten, dense. A classifier
designates a prefix of its layers as the convolutional base; the activations
after that prefix are what perturbation refinement looks at.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, InputError, TrainingError

log = logging.getLogger(__name__)

DYNAMIC_RANGE = (0.0, 255.0)
COLUMN_CHANNELS = 4


# ----------------------------------------------------------------------------
# layers
# ----------------------------------------------------------------------------

def _readonly(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Conv2D:
    """2D convolution. ``weight`` has shape (kh, kw, c_in, c_out)."""

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: str = "same"
    kind = "conv2d"

    def __post_init__(self):
        object.__setattr__(self, "weight", _readonly(self.weight))
        object.__setattr__(self, "bias", _readonly(self.bias))
        if self.weight.ndim != 4 or self.bias.shape != (self.weight.shape[3],):
            raise ConfigError("conv2d weight must be (kh, kw, cin, cout) with bias (cout,)")
        if self.stride < 1:
            raise ConfigError("conv2d stride must be >= 1")
        if self.padding not in ("same", "valid"):
            raise ConfigError(f"unknown padding {self.padding!r}")

    def _pads(self):
        kh, kw = self.weight.shape[:2]
        if self.padding == "valid":
            return (0, 0), (0, 0)
        return (kh // 2, kh - 1 - kh // 2), (kw // 2, kw - 1 - kw // 2)

    def output_shape(self, shape):
        h, w, c = shape
        kh, kw, cin, cout = self.weight.shape
        if c != cin:
            raise ConfigError(f"conv2d expects {cin} input channels, got {c}")
        (pt, pb), (pl, pr) = self._pads()
        ho = (h + pt + pb - kh) // self.stride + 1
        wo = (w + pl + pr - kw) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ConfigError("conv2d kernel larger than its input")
        return (ho, wo, cout)

    def _offsets(self, wp):
        kh, kw = self.weight.shape[:2]
        return [i * wp + j for i in range(kh) for j in range(kw)]

    def forward(self, x):
        # On the flattened padded grid, kernel offset (i, j) is the contiguous
        # row shift i * Wp + j; rows that wrap around are cropped afterwards.
        # Few input channels: stack the shifted slices into one column matrix.
        kh, kw, cin, cout = self.weight.shape
        (pt, pb), (pl, pr) = self._pads()
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        n, hp, wp, _ = xp.shape
        flat = xp.reshape(-1, cin)
        span = len(flat) - (kh - 1) * wp - (kw - 1)
        full = np.zeros((len(flat), cout))
        cols = None
        if cin < COLUMN_CHANNELS:
            cols = np.concatenate([flat[o:o + span] for o in self._offsets(wp)], axis=1)
            full[:span] = cols @ self.weight.reshape(kh * kw * cin, cout)
        else:
            for k, o in enumerate(self._offsets(wp)):
                full[:span] += flat[o:o + span] @ self.weight[k // kw, k % kw]
        s = self.stride
        y = full.reshape(n, hp, wp, cout)[:, :hp - kh + 1:s, :wp - kw + 1:s] + self.bias
        return y, (xp, cols)

    def backward(self, dy, cache, param_grads=False):
        xp, cols = cache
        kh, kw, cin, cout = self.weight.shape
        n, hp, wp, _ = xp.shape
        s = self.stride
        dfull = np.zeros((n, hp, wp, cout))
        dfull[:, :hp - kh + 1:s, :wp - kw + 1:s] = dy
        dfull = dfull.reshape(-1, cout)
        flat = xp.reshape(-1, cin)
        span = len(flat) - (kh - 1) * wp - (kw - 1)
        dflat = np.zeros(flat.shape)
        dw = None
        if cols is not None:
            wmat = self.weight.reshape(kh * kw * cin, cout)
            dcols = dfull[:span] @ wmat.T
            for k, o in enumerate(self._offsets(wp)):
                dflat[o:o + span] += dcols[:, k * cin:(k + 1) * cin]
            if param_grads:
                dw = (cols.T @ dfull[:span]).reshape(self.weight.shape)
        else:
            if param_grads:
                dw = np.zeros(self.weight.shape)
            for k, o in enumerate(self._offsets(wp)):
                i, j = divmod(k, kw)
                dflat[o:o + span] += dfull[:span] @ self.weight[i, j].T
                if param_grads:
                    dw[i, j] = flat[o:o + span].T @ dfull[:span]
        (pt, pb), (pl, pr) = self._pads()
        dx = dflat.reshape(xp.shape)[:, pt:hp - pb, pl:wp - pr, :]
        return dx, ((dw, dy.reshape(-1, cout).sum(axis=0)) if param_grads else None)

    def with_params(self, weight, bias):
        return Conv2D(weight, bias, self.stride, self.padding)


@dataclass(frozen=True, eq=False)
class ReLU:
    kind = "relu"

    def output_shape(self, shape):
        return shape

    def forward(self, x):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, dy, mask, param_grads=False):
        return np.where(mask, dy, 0.0), None


@dataclass(frozen=True, eq=False)
class MaxPool2D:
    size: int = 2
    stride: int = 2
    kind = "maxpool2d"

    def __post_init__(self):
        if self.size < 1 or self.stride < 1:
            raise ConfigError("maxpool2d size and stride must be >= 1")

    def output_shape(self, shape):
        h, w, c = shape
        ho = (h - self.size) // self.stride + 1
        wo = (w - self.size) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ConfigError("maxpool2d window larger than its input")
        return (ho, wo, c)

    def _view(self, x, pos, ho, wo):
        i, j = divmod(pos, self.size)
        s = self.stride
        return x[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :]

    def forward(self, x):
        ho, wo, _ = self.output_shape(x.shape[1:])
        y = self._view(x, 0, ho, wo).copy()
        for pos in range(1, self.size * self.size):
            np.maximum(y, self._view(x, pos, ho, wo), out=y)
        return y, (x, y)

    def backward(self, dy, cache, param_grads=False):
        # gradient goes to the first maximum in scan order, as argmax would
        x, y = cache
        ho, wo = dy.shape[1:3]
        dx = np.zeros(x.shape)
        taken = np.zeros(y.shape, dtype=bool)
        for pos in range(self.size * self.size):
            hit = (self._view(x, pos, ho, wo) == y) & ~taken
            self._view(dx, pos, ho, wo)[...] += np.where(hit, dy, 0.0)
            taken |= hit
        return dx, None


@dataclass(frozen=True, eq=False)
class Flatten:
    kind = "flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], int(np.prod(x.shape[1:]))), x.shape

    def backward(self, dy, shape, param_grads=False):
        return dy.reshape(shape), None


@dataclass(frozen=True, eq=False)
class Dense:
    """Affine layer. ``weight`` has shape (n_in, n_out)."""

    weight: np.ndarray
    bias: np.ndarray
    kind = "dense"

    def __post_init__(self):
        object.__setattr__(self, "weight", _readonly(self.weight))
        object.__setattr__(self, "bias", _readonly(self.bias))
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ConfigError("dense weight must be (n_in, n_out) with bias (n_out,)")

    def output_shape(self, shape):
        if len(shape) != 1 or shape[0] != self.weight.shape[0]:
            raise ConfigError(f"dense expects flat input of size {self.weight.shape[0]}, got {shape}")
        return (self.weight.shape[1],)

    def forward(self, x):
        return x @ self.weight + self.bias, x

    def backward(self, dy, x, param_grads=False):
        grads = (x.T @ dy, dy.sum(axis=0)) if param_grads else None
        return dy @ self.weight.T, grads

    def with_params(self, weight, bias):
        return Dense(weight, bias)


LAYER_KINDS = ("conv2d", "relu", "maxpool2d", "flatten", "dense")


# ----------------------------------------------------------------------------
# classifier
# ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Classifier:
    layers: tuple
    input_shape: tuple
    num_classes: int
    conv_base_end: int | None = None
    shapes: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if len(self.input_shape) != 3:
            raise ConfigError("input_shape must be (H, W, C)")
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(layer.output_shape(shapes[-1]))
        if shapes[-1] != (self.num_classes,):
            raise ConfigError(f"last layer outputs {shapes[-1]}, expected ({self.num_classes},) logits")
        if self.conv_base_end is not None:
            if not 0 < self.conv_base_end <= len(self.layers):
                raise ConfigError("conv_base_end out of range")
            for k in range(1, self.conv_base_end + 1):
                if len(shapes[k]) != 3:
                    raise ConfigError(f"layer {k - 1} inside the convolutional base is not spatial")
        object.__setattr__(self, "shapes", tuple(shapes))

    @property
    def base_shape(self):
        if self.conv_base_end is None:
            raise ConfigError("classifier has no convolutional base")
        return self.shapes[self.conv_base_end]

    def with_layers(self, layers):
        return Classifier(tuple(layers), self.input_shape, self.num_classes, self.conv_base_end)


def reference_architecture(input_shape=(28, 28, 1), num_classes=10, seed=0, widths=(16, 32)):
    """conv3x3 -> relu -> pool2 -> conv3x3 -> relu -> pool2 -> flatten -> dense.

    He-initialised for inputs in [0, 255]; the convolutional base ends after
    the second pool.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    h, w, c = input_shape
    layers = []
    cin = c
    for k, width in enumerate(widths):
        std = np.sqrt(2.0 / (9 * cin))
        if k == 0:
            std /= DYNAMIC_RANGE[1]
        layers += [
            Conv2D(rng.normal(0.0, std, (3, 3, cin, width)), np.zeros(width)),
            ReLU(),
            MaxPool2D(2, 2),
        ]
        cin = width
        h, w = h // 2, w // 2
    n_flat = h * w * cin
    layers += [
        Flatten(),
        Dense(rng.normal(0.0, np.sqrt(1.0 / n_flat), (n_flat, num_classes)), np.zeros(num_classes)),
    ]
    return Classifier(tuple(layers), input_shape, num_classes, conv_base_end=3 * len(widths))


def _as_batch(classifier, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.shape == classifier.input_shape
    if single:
        x = x[None]
    elif x.shape[1:] != classifier.input_shape:
        raise InputError(f"input shape {x.shape} does not match {classifier.input_shape}")
    return x, single


def _run(classifier, x, stop=None, keep_cache=False):
    caches = []
    layers = classifier.layers if stop is None else classifier.layers[:stop]
    for layer in layers:
        x, cache = layer.forward(x)
        if keep_cache:
            caches.append(cache)
    return x, caches


def _backward(classifier, dy, caches, param_grads=False):
    grads = [None] * len(classifier.layers)
    for k in range(len(classifier.layers) - 1, -1, -1):
        dy, grads[k] = classifier.layers[k].backward(dy, caches[k], param_grads)
    return dy, grads


def forward(classifier, x):
    """Logits for one image ``(H, W, C)`` or a batch ``(N, H, W, C)``."""
    xb, single = _as_batch(classifier, x)
    logits, _ = _run(classifier, xb)
    return logits[0] if single else logits


def intermediates(classifier, x):
    """Activations after every layer for a single image (index 0 is the input)."""
    xb, _ = _as_batch(classifier, x)
    out = [xb[0]]
    for layer in classifier.layers:
        xb, _ = layer.forward(xb)
        out.append(xb[0])
    return out


def conv_base_activations(classifier, x):
    if classifier.conv_base_end is None:
        raise ConfigError("classifier has no convolutional base")
    xb, single = _as_batch(classifier, x)
    out, _ = _run(classifier, xb, stop=classifier.conv_base_end)
    return out[0] if single else out


def log_softmax(logits):
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def _check_labels(labels, num_classes):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise InputError(f"label out of range [0, {num_classes})")
    return labels


def cross_entropy(logits, label):
    """-log softmax(logits)[label]; vectorised over leading axes."""
    logits = np.asarray(logits, dtype=np.float64)
    label = _check_labels(label, logits.shape[-1])
    lp = log_softmax(logits)
    if lp.ndim == 1:
        return float(-lp[int(label)])
    return -np.take_along_axis(lp, np.asarray(label).reshape(-1, 1), axis=-1)[:, 0]


def input_gradients(classifier, x, labels):
    """Per-sample gradients of the cross-entropy w.r.t. each input in a batch."""
    xb, single = _as_batch(classifier, x)
    labels = _check_labels(np.broadcast_to(labels, (xb.shape[0],)), classifier.num_classes)
    logits, caches = _run(classifier, xb, keep_cache=True)
    dlogits = softmax(logits)
    dlogits[np.arange(len(labels)), labels] -= 1.0
    dx, _ = _backward(classifier, dlogits, caches)
    return dx[0] if single else dx


def input_gradient(classifier, x, label):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != classifier.input_shape:
        raise InputError(f"input shape {x.shape} does not match {classifier.input_shape}")
    return input_gradients(classifier, x[None], [label])[0]


def predict_with_confidence(classifier, x):
    """(label, confidence); ties go to the lowest class index."""
    xb, single = _as_batch(classifier, x)
    probs = softmax(forward(classifier, xb))
    labels = probs.argmax(axis=1)
    conf = probs[np.arange(len(labels)), labels]
    if single:
        return int(labels[0]), float(conf[0])
    return labels, conf


def predict(classifier, x, batch_size=512):
    xb, single = _as_batch(classifier, x)
    out = [forward(classifier, xb[i:i + batch_size]).argmax(axis=1) for i in range(0, len(xb), batch_size)]
    labels = np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
    return int(labels[0]) if single else labels


def accuracy(classifier, dataset):
    return float(np.mean(predict(classifier, dataset.images) == dataset.labels))


# ----------------------------------------------------------------------------
# data container
# ----------------------------------------------------------------------------

class LabeledDataset:
    """Images ``(N, H, W, C)`` in [0, 255] with integer labels.

    Attack code reads samples only through :meth:`take`, so wrappers can audit
    which samples an algorithm touched.
    """

    def __init__(self, images, labels, split="train"):
        images = np.asarray(images, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if images.ndim != 4:
            raise InputError("images must be (N, H, W, C)")
        if len(images) != len(labels):
            raise InputError(f"{len(images)} images but {len(labels)} labels")
        lo, hi = DYNAMIC_RANGE
        if images.size and (images.min() < lo or images.max() > hi or not np.all(np.isfinite(images))):
            raise InputError("pixel values outside [0, 255]")
        if split not in ("train", "test"):
            raise InputError(f"split must be train or test, got {split!r}")
        self.images = images
        self.labels = labels
        self.split = split

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self):
        return self.images.shape[1:]

    def take(self, indices):
        return self.images[np.asarray(indices, dtype=np.int64)]

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.take(indices), self.labels[indices], self.split)

    def of_class(self, label):
        return self.subset(np.flatnonzero(self.labels == label))

    def excluding(self, *labels):
        return self.subset(np.flatnonzero(~np.isin(self.labels, labels)))


# ----------------------------------------------------------------------------
# toy training
# ----------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.05
    seed: int = 0


def train(classifier, dataset, config=None, test_set=None):
    """Plain mini-batch SGD on softmax cross-entropy.

    Training is carried out on inputs rescaled to [0, 1]; the first layer's
    weights are divided by 255 on the way out so the returned classifier takes
    [0, 255] inputs and computes exactly the trained function.
    Returns ``(classifier, history)``.
    """
    config = config or TrainConfig()
    if len(dataset) == 0:
        raise InputError("training set is empty")
    _check_labels(dataset.labels, classifier.num_classes)
    scale = DYNAMIC_RANGE[1]
    rng = np.random.Generator(np.random.Philox(config.seed))

    first = next(i for i, l in enumerate(classifier.layers) if hasattr(l, "weight"))
    params = []
    for i, layer in enumerate(classifier.layers):
        if hasattr(layer, "weight"):
            w = np.array(layer.weight)
            params.append([w * scale if i == first else w, np.array(layer.bias)])
        else:
            params.append(None)

    def build():
        layers = [l.with_params(*p) if p is not None else l for l, p in zip(classifier.layers, params)]
        return classifier.with_layers(layers)

    x_all = dataset.images / scale
    history = []
    it = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            net = build()
            logits, caches = _run(net, x_all[idx], keep_cache=True)
            loss = cross_entropy(logits, dataset.labels[idx]).mean()
            if not np.isfinite(loss):
                raise TrainingError("non-finite training loss", it)
            dlogits = softmax(logits)
            dlogits[np.arange(len(idx)), dataset.labels[idx]] -= 1.0
            dlogits /= len(idx)
            _, grads = _backward(net, dlogits, caches, param_grads=True)
            for p, g in zip(params, grads):
                if p is not None:
                    p[0] -= config.learning_rate * g[0]
                    p[1] -= config.learning_rate * g[1]
            losses.append(loss)
            it += 1
        out_layers = list(build().layers)
        out_layers[first] = out_layers[first].with_params(params[first][0] / scale, params[first][1])
        trained = classifier.with_layers(out_layers)
        record = {"epoch": epoch + 1, "loss": float(np.mean(losses)), "train_accuracy": accuracy(trained, dataset)}
        if test_set is not None:
            record["test_accuracy"] = accuracy(trained, test_set)
        history.append(record)
        log.info("epoch %d: %s", epoch + 1, record)
    return trained, history
