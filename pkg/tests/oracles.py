"""Independent reference computations shared by the tests."""

import numpy as np

from classfool.nn import Classifier, Conv2D, Dense, Flatten, MaxPool2D, ReLU, cross_entropy, forward


def rng_for(*key):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


def random_net(rng, input_shape=None, num_classes=None, scale=1.0):
    """Small conv net with random shapes and weights: conv -> relu -> pool ->
    conv -> relu -> flatten -> dense (sometimes with a hidden dense)."""
    if input_shape is None:
        side = int(rng.choice([4, 6, 8]))
        input_shape = (side, side, int(rng.integers(1, 4)))
    if num_classes is None:
        num_classes = int(rng.integers(2, 6))
    h, w, c = input_shape
    c1, c2 = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    pad2 = str(rng.choice(["same", "valid"])) if h >= 6 and w >= 6 else "same"
    layers = [
        Conv2D(rng.normal(0, scale / np.sqrt(9 * c), (3, 3, c, c1)), rng.normal(0, 0.1, c1)),
        ReLU(),
        MaxPool2D(2, 2),
        Conv2D(rng.normal(0, scale / np.sqrt(9 * c1), (3, 3, c1, c2)), rng.normal(0, 0.1, c2), padding=pad2),
        ReLU(),
    ]
    hh, ww = h // 2, w // 2
    if pad2 == "valid":
        hh, ww = hh - 2, ww - 2
    n = hh * ww * c2
    layers.append(Flatten())
    if rng.random() < 0.5:
        k = int(rng.integers(3, 8))
        layers += [Dense(rng.normal(0, scale / np.sqrt(n), (n, k)), rng.normal(0, 0.1, k)), ReLU()]
        n = k
    layers.append(Dense(rng.normal(0, scale / np.sqrt(n), (n, num_classes)), rng.normal(0, 0.1, num_classes)))
    return Classifier(tuple(layers), input_shape, num_classes, conv_base_end=5)


def kink_signature(clf, X):
    """ReLU sign patterns and max-pool winners for every sample of a batch."""
    sig = []
    x = np.asarray(X, dtype=np.float64)
    for layer in clf.layers:
        if layer.kind == "relu":
            sig.append((x > 0).reshape(len(x), -1))
        elif layer.kind == "maxpool2d":
            n, h, w, c = x.shape
            s = layer.size
            win = x[:, : h // s * s, : w // s * s].reshape(n, h // s, s, w // s, s, c)
            win = win.transpose(0, 1, 3, 5, 2, 4).reshape(n, -1, s * s)
            sig.append(win.argmax(axis=2))
        x, _ = layer.forward(x)
    return [s.reshape(len(s), -1) for s in sig]


def stencil_is_smooth(clf, X):
    """True when every point of the batch shares the first point's pattern."""
    return all(np.all(s == s[:1]) for s in kink_signature(clf, X))


def reference_forward(clf, X, dtype=np.longdouble):
    """Logits computed layer by layer with explicit padding, offset loops and
    einsum, in extended precision; shares no code with the package."""
    x = np.asarray(X).astype(dtype)
    for layer in clf.layers:
        if layer.kind == "conv2d":
            w = np.asarray(layer.weight).astype(dtype)
            kh, kw = w.shape[:2]
            if layer.padding == "same":
                x = np.pad(x, ((0, 0), (kh // 2, kh - 1 - kh // 2), (kw // 2, kw - 1 - kw // 2), (0, 0)))
            n, h, ww, _ = x.shape
            ho = (h - kh) // layer.stride + 1
            wo = (ww - kw) // layer.stride + 1
            out = np.zeros((n, ho, wo, w.shape[3]), dtype=dtype)
            for i in range(kh):
                for j in range(kw):
                    patch = x[:, i:i + layer.stride * (ho - 1) + 1:layer.stride,
                              j:j + layer.stride * (wo - 1) + 1:layer.stride]
                    out += np.einsum("nhwc,cd->nhwd", patch, w[i, j])
            x = out + np.asarray(layer.bias).astype(dtype)
        elif layer.kind == "relu":
            x = np.where(x > 0, x, dtype(0))
        elif layer.kind == "maxpool2d":
            n, h, ww, c = x.shape
            s = layer.size
            assert layer.stride == s
            x = x[:, : h // s * s, : ww // s * s].reshape(n, h // s, s, ww // s, s, c).max(axis=(2, 4))
        elif layer.kind == "flatten":
            x = x.reshape(len(x), -1)
        elif layer.kind == "dense":
            x = np.einsum("ni,io->no", x, np.asarray(layer.weight).astype(dtype)) + np.asarray(layer.bias).astype(dtype)
    return x


def reference_cross_entropy(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return lse - z[np.arange(len(z)), labels]


def loss_fn(clf, label):
    return lambda X: cross_entropy(forward(clf, X), np.full(len(X), label))


def reference_loss_fn(clf, label):
    return lambda X: reference_cross_entropy(reference_forward(clf, X), np.full(len(X), label))


def fd_gradient(f, x, h=1e-3):
    """Central differences with one Richardson extrapolation step.

    ``f`` maps a batch to a vector of values. Returns the gradient and the
    full stencil batch (useful for smoothness checks).
    """
    x = np.asarray(x)
    m = x.size
    eye = np.eye(m, dtype=x.dtype).reshape((m,) + x.shape)
    steps = []
    for hh in (h, h / 2):
        steps += [x + hh * eye, x - hh * eye]
    batch = np.concatenate(steps)
    v = f(batch).reshape(4, m)
    d1 = (v[0] - v[1]) / (2 * h)
    d2 = (v[2] - v[3]) / h
    return ((4 * d2 - d1) / 3).reshape(x.shape), batch


def relative_error(g, ref, floor=1e-8):
    return np.abs(g - ref) / np.maximum(np.maximum(np.abs(g), np.abs(ref)), floor)


def otsu_exhaustive(a, bins=256):
    """Brute-force Otsu: try every interior boundary, compute the
    between-class variance of bin centres in floating point via fractions."""
    from fractions import Fraction

    a = np.asarray(a, dtype=np.float64).ravel()
    lo, hi = a.min(), a.max()
    width = (hi - lo) / bins
    idx = np.clip(np.floor((a - lo) / width).astype(int), 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    best, best_k = None, None
    n = len(a)
    for k in range(1, bins):
        c0 = int(counts[:k].sum())
        c1 = n - c0
        if c0 == 0 or c1 == 0:
            continue
        m0 = Fraction(int((counts[:k] * np.arange(k)).sum()), c0)
        m1 = Fraction(int((counts[k:] * np.arange(k, bins)).sum()), c1)
        var = Fraction(c0 * c1, n * n) * (m0 - m1) ** 2
        if best is None or var > best:
            best, best_k = var, k
    return lo + best_k * width, best_k
