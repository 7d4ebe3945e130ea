"""
Desk-scale dataset: scikit-learn's bundled 8x8 handwritten digits, resized
to 28x28 with the package's bicubic kernel and quantised to bytes.
"""

import numpy as np

from .nn import LabeledDataset
from .refine import bicubic_resize


def digits_28(test_fraction=0.3, seed=0, size=28):
    """Return ``(train, test)`` LabeledDatasets, stratified per class."""
    from sklearn.datasets import load_digits

    raw = load_digits()
    images = raw.images * (255.0 / 16.0)
    big = np.stack([bicubic_resize(img, (size, size)) for img in images])
    big = np.round(np.clip(big, 0, 255))[..., None]
    labels = raw.target.astype(np.int64)

    rng = np.random.Generator(np.random.Philox(seed))
    train_idx, test_idx = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_test = int(round(test_fraction * len(idx)))
        test_idx.extend(idx[:n_test])
        train_idx.extend(idx[n_test:])
    train_idx, test_idx = np.sort(train_idx), np.sort(test_idx)
    return (
        LabeledDataset(big[train_idx], labels[train_idx], "train"),
        LabeledDataset(big[test_idx], labels[test_idx], "test"),
    )
