import numpy as np
import pytest

from darc.head import init_params
from darc.store import EmbeddingDataset, View


def make_dataset(features, labels, n_classes=None, view=View.PLAIN, meta=None):
    features = np.asarray(features, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if labels.size else 1
    return EmbeddingDataset(
        embeddings=features,
        labels=labels,
        class_names=[f"class_{i}" for i in range(n_classes)],
        view=view,
        meta=meta or {},
    )


def random_dataset(rng, n, dim, n_classes, view=View.PLAIN):
    features = rng.standard_normal((n, dim)).astype(np.float32)
    labels = rng.integers(0, n_classes, size=n)
    return make_dataset(features, labels, n_classes=n_classes, view=view)


def kink_free_instance(seed, dim=8, h=4, n_classes=3, rows=6, margin=1e-2):
    """Random head instance whose ReLU pre-activations all clear ``margin``.

    Central finite differences are only a valid gradient oracle away from
    the ReLU kink; a 1e-4 step moves pre-activations by well under the
    margin, so resampled instances keep the stencil on one side of it.
    """
    rng = np.random.default_rng(seed)
    while True:
        params = init_params(dim, n_classes, hidden=h, seed=int(rng.integers(2**31)))
        for p in params.as_dict().values():
            p += 0.2 * rng.standard_normal(p.shape)
        X = rng.standard_normal((rows, dim))
        y = rng.integers(0, n_classes, size=rows)
        z1 = X @ params.w1 + params.b1
        if np.abs(z1).min() > margin:
            return params, X, y


@pytest.fixture
def rng():
    return np.random.default_rng(7)
