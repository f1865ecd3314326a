"""scikit-learn style wrapper around the training pipeline.

``fit(X, y, labels)`` runs every phase in memory; ``predict`` returns
caption strings, ``transform`` returns frozen-encoder features and
``score`` is corpus BLEU-4 against the given references.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .autodiff import Tensor
from .data import (COLOR_NAMES, DEFAULT_T, SHAPES, SIZES, CaptionDataset, DataError, DatasetManifest, Vocab,
                   detokenize, tokenize, MANIFEST_VERSION)
from .metrics import EvalPair, bleu4
from .models import preset_config
from .training import TrainConfig, Trainer


def check_images(X, image_size: int | None = None) -> np.ndarray:
    """Validate a (N, 3, H, W) batch in [-1, 1]; uint8 (N, H, W, 3) is converted."""
    X = np.asarray(X)
    if X.ndim == 4 and X.dtype == np.uint8 and X.shape[-1] == 3:
        X = X.transpose(0, 3, 1, 2).astype(np.float32) / 127.5 - 1.0
    if X.ndim != 4 or X.shape[1] != 3 or X.shape[2] != X.shape[3]:
        raise ValueError(f"images must be (N, 3, S, S), got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("no images given")
    X = X.astype(np.float32, copy=False)
    if not np.isfinite(X).all():
        raise ValueError("images contain non-finite values")
    if X.min() < -1.0 - 1e-6 or X.max() > 1.0 + 1e-6:
        raise ValueError("image values must lie in [-1, 1]")
    if image_size is not None and X.shape[-1] != image_size:
        raise ValueError(f"images must be {image_size}x{image_size}, got {X.shape[-1]}")
    return X


def check_captions(y, n: int) -> list[list[str]]:
    """One string or a list of strings per sample, the same count for every sample."""
    if len(y) != n:
        raise ValueError(f"got {len(y)} caption entries for {n} images")
    out = [[item] if isinstance(item, str) else list(item) for item in y]
    counts = {len(c) for c in out}
    if len(counts) != 1 or 0 in counts:
        raise ValueError("every image needs the same, non-zero number of captions")
    for caps in out:
        for c in caps:
            if not isinstance(c, str):
                raise ValueError(f"captions must be strings, got {type(c).__name__}")
    return out


def check_labels(labels, n: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n, 3) or not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"labels must be an integer array of shape ({n}, 3)")
    for k, names in enumerate((SHAPES, COLOR_NAMES, SIZES)):
        if labels[:, k].min() < 0 or labels[:, k].max() >= len(names):
            raise ValueError(f"label column {k} out of range [0, {len(names)})")
    return labels


def _in_memory_dataset(X, captions, labels, T: int, vocab: Vocab | None = None) -> CaptionDataset:
    records = []
    for i, (caps, lab) in enumerate(zip(captions, labels)):
        attrs = {"shape": SHAPES[lab[0]], "fill": COLOR_NAMES[lab[1]], "size": SIZES[lab[2]]}
        records.append({"id": f"{i:06d}", "image": "", "split": "train", "attributes": attrs, "captions": caps})
    if vocab is None:
        vocab = Vocab.build([c for caps in captions for c in caps])
    manifest = DatasetManifest(MANIFEST_VERSION, int(X.shape[-1]), "", 0, records)
    return CaptionDataset(manifest, vocab, X, T=T)


class CycleCaptioner(BaseEstimator):
    """Image captioner trained with the image/caption cycle.

    Parameters mirror :class:`~cyclecap.training.TrainConfig`; ``preset``
    picks the network sizes.
    """

    def __init__(self, preset: str = "smoke", caption_length: int = DEFAULT_T, epochs_encoder: int = 10,
                 epochs_pretrain: int = 50, epochs_main: int = 20, batch_size: int = 16, lr: float = 2e-4,
                 weight_decay: float = 1e-5, cycle: bool = True, tau: float = 1.0, seed: int = 0):
        self.preset = preset
        self.caption_length = caption_length
        self.epochs_encoder = epochs_encoder
        self.epochs_pretrain = epochs_pretrain
        self.epochs_main = epochs_main
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.cycle = cycle
        self.tau = tau
        self.seed = seed

    def fit(self, X, y, labels):
        X = check_images(X)
        captions = check_captions(y, len(X))
        labels = check_labels(labels, len(X))
        if any(len(tokenize(c)) == 0 for caps in captions for c in caps):
            raise DataError("empty caption after preprocessing")
        dataset = _in_memory_dataset(X, captions, labels, self.caption_length)
        cfg = TrainConfig(epochs_pretrain=self.epochs_pretrain, epochs_main=self.epochs_main,
                          epochs_encoder=self.epochs_encoder, batch_size=min(self.batch_size, len(X)),
                          lr=self.lr, weight_decay=self.weight_decay, cycle_enabled=self.cycle,
                          tau=self.tau, seed=self.seed)
        mcfg = preset_config(self.preset, vocab_size=len(dataset.vocab), image_size=int(X.shape[-1]),
                             caption_length=self.caption_length)
        trainer = Trainer(dataset, mcfg, cfg)
        trainer.pretrain()
        trainer.run_phase("main")
        self.bundle_ = trainer.bundle.eval()
        self.vocab_ = dataset.vocab
        self.history_ = list(trainer.loss_rows)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _ids(self, X) -> np.ndarray:
        check_is_fitted(self, "bundle_")
        X = check_images(X, self.bundle_.cfg.image_size)
        with ad.precision(np.float32):
            return np.concatenate([self.bundle_.greedy_caption(Tensor(X[i:i + 256]))
                                   for i in range(0, len(X), 256)])

    def predict(self, X) -> list[str]:
        return [detokenize(row, self.vocab_) for row in self._ids(X)]

    def transform(self, X) -> np.ndarray:
        """Frozen-encoder features, (N, feature_dim)."""
        check_is_fitted(self, "bundle_")
        X = check_images(X, self.bundle_.cfg.image_size)
        with ad.precision(np.float32), ad.no_grad():
            return np.concatenate([self.bundle_.image_encode(Tensor(X[i:i + 256])).data
                                   for i in range(0, len(X), 256)])

    def score(self, X, y) -> float:
        """Corpus BLEU-4 of the predicted captions against ``y``."""
        refs = check_captions(y, len(X))
        pairs = [EvalPair(tokenize(cand), [tokenize(r) for r in rs]) for cand, rs in zip(self.predict(X), refs)]
        return bleu4(pairs)
