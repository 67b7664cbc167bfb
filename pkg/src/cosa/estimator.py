"""scikit-learn style wrappers around the trainer.

``X`` is either a :class:`~cosa.data.MultimodalBatch` or a mapping from
modality letter to a ``[N, T, d]`` array. Missing modalities may be omitted
when ``modalities`` excludes them; they are filled with zeros.
"""
from __future__ import annotations

from typing import Mapping

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .data import MODALITIES, DataError, Dataset, MultimodalBatch, parse_modalities
from .trainer import TrainConfig, Trainer, _to_torch


def check_multimodal(X, modalities=MODALITIES) -> dict[str, np.ndarray]:
    """Validate ``X`` and return float32 ``[N, T, d]`` arrays for all three modalities.

    Every required modality must be present, rank 3, finite, and agree with
    the others on ``N`` and ``T``.
    """
    if isinstance(X, MultimodalBatch):
        X = X.features
    if not isinstance(X, Mapping):
        raise TypeError(f"X must be a mapping of modality -> [N, T, d] array, got {type(X).__name__}")
    unknown = set(X) - set(MODALITIES)
    if unknown:
        raise DataError(f"unknown modality keys {sorted(unknown)}")
    required = parse_modalities(modalities)
    missing = [m for m in required if m not in X]
    if missing:
        raise DataError(f"X lacks modalities {missing}")
    arrays = {}
    for m, value in X.items():
        a = np.asarray(value, dtype=np.float32)
        if a.ndim != 3:
            raise DataError(f"modality {m} must be [N, T, d], got shape {a.shape}")
        if not np.isfinite(a).all():
            raise DataError(f"modality {m} contains NaN or Inf")
        arrays[m] = a
    nt = {a.shape[:2] for a in arrays.values()}
    if len(nt) != 1:
        raise DataError(f"modalities disagree on (N, T): { {m: a.shape for m, a in arrays.items()} }")
    n, t = nt.pop()
    if n == 0:
        raise DataError("X has no samples")
    for m in MODALITIES:
        if m not in arrays:
            # width 1 placeholder; the modality is masked out anyway
            arrays[m] = np.zeros((n, t, 1), dtype=np.float32)
    return arrays


def check_targets(y, n: int, task: str, num_classes: int | None = None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise DataError(f"y must be 1-D with {n} entries, got shape {y.shape}")
    if task == "msa":
        y = y.astype(np.float32)
        if not np.isfinite(y).all():
            raise DataError("y contains NaN or Inf")
        return y
    if not np.issubdtype(y.dtype, np.integer):
        raise DataError("class targets must be integer indices; encode labels first")
    if y.min() < 0 or (num_classes is not None and y.max() >= num_classes):
        raise DataError(f"class index outside [0, {num_classes})")
    return y.astype(np.int64)


class _CoSABase(BaseEstimator):
    _task = "msa"

    def __init__(self, *, fusion="add", alphas=None, epochs=100, batch_size=64, lr=1e-3,
                 enable_msd=True, enable_dpsr=True, enable_sac=True, modalities="VAT",
                 embed_dim=128, validation_fraction=0.1, seed=0, config=None):
        self.fusion = fusion
        self.alphas = alphas
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.enable_msd = enable_msd
        self.enable_dpsr = enable_dpsr
        self.enable_sac = enable_sac
        self.modalities = modalities
        self.embed_dim = embed_dim
        self.validation_fraction = validation_fraction
        self.seed = seed
        self.config = config

    def _make_config(self, num_classes=None) -> TrainConfig:
        doc = dict(self.config or {})
        doc.update(
            task=self._task, fusion=self.fusion, alphas=None if self.alphas is None else list(self.alphas),
            epochs=int(self.epochs), batch_size=int(self.batch_size), lr=float(self.lr),
            enable_msd=bool(self.enable_msd), enable_dpsr=bool(self.enable_dpsr),
            enable_sac=bool(self.enable_sac), modalities=str(self.modalities),
            embed_dim=int(self.embed_dim), seed=int(self.seed), num_classes=num_classes,
        )
        return TrainConfig.from_dict(doc)

    def _batch(self, arrays, y, ids) -> MultimodalBatch:
        return MultimodalBatch(features=arrays, labels=y, ids=ids, task=self._task)

    def _fit(self, X, y, num_classes=None):
        arrays = check_multimodal(X, self.modalities)
        n = len(next(iter(arrays.values())))
        y = check_targets(y, n, self._task, num_classes)
        config = self._make_config(num_classes)
        if not 0 <= self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in [0, 1)")
        order = np.random.default_rng(config.seed).permutation(n)
        n_valid = int(round(self.validation_fraction * n))
        if n_valid >= n:
            raise DataError("validation split would leave no training samples")
        ids = np.arange(n)
        splits = {"train": self._batch({m: a[order[n_valid:]] for m, a in arrays.items()},
                                       y[order[n_valid:]], ids[order[n_valid:]])}
        if n_valid:
            splits["valid"] = self._batch({m: a[order[:n_valid]] for m, a in arrays.items()},
                                          y[order[:n_valid]], ids[order[:n_valid]])
        seq_len = arrays["V"].shape[1]
        dataset = Dataset(task=self._task, splits=splits, seq_len=seq_len, num_classes=num_classes)
        self.trainer_ = Trainer(config, dataset)
        self.trainer_.fit()
        self.trainer_.restore_best()
        self.widths_ = dataset.widths
        self.seq_len_ = seq_len
        self.history_ = self.trainer_.artifacts.history
        return self

    @torch.no_grad()
    def _raw_predict(self, X) -> np.ndarray:
        check_is_fitted(self, "trainer_")
        arrays = check_multimodal(X, self.modalities)
        widths = {m: a.shape[2] for m, a in arrays.items()}
        active = parse_modalities(self.modalities)
        for m in active:
            if widths[m] != self.widths_[m]:
                raise DataError(f"modality {m} has width {widths[m]}, model expects {self.widths_[m]}")
        for m in MODALITIES:
            if m not in active and widths[m] != self.widths_[m]:
                arrays[m] = np.zeros(arrays[m].shape[:2] + (self.widths_[m],), dtype=np.float32)
        if arrays["V"].shape[1] < 2:
            raise DataError("sequences need at least two frames")
        n = len(arrays["V"])
        dummy = np.zeros(n, dtype=np.float32 if self._task == "msa" else np.int64)
        batch = self._batch(arrays, dummy, np.arange(n))
        net = self.trainer_.net
        net.eval()
        outs = []
        for part in batch.batches(self.trainer_.config.batch_size):
            x, _ = _to_torch(part, self._task)
            outs.append(net(x).numpy())
        return np.concatenate(outs)

    def transform(self, X) -> np.ndarray:
        """Fused joint representation, mean-pooled over frames: ``[N, width]``."""
        check_is_fitted(self, "trainer_")
        arrays = check_multimodal(X, self.modalities)
        n = len(arrays["V"])
        dummy = np.zeros(n, dtype=np.float32 if self._task == "msa" else np.int64)
        batch = self._batch(arrays, dummy, np.arange(n))
        net = self.trainer_.net
        net.eval()
        outs = []
        with torch.no_grad():
            for part in batch.batches(self.trainer_.config.batch_size):
                x, _ = _to_torch(part, self._task)
                rep = net.represent(x)
                outs.append(net.joint(rep.f, net.weights(rep.f)).mean(dim=1).numpy())
        return np.concatenate(outs)

    def frame_weights(self, X) -> dict[str, np.ndarray]:
        """Per-frame fusion weights ``{modality: [N, T]}``."""
        check_is_fitted(self, "trainer_")
        arrays = check_multimodal(X, self.modalities)
        net = self.trainer_.net
        net.eval()
        with torch.no_grad():
            x = {m: torch.from_numpy(a) for m, a in arrays.items()}
            rep = net.represent(x)
            w = net.weights(rep.f)
        return {m: w[m].numpy() for m in MODALITIES}


class CoSARegressor(RegressorMixin, _CoSABase):
    """Sentiment-intensity regression (scores in [-3, 3]); ``score`` is R^2."""

    _task = "msa"

    def fit(self, X, y):
        return self._fit(X, y)

    def predict(self, X) -> np.ndarray:
        return self._raw_predict(X)


class CoSAClassifier(ClassifierMixin, _CoSABase):
    """Emotion classification; labels may be any hashable values."""

    _task = "mer"

    def fit(self, X, y):
        y = np.asarray(y)
        if y.ndim != 1:
            raise DataError(f"y must be 1-D, got shape {y.shape}")
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise DataError("need at least two classes")
        return self._fit(X, encoded.astype(np.int64), num_classes=len(self.classes_))

    def decision_function(self, X) -> np.ndarray:
        return self._raw_predict(X)

    def predict_proba(self, X) -> np.ndarray:
        logits = self._raw_predict(X)
        return torch.softmax(torch.from_numpy(logits), dim=-1).numpy()

    def predict(self, X) -> np.ndarray:
        return self.classes_[self._raw_predict(X).argmax(axis=1)]
