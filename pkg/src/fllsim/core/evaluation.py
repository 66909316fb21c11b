"""
Downstream evaluation of a pretrained encoder at any layer.

    - linear: frozen full encoder, features tapped at layer k, standardized
      with training statistics, then a fresh linear classifier trained by
      mini-batch SGD;
    - finetune: layers 0..k and the classifier train together, deeper layers
      are ignored;
    - pixels: the same linear classifier on raw pixels (sanity floor).

Inference always uses the full model; no layer is dropped.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from fllsim.core.datasets import Dataset
from fllsim.core.encoder import LayeredEncoder, forward, set_trainable
from fllsim.core.tensor import Tape, Tensor, add, backward, matmul, softmax_cross_entropy
from fllsim.io.schema import EvalConfig
from fllsim.utils import setup_logger

logger = setup_logger(__name__)

CLASSIFIER_LAYER = -1
FEATURE_BATCH = 256


@dataclass(frozen=True)
class EvalResult:
    layer: int
    mode: str
    accuracy: float
    train_accuracy: float


def _full_kept(enc: LayeredEncoder) -> Tuple[int, ...]:
    return tuple(range(enc.num_blocks + 1))


def extract_features(enc: LayeredEncoder, images: np.ndarray, layer: int, batch_size: int = FEATURE_BATCH) -> np.ndarray:
    """Mean-pooled representations [n, width] after `layer` of the full model."""
    kept = _full_kept(enc)
    chunks = [
        forward(enc, images[start:start + batch_size], kept, layer).data
        for start in range(0, len(images), batch_size)
    ]
    return np.concatenate(chunks, axis=0)


def standardize(train: np.ndarray, test: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    std = np.where(std > 1e-6, std, 1.0)
    return ((train - mean) / std).astype(np.float32), ((test - mean) / std).astype(np.float32)


def _classifier(dim: int, num_classes: int) -> Tuple[Tensor, Tensor]:
    weight = Tensor(np.zeros((dim, num_classes)), requires_grad=True, name=(CLASSIFIER_LAYER, "classifier.weight"))
    bias = Tensor(np.zeros(num_classes), requires_grad=True, name=(CLASSIFIER_LAYER, "classifier.bias"))
    return weight, bias


def _sgd_step(params, grads, lr: float) -> None:
    lr = np.float32(lr)
    for t in params:
        g = grads.get(t.name)
        if g is not None:
            t.data = (t.data - lr * g).astype(t.data.dtype)


def _predict(features: np.ndarray, weight: Tensor, bias: Tensor) -> np.ndarray:
    return (features @ weight.data + bias.data).argmax(axis=1)


def train_linear_classifier(
    features: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    cfg: EvalConfig,
) -> Tuple[Tensor, Tensor]:
    """Softmax regression trained with mini-batch SGD for cfg.epochs epochs."""
    rng = np.random.default_rng(cfg.seed)
    weight, bias = _classifier(features.shape[1], num_classes)

    for _ in range(cfg.epochs):
        order = rng.permutation(len(features))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            with Tape() as tape:
                logits = add(matmul(Tensor(features[idx]), weight), bias)
                loss = softmax_cross_entropy(logits, labels[idx])
                grads = backward(loss, tape)
            _sgd_step((weight, bias), grads, cfg.lr)
    return weight, bias


def _accuracy(pred: np.ndarray, labels: np.ndarray) -> float:
    return float((pred == labels).mean())


def linear_probe(enc: LayeredEncoder, train: Dataset, test: Dataset, layer: int, cfg: EvalConfig) -> EvalResult:
    train_x, test_x = standardize(
        extract_features(enc, train.images, layer),
        extract_features(enc, test.images, layer),
    )
    weight, bias = train_linear_classifier(train_x, train.labels, train.num_classes, cfg)
    return EvalResult(
        layer=layer,
        mode="linear",
        accuracy=_accuracy(_predict(test_x, weight, bias), test.labels),
        train_accuracy=_accuracy(_predict(train_x, weight, bias), train.labels),
    )


def pixel_probe(train: Dataset, test: Dataset, cfg: EvalConfig) -> EvalResult:
    train_x, test_x = standardize(
        train.images.reshape(train.size, -1),
        test.images.reshape(test.size, -1),
    )
    weight, bias = train_linear_classifier(train_x, train.labels, train.num_classes, cfg)
    return EvalResult(
        layer=-1,
        mode="pixels",
        accuracy=_accuracy(_predict(test_x, weight, bias), test.labels),
        train_accuracy=_accuracy(_predict(train_x, weight, bias), train.labels),
    )


def finetune(enc: LayeredEncoder, train: Dataset, test: Dataset, layer: int, cfg: EvalConfig) -> EvalResult:
    """Train layers 0..layer of a private copy plus a classifier, then score it."""
    model = enc.copy()
    set_trainable(model, range(layer + 1), include_head=False)
    params = [t for t in model.trainable_parameters().values()]
    weight, bias = _classifier(model.config.width, train.num_classes)
    params += [weight, bias]

    kept = _full_kept(model)
    rng = np.random.default_rng(cfg.seed)
    for epoch in range(cfg.finetune_epochs):
        order = rng.permutation(train.size)
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            with Tape() as tape:
                rep = forward(model, train.images[idx], kept, layer)
                loss = softmax_cross_entropy(add(matmul(rep, weight), bias), train.labels[idx])
                grads = backward(loss, tape)
            _sgd_step(params, grads, cfg.lr)
            losses.append(loss.item())
        logger.debug(f"Finetune layer {layer}, epoch {epoch + 1}: loss {np.mean(losses):.4f}")

    def score(data: Dataset) -> float:
        feats = extract_features(model, data.images, layer)
        return _accuracy(_predict(feats, weight, bias), data.labels)

    return EvalResult(layer=layer, mode="finetune", accuracy=score(test), train_accuracy=score(train))


def evaluate(enc: LayeredEncoder, train: Dataset, test: Dataset, layer: int, mode: str, cfg: EvalConfig) -> EvalResult:
    if not 0 <= layer <= enc.num_blocks:
        raise ValueError(f"evaluation layer {layer} outside [0, {enc.num_blocks}]")
    if mode == "linear":
        return linear_probe(enc, train, test, layer, cfg)
    if mode == "finetune":
        return finetune(enc, train, test, layer, cfg)
    raise ValueError(f"Unknown evaluation mode '{mode}'. Available modes: ['finetune', 'linear']")
