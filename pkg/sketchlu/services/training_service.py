from __future__ import annotations

import logging
import math
import time
from typing import Callable, Optional, Tuple

import numpy as np
from tqdm import tqdm

from sketchlu.core.exceptions import EmptyInput, InputError, NonFiniteLoss
from sketchlu.models.dataset import Dataset
from sketchlu.models.mlp import (
    LossKind,
    MlpModel,
    forward_batch,
    forward_cache,
    loss_and_output_grad,
    vjp_cached,
)

logger = logging.getLogger("sketchlu.services.training_service")

EpochCallback = Callable[[int, float, float], None]


def evaluate(model: MlpModel, data: Dataset, loss: LossKind) -> Tuple[float, float]:
    """
    Mean loss over the whole dataset and, for classification, accuracy.

    Accuracy is NaN for mse regression targets.
    """
    outputs = forward_batch(model, data.inputs)
    value, _ = loss_and_output_grad(loss, outputs, data.targets)
    if LossKind(loss) is LossKind.cross_entropy:
        accuracy = float(np.mean(np.argmax(outputs, axis=1) == data.targets.astype(np.int64)))
    else:
        accuracy = math.nan
    return value, accuracy


def train_sgd(
    model: MlpModel,
    data: Dataset,
    loss: LossKind,
    epochs: int,
    lr: float,
    batch: int,
    seed: int,
    on_epoch: Optional[EpochCallback] = None,
    show_progress: bool = False,
) -> MlpModel:
    """
    Plain mini-batch SGD, reshuffling every epoch from Philox(seed).

    Returns a new model; the input model is untouched. on_epoch receives
    (epoch, full-data loss, accuracy) after each epoch.

    Raises NonFiniteLoss with the epoch/step where the loss stopped being finite.
    """
    if data.n == 0:
        raise EmptyInput(f"training dataset '{data.name}' is empty")
    if data.targets is None:
        raise InputError(f"training dataset '{data.name}' has no targets")
    if epochs < 0 or batch < 1 or lr <= 0:
        raise InputError(f"invalid SGD settings: epochs={epochs}, batch={batch}, lr={lr}")

    loss = LossKind(loss)
    params = np.array(model.params, dtype=np.float64)
    # unvalidated view onto the mutable parameter buffer
    working = model.model_copy(update={"params": params})
    rng = np.random.Generator(np.random.Philox(seed))
    start = time.perf_counter()

    for epoch in tqdm(range(epochs), desc=f"train {data.name}", disable=not show_progress):
        order = rng.permutation(data.n)
        for step, lo in enumerate(range(0, data.n, batch)):
            idx = order[lo : lo + batch]
            cache = forward_cache(working, data.inputs[idx])
            value, out_grad = loss_and_output_grad(loss, cache.output, data.targets[idx])
            if not math.isfinite(value):
                logger.error(
                    "Training diverged",
                    extra={"epoch": epoch, "step": step, "loss": value, "lr": lr},
                )
                raise NonFiniteLoss(epoch, step, value)
            params -= lr * vjp_cached(working, cache, out_grad)

        if not np.all(np.isfinite(params)):
            raise NonFiniteLoss(epoch, -1, math.nan)

        epoch_loss, accuracy = evaluate(working, data, loss)
        logger.debug(
            "Epoch finished",
            extra={"epoch": epoch, "loss": epoch_loss, "accuracy": accuracy},
        )
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss, accuracy)

    trained = model.with_params(params)
    final_loss, final_accuracy = evaluate(trained, data, loss)
    logger.info(
        "Training finished",
        extra={
            "dataset": data.name,
            "epochs": epochs,
            "final_loss": final_loss,
            "final_accuracy": final_accuracy,
            "latency_ms": int((time.perf_counter() - start) * 1000),
        },
    )
    return trained
