from __future__ import annotations

import logging
import math
from typing import Tuple

import numpy as np
from scipy import ndimage

from sketchlu.core.exceptions import DimensionMismatch, InvalidDimensions
from sketchlu.core.linalg import qr_orthonormalize
from sketchlu.models.dataset import Dataset, SyntheticFisher

logger = logging.getLogger("sketchlu.services.data_service")


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


# -------------------------------
# Synthetic Fisher
# -------------------------------


def synthetic_fisher(p: int, R: int, decay: float = 0.9, seed: int = 0) -> SyntheticFisher:
    """
    Rank-R PSD operator with a uniformly random orthonormal eigenbasis
    (QR of a p×R Gaussian draw) and eigenvalues decay^0, decay^1, ...
    """
    if R < 1 or R > p:
        raise InvalidDimensions(f"synthetic Fisher needs 1 <= R <= p, got R={R}, p={p}")
    if not 0.0 < decay < 1.0:
        raise InvalidDimensions(f"decay must lie in (0, 1), got {decay}")

    gaussian = _rng(seed).standard_normal((p, R))
    v, _ = qr_orthonormalize(gaussian)
    lambdas = decay ** np.arange(R, dtype=np.float64)

    logger.info("Synthetic Fisher generated", extra={"p": p, "R": R, "decay": decay, "seed": seed})
    return SyntheticFisher(p=p, R=R, V=v, lambdas=lambdas, seed=seed, decay=decay)


def synthetic_test_jacobians(sf: SyntheticFisher, m: int, seed: int) -> np.ndarray:
    """
    m unit vectors (rows of the returned m × p array), each split evenly
    between span(V) and its orthogonal complement: both components have
    norm 1/√2 and uniformly random directions.
    """
    if m < 1:
        raise InvalidDimensions(f"need m >= 1 test Jacobians, got {m}")
    rng = _rng(seed)
    half = 1.0 / math.sqrt(2.0)
    out = np.zeros((m, sf.p))
    for i in range(m):
        g = rng.standard_normal(sf.R)
        inside = sf.V @ (g / np.linalg.norm(g))

        z = rng.standard_normal(sf.p)
        for _ in range(2):
            z -= sf.V @ (sf.V.T @ z)
        outside = z / np.linalg.norm(z)

        out[i] = half * inside + half * outside
    return out


# -------------------------------
# Two-Gaussian OoD task
# -------------------------------


def _blobs(rng: np.random.Generator, n: int, d: int, separation: float) -> Tuple[np.ndarray, np.ndarray]:
    labels = rng.integers(0, 2, size=n)
    x = rng.standard_normal((n, d))
    x[:, 0] += np.where(labels == 1, separation, -separation)
    return x, labels.astype(np.int64)


def two_gaussian_task(
    d: int = 8,
    n: int = 2000,
    shift: float = 6.0,
    seed: int = 0,
    separation: float = 2.0,
) -> Tuple[Dataset, Dataset, Dataset]:
    """
    Desk-scale OoD benchmark.

    - ID: two unit-variance Gaussian classes with means ±separation·e0
    - OoD: fresh draws of the same mixture translated by shift·e1, an axis
      the class means do not use (shift = 0 makes OoD indistinguishable)

    Returns (id_train with n points, id_test and ood_test with n // 4 each).
    """
    if d < 2 or n < 10:
        raise InvalidDimensions(f"two-gaussian task needs d >= 2 and n >= 10, got d={d}, n={n}")
    rng = _rng(seed)
    n_test = max(1, n // 4)

    x_train, y_train = _blobs(rng, n, d, separation)
    x_test, y_test = _blobs(rng, n_test, d, separation)
    x_ood, y_ood = _blobs(rng, n_test, d, separation)
    x_ood[:, 1] += shift

    manifest = {"generator": "two_gaussian", "d": d, "n": n, "shift": shift, "separation": separation}
    return (
        Dataset(inputs=x_train, targets=y_train, name="id_train", seed=seed, manifest=manifest),
        Dataset(inputs=x_test, targets=y_test, name="id_test", seed=seed, manifest=manifest),
        Dataset(inputs=x_ood, targets=y_ood, name="ood_test", seed=seed, manifest=manifest),
    )


def subsample(data: Dataset, size: int, seed: int) -> Tuple[Dataset, np.ndarray]:
    """Seeded subset without replacement; returns it with its sorted indices."""
    if size <= 0 or size >= data.n:
        return data, np.arange(data.n)
    idx = np.sort(_rng(seed).choice(data.n, size=size, replace=False))
    logger.info(
        "Dataset subsampled",
        extra={"dataset": data.name, "size": size, "seed": seed},
    )
    return data.subset(idx), idx


# -------------------------------
# Rotation
# -------------------------------


def rotate_images(ds: Dataset, degrees: float, side: int) -> Dataset:
    """
    Rotate every side×side image about its center by `degrees`
    (counter-clockwise in (row, col) display orientation), bilinear, zero fill.

    A 90° rotation sends pixel (r, c) to (side − 1 − c, r).
    """
    if ds.d != side * side:
        raise DimensionMismatch(f"images have d={ds.d}, expected side²={side * side}")

    manifest = dict(ds.manifest)
    manifest["transforms"] = list(ds.transforms) + [f"rotate({degrees:g})"]

    if math.fmod(degrees, 360.0) == 0.0:
        return Dataset(inputs=ds.inputs.copy(), targets=ds.targets, name=ds.name, seed=ds.seed, manifest=manifest)

    theta = math.radians(degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    # output (row, col) -> input (row, col); inverse of the forward rotation
    matrix = np.array([[cos, sin], [-sin, cos]])
    center = np.array([(side - 1) / 2.0, (side - 1) / 2.0])
    offset = center - matrix @ center

    images = ds.inputs.reshape(ds.n, side, side)
    rotated = np.empty_like(images)
    for i in range(ds.n):
        rotated[i] = ndimage.affine_transform(
            images[i], matrix, offset=offset, order=1, mode="constant", cval=0.0
        )

    return Dataset(
        inputs=rotated.reshape(ds.n, side * side),
        targets=ds.targets,
        name=f"{ds.name}_rot{degrees:g}",
        seed=ds.seed,
        manifest=manifest,
    )
