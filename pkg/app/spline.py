"""
First-order polyharmonic spline from range-image coordinates to RGB-image coordinates:

    f(x) = sum_i w_i * ||x - c_i|| + V^T [1, x]

The weights solve the augmented symmetric system

    | K + lambda*I   P | | w |   | y |
    | P^T            0 | | V | = | 0 |

with K_ij = ||c_i - c_j|| and P_i = [1, c_i]; the zero block enforces sum w_i = 0 and sum w_i c_i = 0.
All arithmetic is float64.
"""

import logging
import warnings
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist

from app.errors import (
    DegenerateGeometryError,
    InsufficientControlsError,
    NumericalError,
    ParameterError,
)
from app.projection import CorrespondenceSet

log = logging.getLogger(__name__)

COLLINEAR_TOL = 1e-10


@dataclass(frozen=True)
class SplineWarp:
    control_points: np.ndarray
    weights: np.ndarray
    affine: np.ndarray
    fit_residual: float
    regularization: float = 0.0

    def __post_init__(self):
        for array in (self.control_points, self.weights, self.affine):
            array.setflags(write=False)

    def __len__(self) -> int:
        return len(self.control_points)

    def __repr__(self) -> str:
        return f"<SplineWarp controls={len(self)} residual={self.fit_residual:.3g} lambda={self.regularization}>"

    def __call__(self, queries: np.ndarray) -> np.ndarray:
        return eval_spline(self, queries)


def _polynomial_block(points: np.ndarray) -> np.ndarray:
    return np.hstack([np.ones((len(points), 1)), points])


def fit_spline(
    controls: Union[CorrespondenceSet, np.ndarray],
    targets: np.ndarray = None,
    regularization: float = 0.0,
) -> SplineWarp:
    """
    Fit the spline mapping control range pixels onto their RGB pixels.

    Args:
        controls (Union[CorrespondenceSet, np.ndarray]): Correspondences, or N x 2 source points
        targets (np.ndarray, optional): N x 2 target points when controls is an array. Defaults to None.
        regularization (float, optional): Lambda added to the kernel diagonal; 0 interpolates. Defaults to 0.0.

    Raises:
        ParameterError: Negative lambda or mismatched inputs
        InsufficientControlsError: Fewer than 3 controls
        DegenerateGeometryError: Collinear controls
        NumericalError: Singular or numerically unusable system

    Returns:
        SplineWarp: Fitted warp
    """
    if isinstance(controls, CorrespondenceSet):
        centers, targets = controls.range_px, controls.rgb_px
    else:
        centers = controls
    centers = np.array(centers, dtype=np.float64).reshape(-1, 2)
    targets = np.array(targets, dtype=np.float64).reshape(-1, 2)

    if regularization < 0:
        raise ParameterError(f"regularization must be >= 0, got {regularization}")
    if len(centers) != len(targets):
        raise ParameterError(f"{len(centers)} controls but {len(targets)} targets")

    N = len(centers)
    if N < 3:
        raise InsufficientControlsError(f"need at least 3 control points, got {N}")

    poly = _polynomial_block(centers)
    # rank of [1, c] on centred coordinates so large offsets do not mask collinearity
    singular = np.linalg.svd(centers - centers.mean(axis=0), compute_uv=False)
    if singular[0] == 0.0 or singular[-1] <= COLLINEAR_TOL * singular[0]:
        raise DegenerateGeometryError(f"the {N} control points are collinear")

    system = np.zeros((N + 3, N + 3))
    system[:N, :N] = cdist(centers, centers) + regularization * np.eye(N)
    system[:N, N:] = poly
    system[N:, :N] = poly.T
    rhs = np.zeros((N + 3, 2))
    rhs[:N] = targets

    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", linalg.LinAlgWarning)
            solution = linalg.solve(system, rhs, assume_a="sym")
    except (linalg.LinAlgError, linalg.LinAlgWarning) as e:
        condition = float(np.linalg.cond(system))
        raise NumericalError(
            f"spline system with {N} controls could not be solved (condition {condition:.3g}): {e}",
            condition=condition,
        ) from e

    weights, affine = solution[:N], solution[N:]
    fitted = cdist(centers, centers) @ weights + poly @ affine
    residual = float(np.max(np.abs(fitted - targets)))

    log.debug(f"Fitted spline on {N} controls, residual {residual:.3g} px")
    return SplineWarp(
        control_points=centers,
        weights=weights,
        affine=affine,
        fit_residual=residual,
        regularization=float(regularization),
    )


def eval_spline(warp: SplineWarp, queries: np.ndarray) -> np.ndarray:
    """
    Evaluate the warp at M x 2 range-image positions.

    Args:
        warp (SplineWarp): Fitted warp
        queries (np.ndarray): M x 2 range-image coordinates

    Returns:
        np.ndarray: M x 2 RGB-image coordinates
    """
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
    return cdist(queries, warp.control_points) @ warp.weights + _polynomial_block(queries) @ warp.affine


def side_conditions(warp: SplineWarp) -> np.ndarray:
    """Returns the 3 x 2 matrix [sum w_i; sum w_i c_i], zero for a well-posed fit."""
    return _polynomial_block(warp.control_points).T @ warp.weights


def dump_spline(warp: SplineWarp) -> str:
    """Text dump of (c, w, V) for debugging."""
    lines = [f"# controls={len(warp)} lambda={warp.regularization} residual={warp.fit_residual!r}"]
    lines += [
        f"c {cx!r} {cy!r} w {wu!r} {wv!r}"
        for (cx, cy), (wu, wv) in zip(warp.control_points.tolist(), warp.weights.tolist())
    ]
    lines += [f"V {a!r} {b!r}" for a, b in warp.affine.tolist()]
    return "\n".join(lines) + "\n"
