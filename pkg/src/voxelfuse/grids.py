"""Dense voxel feature grids shared by the fusion stages."""
from __future__ import annotations

from dataclasses import dataclass

from .errors import ShapeError
from .geom import GridSpec
from .numgrad import Value


@dataclass
class DenseGrid:
    """A differentiable (X, Y, Z, C) feature volume on a voxel lattice."""

    spec: GridSpec
    feat: Value

    def __post_init__(self) -> None:
        if self.feat.ndim != 4 or self.feat.shape[:3] != self.spec.dims:
            raise ShapeError(
                f"grid features of shape {self.feat.shape} do not match dims {self.spec.dims}"
            )

    @property
    def channels(self) -> int:
        return self.feat.shape[3]
