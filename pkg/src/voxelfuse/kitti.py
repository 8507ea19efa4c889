"""KITTI calibration file interop.

Parses the `key: v0 v1 ...` text layout, validates the three fields the
pipeline needs, and composes them into a single velodyne-to-image
projection. Extra keys (P0, P1, Tr_imu_to_velo, ...) are ignored.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import CalibParseError
from .geom import Calibration, compose_projection

_REQUIRED = {"P2": 12, "R0_rect": 9, "Tr_velo_to_cam": 12}


def parse_kitti_calib(path: str | Path) -> Calibration:
    fields: dict[str, np.ndarray] = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or ":" not in line:
            continue
        key, rest = line.split(":", 1)
        key = key.strip()
        if key not in _REQUIRED:
            continue
        tokens = rest.split()
        if len(tokens) != _REQUIRED[key]:
            raise CalibParseError(
                f"{key}: expected {_REQUIRED[key]} values, got {len(tokens)}"
            )
        try:
            vals = np.array([float(t) for t in tokens])
        except ValueError as exc:
            raise CalibParseError(f"{key}: {exc}") from exc
        if not np.all(np.isfinite(vals)):
            raise CalibParseError(f"{key}: non-finite value")
        fields[key] = vals

    missing = sorted(set(_REQUIRED) - set(fields))
    if missing:
        raise CalibParseError(f"missing calibration field(s): {', '.join(missing)}")

    p2 = fields["P2"].reshape(3, 4)
    rect = fields["R0_rect"].reshape(3, 3)
    velo_to_cam = fields["Tr_velo_to_cam"].reshape(3, 4)
    return Calibration(compose_projection(p2, rect, velo_to_cam))


__all__ = ["parse_kitti_calib"]
