"""Exception hierarchy shared by every module."""

from __future__ import annotations

import numpy as np


class TledError(Exception):
    """Base class. ``module`` names the subsystem that raised."""

    module = "tled"


class MeshFormatError(TledError):
    module = "geometry"

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DegenerateElementError(TledError):
    module = "geometry"

    def __init__(self, kind: str, index: int, volume: float):
        self.kind = kind
        self.index = index
        self.volume = volume
        super().__init__(f"degenerate element: {kind} {index} has volume {volume:.6g}")


class VolumeFormatError(TledError):
    module = "geometry"


class ElementInversionError(TledError):
    """det(F) <= 0 somewhere; carries the offending gradient."""

    module = "materials"

    def __init__(self, F: np.ndarray, index: int | None = None, where: str = "point"):
        self.F = np.array(F, dtype=float)
        self.index = index
        loc = f" at {where} {index}" if index is not None else ""
        super().__init__(
            f"element inversion{loc}: det(F) = {np.linalg.det(self.F):.6g}"
        )


class MaterialError(TledError):
    module = "materials"


class ShapeFunctionError(TledError):
    module = "meshless"


class ConstraintError(TledError):
    module = "meshless"


class InstabilityError(TledError):
    module = "dynamics"

    def __init__(self, step: int, message: str = "numerical instability"):
        self.step = step
        super().__init__(f"instability: {message} at step {step}")


class ContactSurfaceError(TledError):
    module = "contact"

    def __init__(self, message: str, edges=()):
        self.edges = list(edges)
        if self.edges:
            shown = ", ".join(f"({a},{b})" for a, b in self.edges[:10])
            message = f"{message}: {shown}" + (" ..." if len(self.edges) > 10 else "")
        super().__init__(message)


class WarpError(TledError):
    module = "warp"


class MetricsError(TledError):
    module = "metrics"


class ConfigError(TledError):
    module = "cli"
