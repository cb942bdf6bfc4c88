"""Exceptions raised by the deep Wishart process toolkit.

Every error carries its structured fields and can render itself as the
``{"ok": False, "error": ...}`` envelope used by the API and the CLI.
"""

from typing import Any, Dict, Optional


class DeepWishartError(ValueError):
    """Base class for all toolkit errors."""

    def __init__(self, message: str, **fields: Any):
        super().__init__(message)
        self.message = message
        self.fields = fields

    def to_dict(self) -> Dict[str, Any]:
        payload = {"ok": False, "error": self.message, "kind": type(self).__name__}
        payload.update(self.fields)
        return payload


class NotPositiveDefinite(DeepWishartError):
    def __init__(self, pivot: int):
        super().__init__(f"Matrix is not positive definite (pivot {pivot})", pivot=pivot)
        self.pivot = pivot


class SingularTriangular(DeepWishartError):
    def __init__(self, index: int):
        super().__init__(f"Triangular matrix has a zero diagonal entry at {index}", index=index)
        self.index = index


class DomainError(DeepWishartError):
    pass


class ShapeMismatch(DeepWishartError):
    pass


class SingularLeadingBlock(DeepWishartError):
    pass


class NonFiniteGradient(DeepWishartError):
    def __init__(self, name: str):
        super().__init__(f"Non-finite gradient for parameter '{name}'", parameter=name)
        self.name = name


class NumericalFailure(DeepWishartError):
    """A numerical failure inside one term of the ELBO."""

    def __init__(self, layer: int, term: str, cause: Optional[str] = None):
        message = f"Numerical failure in layer {layer}, term '{term}'"
        if cause:
            message += f": {cause}"
        super().__init__(message, layer=layer, term=term)
        self.layer = layer
        self.term = term


class ParseError(DeepWishartError):
    def __init__(self, row: int, col: int, value: Any = None, reason: Optional[str] = None):
        detail = reason or f"Non-numeric value {value!r}"
        super().__init__(f"{detail} at row {row}, column {col}", row=row, col=col)
        self.row = row
        self.col = col


class EmptyDataset(DeepWishartError):
    def __init__(self, path: str = ""):
        super().__init__(f"Dataset '{path}' contains no rows", path=path)


class UnknownPreset(DeepWishartError):
    def __init__(self, name: str):
        super().__init__(f"Preset '{name}' not found", preset=name)
