from typing import List, Optional, Sequence


class HarnessError(Exception):
    """Root of every error the harness raises on bad input or bad state."""


# dataset


class ManifestError(HarnessError):
    def __init__(self, message: str, row: Optional[int] = None, issues=None):
        self.row = row
        self.issues: List[str] = list(issues or [])
        super().__init__(message)


class MissingColumn(ManifestError):
    pass


class DuplicateImageId(ManifestError):
    pass


class NonFiniteMos(ManifestError):
    pass


class ExclusiveInTrain(ManifestError):
    pass


class EmptySubset(HarnessError):
    pass


class InvalidSplit(HarnessError):
    pass


# views


class CellTooSmall(HarnessError):
    pass


class CropLargerThanImage(HarnessError):
    pass


class InvalidViewSpec(HarnessError):
    pass


class ViewError(HarnessError):
    def __init__(self, view_index: int, cause: Exception):
        self.view_index = view_index
        self.cause = cause
        super().__init__(f"view #{view_index}: {cause}")


class ImageDecodeError(HarnessError):
    pass


# metrics / losses


class ZeroVariance(HarnessError):
    pass


class SingularDesign(HarnessError):
    pass


class LengthMismatch(HarnessError):
    pass


class DegenerateRange(HarnessError):
    pass


class UnmatchedIds(HarnessError):
    def __init__(self, missing: Sequence[str] = (), unknown: Sequence[str] = ()):
        self.missing = sorted(missing)
        self.unknown = sorted(unknown)
        parts = []
        if self.missing:
            parts.append(f"no prediction for: {', '.join(self.missing)}")
        if self.unknown:
            parts.append(f"not in manifest selection: {', '.join(self.unknown)}")
        super().__init__("; ".join(parts) or "unmatched ids")


# ranking


class DuplicateTeam(HarnessError):
    pass


class TooFewSubmissions(HarnessError):
    pass


# budget


class ShapeMismatch(HarnessError):
    def __init__(self, message: str, layer_index: Optional[int] = None):
        self.layer_index = layer_index
        if layer_index is not None:
            message = f"layer #{layer_index}: {message}"
        super().__init__(message)


# predictor


class TooFewRows(HarnessError):
    pass


class DegenerateTargets(HarnessError):
    pass


class MissingFeature(HarnessError):
    pass


class EmptyUnlabeled(HarnessError):
    pass


class ModelIntegrityError(HarnessError):
    """A saved model whose view configuration no longer matches its recorded hash."""
