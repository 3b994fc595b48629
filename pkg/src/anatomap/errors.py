"""Exception and warning types shared across the package."""


class AnatomapError(Exception):
    """Base class for all package-specific errors."""


class SizeTooLarge(AnatomapError):
    """Requested patch size exceeds the source volume shape."""


class VolumeTooSmall(AnatomapError):
    """Volume cannot accommodate the configured large-patch size."""


class ShapeMismatch(AnatomapError):
    """Tensor or parameter shapes are inconsistent."""


class PointOutsidePatch(AnatomapError):
    """A match point falls outside the patch domain."""


class OverlapError(AnatomapError):
    """Two organ masks overlap more than the allowed fraction."""


class LandmarkOutOfBounds(AnatomapError):
    """A support landmark lies outside its volume."""


class CorruptCheckpoint(AnatomapError):
    """Checkpoint blob is truncated or fails its content hash."""


class ShapeManifestMismatch(AnatomapError):
    """Checkpoint manifest shapes disagree with the declared architecture."""


class GroupingError(AnatomapError):
    """Landmark count is not a multiple of six per segment."""


class GridMismatch(AnatomapError):
    """Operands live on different voxel grids."""


class SpacingMismatch(AnatomapError):
    """Operands carry different voxel spacings."""


class OrderMismatch(AnatomapError):
    """Predicted and ground-truth point lists disagree on point roles."""


class EmptyInput(AnatomapError):
    """An aggregate was requested over zero cases."""


class NanLoss(AnatomapError):
    """Training produced a non-finite loss."""


class DegenerateBoxWarning(UserWarning):
    """A bounding box collapsed to zero extent along some axis."""
