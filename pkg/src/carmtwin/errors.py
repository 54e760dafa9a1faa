"""Exception types shared across the package."""


class CarmTwinError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(CarmTwinError):
    pass


class DegenerateProjectionError(CarmTwinError):
    pass


class DegenerateCollimationError(CarmTwinError):
    pass


class InvalidSpecError(CarmTwinError):
    pass


class InvalidLabelError(CarmTwinError):
    pass


class EmptyStructureError(CarmTwinError):
    pass


class EmptyReconstructionError(CarmTwinError):
    """Raised when no 3D point satisfies the reconstruction conditions.

    Carries per-view thresholded mask areas so callers can tell whether the
    prompt segmented at all in each view.
    """

    def __init__(self, message, per_view_mask_areas=None):
        super().__init__(message)
        self.per_view_mask_areas = dict(per_view_mask_areas or {})


class NoDetectionError(CarmTwinError):
    pass


class ParseError(CarmTwinError):
    """Action-string parse failure, naming the offending token and position."""

    def __init__(self, message, token=None, position=None):
        super().__init__(message)
        self.token = token
        self.position = position


class SegmentationUnavailableError(CarmTwinError):
    pass


class SegmentationProtocolError(CarmTwinError):
    pass


class SegmentationValidationError(CarmTwinError):
    pass


class ConfigurationError(CarmTwinError):
    pass
