"""Exception types shared across the package.

Every failure mode raised by the library derives from PatchbookError so the
CLI can catch one base class and emit a machine-readable error line.
"""


class PatchbookError(Exception):
    """Base class for all library errors."""

    #: short machine-readable tag used by the CLI error line
    code = "error"


class MalformedFile(PatchbookError):
    code = "malformed_file"


class EmptyCloud(PatchbookError):
    code = "empty_cloud"


class DegenerateCloud(PatchbookError):
    code = "degenerate_cloud"


class BadK(PatchbookError):
    code = "bad_k"


class BadCount(PatchbookError):
    code = "bad_count"


class TooFewPoints(PatchbookError):
    code = "too_few_points"


class MissingNormals(PatchbookError):
    code = "missing_normals"


class BadWavelength(PatchbookError):
    code = "bad_wavelength"


class EmptyIntersection(PatchbookError):
    """Cut-off mask touched no points; caller may resample and retry."""

    code = "empty_intersection"


class RatioOutOfRange(PatchbookError):
    code = "ratio_out_of_range"


class ShapeMismatch(PatchbookError):
    code = "shape_mismatch"


class NonScalarOutput(PatchbookError):
    code = "non_scalar_output"


class NonFiniteValues(PatchbookError):
    """A tensor produced NaN/Inf during forward or backward."""

    code = "non_finite_values"


class EmptyPatch(PatchbookError):
    code = "empty_patch"


class EmptyLevel(PatchbookError):
    code = "empty_level"


class EmptyInput(PatchbookError):
    code = "empty_input"


class EmptyTemplates(PatchbookError):
    code = "empty_templates"


class UnsupportedVariant(PatchbookError):
    """Reserved strategy or attention variant that is intentionally not built."""

    code = "unsupported_variant"


class VersionMismatch(PatchbookError):
    code = "version_mismatch"


class CorruptFile(PatchbookError):
    code = "corrupt_file"


class SingleClass(PatchbookError):
    code = "single_class"


class CountMismatch(PatchbookError):
    code = "count_mismatch"


class MissingLabels(PatchbookError):
    code = "missing_labels"


class NaNLoss(PatchbookError):
    """Training loss went non-finite; message carries the offending step seed."""

    code = "nan_loss"
