"""Exception hierarchy shared by all meltmon modules.

Every error carries a short machine-readable ``code`` so the command line
front end can report ``code: context`` on a single line.
"""

from __future__ import annotations


class MeltmonError(Exception):
    """Base class for all library errors."""

    code = "error"


class DataError(MeltmonError, ValueError):
    """Input data violates a precondition."""

    code = "data_error"


class EmptyTrace(DataError):
    code = "empty_trace"


class InconsistentVectorLength(DataError):
    code = "inconsistent_vector_length"

    def __init__(self, index: int, expected: int, got: int):
        super().__init__(f"sample {index} has {got} channels, expected {expected}")
        self.index = index


class InsufficientSpatialCoverage(DataError):
    code = "insufficient_spatial_coverage"


class NonPositiveTrend(DataError):
    code = "non_positive_trend"


class ChannelCountMismatch(DataError):
    code = "channel_count_mismatch"


class InsufficientSamplesAtIndex(DataError):
    code = "insufficient_samples_at_index"

    def __init__(self, k: int, count: int, required: int):
        where = "steady state" if k == 0 else f"k={k}"
        super().__init__(f"{where} has {count} samples, need {required}")
        self.k = k


class DegenerateCovariance(DataError):
    code = "degenerate_covariance"


class SchemaVersionMismatch(DataError):
    code = "schema_version_mismatch"


class CorruptFile(DataError):
    code = "corrupt_file"

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class DimensionMismatch(DataError):
    code = "dimension_mismatch"


class EmptyKernel(DataError):
    code = "empty_kernel"


class MissingPartIds(DataError):
    code = "missing_part_ids"


class InsufficientSamples(DataError):
    code = "insufficient_samples"


class LengthMismatch(DataError):
    code = "length_mismatch"


class UnknownLabelString(DataError):
    code = "unknown_label"


class TooFewLayers(DataError):
    code = "too_few_layers"


class TooFewSamples(DataError):
    code = "too_few_samples"


class ConstantActual(DataError):
    code = "constant_actual"


class RankDeficient(DataError):
    code = "rank_deficient"


class EmptyBuild(DataError):
    code = "empty_build"


class FootprintOutsideEnvelope(DataError):
    code = "footprint_outside_envelope"


class EmptyRegion(DataError):
    code = "empty_region"
