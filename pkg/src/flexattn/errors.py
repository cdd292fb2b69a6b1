"""Exception types raised across the package."""


class FlexAttentionError(Exception):
    """Base class for all errors raised by flexattn."""


class ShapeMismatch(FlexAttentionError, ValueError):
    pass


class NonFiniteInput(FlexAttentionError, ValueError):
    pass


class IndexOutOfRange(FlexAttentionError, IndexError):
    pass


class NonPositiveCap(FlexAttentionError, ValueError):
    pass


class GeometryMismatch(FlexAttentionError, ValueError):
    pass


class BlockMaskMismatch(FlexAttentionError, ValueError):
    pass


class StaleStatistics(FlexAttentionError, ValueError):
    """Saved logsumexp does not belong to the tensors passed to backward."""


class OffsetOutOfRange(FlexAttentionError, ValueError):
    pass


class OutOfPages(FlexAttentionError, RuntimeError):
    pass


class UnmappedBlock(FlexAttentionError, LookupError):
    pass


class UnmappedPhysicalIndex(FlexAttentionError, LookupError):
    """A converted modifier was evaluated on a page its batch does not own."""


class SizeTooLarge(FlexAttentionError, ValueError):
    pass


class UnknownVariant(FlexAttentionError, KeyError):
    pass


class ConfigParse(FlexAttentionError, ValueError):
    pass
