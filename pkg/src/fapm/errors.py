"""Exception types shared across the toolkit.

Class names are part of the CLI contract: failures are reported on stderr
as ``<ClassName>: <message>``.
"""


class FapmError(Exception):
    """Base class for every operational failure raised by this package."""


# container format
class MalformedHeader(FapmError):
    pass


class OffsetOverlap(FapmError):
    pass


class TruncatedData(FapmError):
    pass


class UnknownDType(FapmError):
    pass


class InvariantViolation(FapmError):
    pass


# task vectors
class AlignmentError(FapmError):
    pass


class EmptySelection(FapmError):
    pass


class FingerprintMismatch(FapmError):
    pass


class FingerprintMismatchWarning(UserWarning):
    """Task vector applied to a base other than the one it was taken from."""


class RankMismatch(FapmError):
    pass


class MissingPair(FapmError):
    pass


# scoring and masking
class EmptyTensor(FapmError):
    pass


class ShapeMismatch(FapmError):
    pass


class NormLengthMismatch(FapmError):
    pass


class InvalidNorms(FapmError):
    pass


class SparsityOutOfRange(FapmError):
    pass


class KOutOfRange(FapmError):
    pass


# pipelines
class MissingNorms(FapmError):
    pass


class InvalidConfig(FapmError):
    pass


class AlphaOutOfRange(FapmError):
    pass


class EmptyChain(FapmError):
    pass


# reporting
class GridTooLarge(FapmError):
    pass


class NoFiniteValues(FapmError):
    pass


# synthetic lab
class InvalidSpec(FapmError):
    pass


class SingularSystem(FapmError):
    pass
