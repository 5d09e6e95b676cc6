"""Exception hierarchy shared by every avar module.

The CLI maps ``ValidationError`` and ``FormatError`` to exit code 2 and
``BackendError`` to exit code 3.
"""


class AvarError(Exception):
    pass


class ValidationError(AvarError, ValueError):
    pass


class OverlapError(ValidationError):
    pass


class OutOfRange(ValidationError):
    pass


class NegativeEntry(ValidationError):
    def __init__(self, l, h, q, k, value):
        super().__init__(f"negative attention {value!r} at layer={l} head={h} q={q} k={k}")
        self.where = (l, h, q, k)


class RowSumError(ValidationError):
    def __init__(self, l, h, q, total):
        super().__init__(f"row sum {total!r} != 1 at layer={l} head={h} q={q}")
        self.where = (l, h, q)
        self.total = total


class CausalViolation(ValidationError):
    def __init__(self, l, h, q, k, value):
        super().__init__(f"causal mask violated ({value!r}) at layer={l} head={h} q={q} k={k}")
        self.where = (l, h, q, k)


class ShapeMismatch(ValidationError):
    pass


class EmptySystemSpan(ValidationError):
    pass


class EmptyImageSpan(ValidationError):
    pass


class EmptyQuerySet(ValidationError):
    pass


class EmptyResponseSpan(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class NegativeScore(ValidationError):
    pass


class DegenerateVariance(ValidationError):
    pass


class InvalidConfig(ValidationError):
    pass


class InvalidGamma(ValidationError):
    pass


class SequenceTooLong(ValidationError):
    pass


class SymbolOutOfRange(ValidationError):
    pass


class NonFiniteInput(ValidationError):
    pass


class GroupTooSmall(ValidationError):
    pass


class NonFiniteRatio(ValidationError):
    pass


class StaleTrace(AvarError):
    pass


class AllMasked(ValidationError):
    pass


class FormatError(AvarError, ValueError):
    pass


class BadMagic(FormatError):
    pass


class HeaderParseError(FormatError):
    pass


class LengthMismatch(FormatError):
    """Byte-length or sequence-length disagreement."""


class BackendError(AvarError):
    pass


class EmptyOutput(BackendError):
    pass


class NoAnchorProduced(BackendError):
    pass
