"""Exception hierarchy shared by all groundspace modules.

Errors are grouped into families; the CLI maps each family to a distinct
exit code (see ``groundspace.cli``).
"""


class GroundspaceError(Exception):
    """Base class for all errors raised by this package."""


# --- file / data-format family -------------------------------------------

class DataFormatError(GroundspaceError):
    """A file or record does not match its declared format."""


class MalformedHeader(DataFormatError):
    """Bad magic, version, field value, or checksum in a binary file."""


class ShapeMismatch(DataFormatError):
    """Dimensions declared by a header disagree with the actual payload."""


class NonFiniteValue(DataFormatError):
    """A NaN or Inf was found where only finite values are allowed."""


class DuplicateCaptionId(DataFormatError):
    """The same caption identifier appears on more than one corpus line."""


class DanglingImageRef(DataFormatError):
    """A caption references an image row outside the image matrix."""


class EmptyCluster(DataFormatError):
    """An image row owns no captions."""


class UnknownCaptionId(DataFormatError):
    """A caption identifier is not present in the corpus."""


# --- parameter-validation family ------------------------------------------

class ValidationError(GroundspaceError):
    """A parameter or configuration value violates its contract."""


class InvalidParam(ValidationError):
    """Generic invalid argument (counts, weights, flag combinations)."""


class InvalidK(ValidationError):
    """Neighborhood size k out of range for the given data."""


class InvalidM(ValidationError):
    """Requested number of principal components out of range."""


# --- numeric-degeneracy family ---------------------------------------------

class DegenerateInput(GroundspaceError):
    """The data admits no meaningful answer for the requested operation."""


class ZeroNorm(DegenerateInput):
    """A vector with (near-)zero norm reached a cosine computation."""


class DegenerateVariance(DegenerateInput):
    """A similarity or score sequence is constant; correlation undefined."""


class NoValidTriplet(DegenerateInput):
    """No (anchor, positive, negative) triplet exists in the corpus."""


class NoCoveredToken(DegenerateInput):
    """No token of the given texts appears in the concreteness lexicon."""


class SingularSystem(DegenerateInput):
    """Normal equations are rank-deficient and no ridge term was given."""


class EmptyExpectation(DegenerateInput):
    """A mean over an empty pair population was requested."""


# --- I/O family -------------------------------------------------------------

class IoFailure(GroundspaceError):
    """The operating system refused a read or write."""
