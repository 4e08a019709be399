"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures to the
documented process exit status without a lookup table.
"""


class TacIndexError(Exception):
    exit_code = 3


class UsageError(TacIndexError):
    """Invalid parameters or configuration."""

    exit_code = 1


class DataError(TacIndexError):
    """Malformed or inconsistent input data."""

    exit_code = 2


class InvariantViolation(TacIndexError):
    exit_code = 3


# corpus files
class CorpusFormatError(DataError):
    pass


class MalformedHeaderError(CorpusFormatError):
    pass


class SizeMismatchError(CorpusFormatError):
    pass


class NonMonotoneOffsetsError(CorpusFormatError):
    pass


class NormalizationError(CorpusFormatError):
    pass


class TokenRangeError(CorpusFormatError):
    pass


class QrelsFormatError(DataError):
    pass


# clustering
class InfeasibleBudgetError(UsageError):
    pass


class ZeroWeightError(DataError):
    pass


class ClusteringError(InvariantViolation):
    """Raised when a per-token clustering job fails; carries the token id."""

    def __init__(self, token_id, cause):
        super().__init__(f"clustering failed for token {token_id}: {cause}")
        self.token_id = token_id
        self.cause = cause


class MissingTokenError(DataError):
    pass


# index
class IndexIntegrityError(DataError):
    """Index components disagree (hash mismatch, missing file)."""


class CorruptRecordError(DataError):
    def __init__(self, doc_id, reason):
        super().__init__(f"corrupted record for document {doc_id}: {reason}")
        self.doc_id = doc_id


# evaluation
class UnknownMetricError(UsageError):
    pass


class IdMismatchError(DataError):
    pass
