"""Exception types shared across the package."""


class KnnMtError(Exception):
    """Base class for all errors raised by knnmt."""


class DimensionMismatchError(KnnMtError, ValueError):
    def __init__(self, expected, actual, what="query"):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what} dimension {actual} does not match expected dimension {expected}")


class VocabularyError(KnnMtError, ValueError):
    def __init__(self, sentence_index, token):
        self.sentence_index = sentence_index
        self.token = token
        super().__init__(f"sentence {sentence_index}: token {token!r} is outside the model vocabulary")


class FileFormatError(KnnMtError, ValueError):
    """Base class for binary file decoding failures."""


class BadMagicError(FileFormatError):
    def __init__(self, expected, actual):
        self.expected = expected
        self.actual = actual
        super().__init__(f"bad magic: expected {expected!r}, found {actual!r}")


class TruncatedFileError(FileFormatError):
    def __init__(self, expected_bytes, actual_bytes):
        self.expected_bytes = expected_bytes
        self.actual_bytes = actual_bytes
        super().__init__(f"truncated file: expected {expected_bytes} bytes, found {actual_bytes}")


class InvalidHeaderError(FileFormatError):
    pass
