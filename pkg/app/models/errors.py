class ErimError(Exception):
    """Base class for every error raised by erim-forge."""

    error_code = "ERIM_ERROR"

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.message = message
        self.offset = offset

    def to_dict(self):
        body = {
            'success': False,
            'message': self.message,
            'error_code': self.error_code,
        }
        if self.offset is not None:
            body['offset'] = f"0x{self.offset:x}"
        return body


class NotInSubset(ErimError):
    """Bytes at `offset` do not decode to an instruction of the subset."""

    error_code = "NOT_IN_SUBSET"


class Truncated(ErimError):
    error_code = "TRUNCATED"


class OperandRange(ErimError):
    error_code = "OPERAND_RANGE"


class NoApplicableRule(ErimError):
    error_code = "NO_APPLICABLE_RULE"


class RelocationOverflow(ErimError):
    error_code = "RELOCATION_OVERFLOW"


class RewriteError(ErimError):
    error_code = "REWRITE_FAILED"


class PageSizeError(ErimError):
    error_code = "BAD_PAGE_SIZE"


class ImageError(ErimError):
    error_code = "BAD_IMAGE"


class LayoutOverflow(ErimError):
    error_code = "LAYOUT_OVERFLOW"


class ConfigError(ErimError):
    error_code = "BAD_CONFIG"


class StartupError(ErimError):
    error_code = "STARTUP_ABORTED"


class PoolExhausted(ErimError):
    error_code = "POOL_EXHAUSTED"


class ScenarioError(ErimError):
    error_code = "BAD_SCENARIO"

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line
