"""Exception hierarchy. Each class carries the CLI exit code and a stable prefix."""


class GDNError(Exception):
    exit_code = 1
    code = "E-GDN"


class UsageError(GDNError, ValueError):
    exit_code = 2
    code = "E-USAGE"


class DataError(GDNError, ValueError):
    """Malformed corpus, manifest, checkpoint or shape/config mismatch."""

    exit_code = 3
    code = "E-DATA"


class NumericError(GDNError, ArithmeticError):
    """Non-finite values during training or an undefined quantity."""

    exit_code = 4
    code = "E-NUMERIC"
