class ArgumentError(ValueError):
    pass


class ConfigError(ValueError):
    def __init__(self, message, key=None, line=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key {key!r}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)
        self.key = key
        self.line = line


class NumericalError(ArithmeticError):
    """Non-finite values or a failed factorization.

    ``block`` names the residual block (or solver stage) where the problem
    surfaced and ``index`` the offending entry within it, when known.
    """

    def __init__(self, message, block=None, index=None):
        detail = ""
        if block is not None:
            detail = f" (block {block!r}" + (f", index {index}" if index is not None else "") + ")"
        super().__init__(message + detail)
        self.block = block
        self.index = index


class CapacityError(MemoryError):
    pass


class UnsupportedError(NotImplementedError):
    pass
