"""Exception types shared across the package.

Every error carries a short machine-readable ``code`` that the CLI prints as
a prefix, e.g. ``E_SHAPE: matmul: (2, 3) vs (4, 2)``.
"""


class LcatError(Exception):
    code = "E_LCAT"

    def __init__(self, message: str, code: str | None = None):
        super().__init__(message)
        if code is not None:
            self.code = code

    def __str__(self) -> str:
        return f"{self.code}: {self.args[0]}"


class ShapeError(LcatError, ValueError):
    code = "E_SHAPE"


class ConfigError(LcatError, ValueError):
    code = "E_CONFIG"


class DataFormatError(LcatError, ValueError):
    code = "E_FORMAT"


class SamplingError(LcatError, ValueError):
    code = "E_SAMPLE"


class NumericalError(LcatError, FloatingPointError):
    code = "E_NUMERIC"


class RunDirError(LcatError, RuntimeError):
    code = "E_RUNDIR"
