"""Exception hierarchy shared by all terracover modules."""


class TerracoverError(Exception):
    """Base class for data errors raised by the toolkit.

    The ``module`` attribute is used by the CLI to prefix messages.
    """

    module = "terracover"

    def __str__(self):
        return f"{self.module}: {super().__str__()}"


class TaxonomyError(TerracoverError, ValueError):
    module = "taxonomy"


class RasterError(TerracoverError, ValueError):
    module = "raster"


class DatasetError(TerracoverError, ValueError):
    module = "dataset"


class MetricError(TerracoverError, ValueError):
    module = "metrics"


class NetworkError(TerracoverError, ValueError):
    module = "nn"


class TrainError(TerracoverError, ValueError):
    module = "trainer"


class AuditError(TerracoverError, ValueError):
    module = "audit"


class DataWarning(UserWarning):
    """Non-fatal data problems (empty label sets, unknown exclusion ids)."""
