class TSFusionError(Exception):
    """Base class for every error the forecasting engine raises on purpose."""

    exit_code = 3


class ShapeError(TSFusionError):
    pass


class RankError(ShapeError):
    pass


class InsufficientHistoryError(TSFusionError):
    pass


class DegenerateRowError(TSFusionError):
    pass


class NumericError(TSFusionError):
    pass


class DataError(TSFusionError):
    pass


class ValidationError(DataError):
    pass


class ConsistencyError(DataError):
    pass


class UnrecoverableSeriesError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class ConfigError(TSFusionError):
    exit_code = 2


class DivergenceError(TSFusionError):
    exit_code = 4

    def __init__(self, epoch: int, learning_rate: float, loss: float):
        super().__init__(
            f"non-finite loss {loss} at epoch {epoch} (learning rate {learning_rate})"
        )
        self.epoch = epoch
        self.learning_rate = learning_rate
        self.loss = loss
