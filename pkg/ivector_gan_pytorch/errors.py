# error hierarchy
# the cli maps each class to its own exit code

class IVectorGanError(Exception):
    exit_code = 1

class ConfigError(IVectorGanError, ValueError):
    exit_code = 2

class DataError(IVectorGanError, ValueError):
    exit_code = 3

class DivergenceError(IVectorGanError, ArithmeticError):
    exit_code = 4

    def __init__(self, message, epoch = None):
        if epoch is not None:
            message = f'{message} (epoch {epoch})'

        super().__init__(message)
        self.epoch = epoch
