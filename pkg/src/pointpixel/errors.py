"""Exception types raised across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or unknown config key."""


class ContractError(ValueError):
    """An input violates a documented precondition (shapes, unit norms, ...)."""


class DegeneratePairError(ContractError):
    """Two points are too close to define a hardness."""


class DegenerateFeatureError(ContractError):
    """A pre-normalization feature vector has (near) zero norm."""


class SamplingError(RuntimeError):
    """A sampler could not satisfy its constraints within its attempt budget."""


class TrainingAborted(RuntimeError):
    """Raised when the loss or the gradients become non-finite."""

    def __init__(self, message: str, iteration: int, batch_seed: int):
        super().__init__(f"{message} (iteration={iteration}, batch_seed={batch_seed})")
        self.iteration = iteration
        self.batch_seed = batch_seed
