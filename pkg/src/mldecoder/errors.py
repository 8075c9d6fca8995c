"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class ContractError(RuntimeError):
    """A caller violated an operation's usage contract."""


class LabelLookupError(KeyError):
    """A label name is not present in a word-embedding table."""


class EmptyMetricError(ValueError):
    """A metric is undefined because the input has no positives."""


class TrainingDivergedError(RuntimeError):
    """The loss became non-finite during training."""

    def __init__(self, seed, epoch, batch, loss):
        self.seed, self.epoch, self.batch, self.loss = seed, epoch, batch, loss
        super().__init__(
            f"non-finite loss {loss!r} at seed={seed} epoch={epoch} batch={batch}"
        )
