class ContractViolation(ValueError):
    """Raised when an operation is called with arguments that break its contract."""


class ConfigError(ValueError):
    """Invalid experiment configuration. ``problems`` lists field-level messages."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class CheckpointError(RuntimeError):
    pass


class TrainingAborted(RuntimeError):
    pass
