"""Exception types shared across the library and their CLI exit codes."""

EXIT_OK = 0
EXIT_ERRORS = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


class ConfigHashMismatch(ConfigError):
    """An artifact was produced under a different configuration."""

    def __init__(self, path, expected, found):
        super().__init__(
            f'Artifact "{path}" was stamped with config hash {found}, '
            f'current config hash is {expected}. Refusing to load it.')
        self.path = path
        self.expected = expected
        self.found = found


class NumericFailure(ArithmeticError):
    """A loss or forward output stopped being finite."""


class MissingArtifactError(FileNotFoundError):
    """A pipeline step needs an artifact that an earlier step did not produce."""

    def __init__(self, step, path):
        super().__init__(f'Step "{step}" requires missing artifact "{path}"')
        self.step = step
        self.path = path
