"""Exception hierarchy shared across the package."""


class BackdoorLabError(Exception):
    """Base class for every error raised deliberately by this package."""

    exit_code = 1


class InputError(BackdoorLabError, ValueError):
    """An argument is outside the documented domain."""

    exit_code = 2


class ContractError(InputError):
    """Shapes of tensors or layers do not line up."""


class ConfigError(InputError):
    """An experiment config is malformed or names an unknown key."""


class NumericError(BackdoorLabError, ArithmeticError):
    """A loss or gradient became NaN/Inf."""

    exit_code = 4


class FixtureGateError(BackdoorLabError):
    """A trained fixture missed its C-ACC/ASR gates."""

    exit_code = 3


class NonConvergenceError(BackdoorLabError):
    """Unlearning hit ``max_epochs`` with accuracy still above ``ca_min``.

    The pre/post snapshots are attached for diagnosis.
    """

    exit_code = 5

    def __init__(self, message, pre=None, post=None, epochs_used=0):
        super().__init__(message)
        self.pre = pre
        self.post = post
        self.epochs_used = epochs_used
