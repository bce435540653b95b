"""
Exception hierarchy for the equalizer design toolkit.

Services raise these; the CLI commands catch them and turn them into a
failed CommandReport (exit code 1).
"""


class EqoptError(Exception):
    """Base class for every domain error raised by eqopt."""


class ParameterDomainError(EqoptError):
    """A filter parameter or normalized parameter vector is out of range."""


class SceneError(EqoptError):
    """A scene cannot be loaded, built or preprocessed."""


class BandError(EqoptError):
    """Band layout is empty or a band covers no DFT bin."""


class SingularGradientError(EqoptError):
    """The loss is not differentiable at the requested point."""


class NonFiniteGradientError(EqoptError):
    """An optimizer received NaN or infinite gradients."""


class RegularizationError(EqoptError):
    """Frequency deconvolution normal matrix is singular without regularization."""


class CoefficientFileError(EqoptError):
    """Coefficient or FIR tap file cannot be parsed or does not match the scene."""
