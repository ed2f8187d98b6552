"""Exception hierarchy for phlab.

Every failure mode of the numerical operations gets its own class so that
callers (and the CLI exit-code logic) can react to the *kind* of failure
without string matching.
"""


class PhlabError(Exception):
    """Base class for all phlab errors."""


# --- map construction / evaluation ---------------------------------------

class UnknownFamilyError(PhlabError):
    pass


class MissingParamError(PhlabError):
    pass


class NonUnimodularMatrixError(PhlabError):
    pass


class InadmissibleEpsilonError(PhlabError):
    """Perturbation too large: inverse iteration or cone fields break."""


class NoConvergenceError(PhlabError):
    """Fixed-point solve for the inverse exceeded its iteration cap."""


# --- splitting -------------------------------------------------------------

class DegenerateFrameError(PhlabError):
    pass


class NoSeparationError(PhlabError):
    """Rate ordering ss < c < uu failed after the iteration budget."""


class NotDominatedError(PhlabError):
    """No power N within budget certifies the 1/2 domination ratio."""


class ScaleExceededError(PhlabError):
    """An iterated plaque grew beyond the local scale eps0."""


# --- leaf work -------------------------------------------------------------

class BudgetExceededError(PhlabError):
    pass


class InvalidToleranceError(PhlabError):
    pass


class FrameFailureError(PhlabError):
    pass


class NoIntersectionError(PhlabError):
    """A shooting solve failed to land within tolerance."""


class NotOnPlaqueError(PhlabError):
    pass


class LeafMissError(PhlabError):
    pass


class NoChainError(PhlabError):
    pass


# --- transversality --------------------------------------------------------

class OnBrushError(PhlabError):
    """Query point is on the brush: side is ambiguous."""


class PairingLostError(PhlabError):
    pass


class SearchBudgetError(PhlabError):
    pass


class NoCrossingError(PhlabError):
    pass


class RatioBlowupError(PhlabError):
    pass


class StepBudgetError(PhlabError):
    pass


# --- sh / gibbs ------------------------------------------------------------

class NoCandidateError(PhlabError):
    pass


class NodeBudgetError(PhlabError):
    pass


# --- config ----------------------------------------------------------------

class ConfigSyntaxError(PhlabError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class ConfigRangeError(PhlabError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
