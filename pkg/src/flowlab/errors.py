"""Exception types raised across flowlab."""


class FlowlabError(Exception):
    """Base class for all flowlab errors."""


class DimensionMismatch(FlowlabError, ValueError):
    pass


class NonMetzler(FlowlabError, ValueError):
    """Raised when an off-diagonal generator entry is negative.

    ``x`` and ``y`` are 1-based state positions, matching how models are
    written down in scenario files.
    """

    def __init__(self, x, y, value):
        self.x, self.y, self.value = x, y, value
        super().__init__(f"NonMetzler({x},{y}): off-diagonal entry {value!r} < 0")


class InvalidModel(FlowlabError, ValueError):
    pass


class WitnessFound(FlowlabError):
    """A sampled vector violated E_{alpha0+1}(u, u+) >= 0."""

    def __init__(self, u, value):
        self.u, self.value = u, value
        super().__init__(f"positivity witness found: E(u,u+)={value:.3e}")


class HorizonOverflow(FlowlabError, ValueError):
    pass


class BetaTooSmall(FlowlabError, ValueError):
    pass


class NotExcessive(FlowlabError, ValueError):
    pass


class NotStrictlyPositive(FlowlabError, ValueError):
    pass


class BeyondHorizon(FlowlabError, ValueError):
    pass


class Censored(FlowlabError):
    def __init__(self, horizon):
        self.horizon = horizon
        super().__init__(f"stopping time not resolved within horizon {horizon}")


class NotSolvable(FlowlabError, ValueError):
    pass


class UnknownCheck(FlowlabError, KeyError):
    pass


class ScenarioError(FlowlabError, ValueError):
    pass
