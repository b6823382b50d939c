"""Exception hierarchy shared by all modules."""


class PdpError(Exception):
    pass


class InvalidSize(PdpError, ValueError):
    pass


class EpisodeFinished(PdpError):
    pass


class InfeasibleAction(PdpError, ValueError):
    """Raised by ``env.step``; ``rule`` is one of ``Visited``, ``Precedence``, ``Depot``."""

    def __init__(self, rule: str, node: int):
        super().__init__(f"{rule}: node {node} is not a feasible action")
        self.rule = rule
        self.node = node


class InvalidTour(PdpError, ValueError):
    pass


class TooLarge(PdpError, ValueError):
    pass


class ShapeError(PdpError, ValueError):
    pass


class MaskExhausted(PdpError):
    pass


class GradientUnavailable(PdpError):
    pass


class CheckpointError(PdpError):
    pass


class InvalidReference(PdpError, ValueError):
    pass
