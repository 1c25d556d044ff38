class HalfspaceError(Exception):
    pass


class BranchViolation(HalfspaceError):
    """Principal square root with nonpositive real part."""


class BetaZero(HalfspaceError):
    """Coupled-only quantity requested with beta = 0."""


class DegenerateLambda(HalfspaceError):
    """lambda too close to the confluent point eta for the regular branch."""


class SingularSystem(HalfspaceError):
    pass


class FloorViolated(HalfspaceError):
    def __init__(self, msg, point=None):
        super().__init__(msg)
        self.point = point


class UnstableConstant(HalfspaceError):
    pass


class SymbolVanished(HalfspaceError):
    pass


class ContourTooLow(HalfspaceError):
    pass


class NoContraction(HalfspaceError):
    def __init__(self, msg, ratios=None):
        super().__init__(msg)
        self.ratios = ratios


class SingularDiscretization(HalfspaceError):
    pass


class ConfigError(HalfspaceError):
    pass
