"""Exception hierarchy shared by all geoblock modules."""


class GeoblockError(Exception):
    """Base class for every error raised by the library."""


class NonSPD(GeoblockError):
    pass


class DifferentiationFailure(GeoblockError):
    pass


class OverlapPolicyViolation(GeoblockError):
    pass


class StepFailure(GeoblockError):
    pass


class Inconclusive(GeoblockError):
    """A numerical verdict fell inside its dead band; perturb or refine."""


class ResolutionTooCoarse(GeoblockError):
    pass


class DegenerateRoot(GeoblockError):
    pass


class BudgetExhausted(GeoblockError):
    def __init__(self, msg, state=None):
        super().__init__(msg)
        self.state = state


class PointTooCloseToEndpoints(GeoblockError):
    pass


class StaleMetric(GeoblockError):
    pass


class ConjugateBasepoint(GeoblockError):
    pass


class InjectivityFailure(GeoblockError):
    pass


class ContainmentFailure(GeoblockError):
    pass


class NotInNeighborhood(GeoblockError):
    pass


class AlreadyInconclusive(GeoblockError):
    pass


class NeighborhoodTooLarge(GeoblockError):
    pass


class StepRejected(GeoblockError):
    def __init__(self, msg, condition=None, witness=None):
        super().__init__(msg)
        self.condition = condition
        self.witness = witness


class RootLost(GeoblockError):
    pass
