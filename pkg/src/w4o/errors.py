"""Exception hierarchy shared by every pipeline stage."""


class W4OError(Exception):
    """Base class for all pipeline errors."""


# geometry
class GeometryError(W4OError):
    pass


class NonPositiveDepth(GeometryError):
    pass


class DimensionMismatch(GeometryError):
    pass


class TooFewPoints(GeometryError):
    pass


class DegenerateConfiguration(GeometryError):
    pass


# scene
class SceneError(W4OError):
    pass


class UnknownTemplate(SceneError):
    pass


class PlacementFailure(SceneError):
    pass


class UnknownObject(SceneError):
    pass


class UnparsableSubtask(SceneError):
    pass


# agents
class AgentError(W4OError):
    pass


class PlannerBackendFailure(AgentError):
    pass


class EmptyPlan(AgentError):
    pass


class ReflectionBudgetExhausted(AgentError):
    def __init__(self, message, last_candidate=None, verdicts=()):
        super().__init__(message)
        self.last_candidate = last_candidate
        self.verdicts = list(verdicts)


class BackendCallError(AgentError):
    """A backend raised while serving reflection iteration ``iteration``."""

    def __init__(self, message, iteration, cause=None):
        super().__init__(message)
        self.iteration = iteration
        self.cause = cause


class SubgoalChainError(AgentError):
    """Failure while generating the subgoal for ``index``; ``predictions`` holds the ones already made."""

    def __init__(self, message, index, predictions=(), cause=None):
        super().__init__(message)
        self.index = index
        self.predictions = list(predictions)
        self.cause = cause


class ScaleCalibrationFailure(AgentError):
    pass


class ObjectNotFound(AgentError):
    pass


# gateway
class GatewayError(W4OError):
    pass


class RetriesExhausted(GatewayError):
    def __init__(self, message, attempts):
        super().__init__(message)
        self.attempts = attempts


class BackendTimeout(RetriesExhausted):
    """Every attempt of a logical call timed out."""


class MalformedResponse(GatewayError):
    pass


class RemoteError(GatewayError):
    def __init__(self, message, status):
        super().__init__(message)
        self.status = status


class PortUnavailable(GatewayError):
    pass


# policy
class PolicyError(W4OError):
    pass


class ObjectMissing(PolicyError):
    pass


class TooFewMatches(PolicyError):
    pass


class EmptyCloud(PolicyError):
    pass


class NoCandidates(PolicyError):
    pass


class NoFeasibleGrasp(PolicyError):
    pass


class GoalInCollision(PolicyError):
    pass


class StartInCollision(PolicyError):
    pass


class PlanningFailure(PolicyError):
    pass


class ConfigError(W4OError):
    pass
