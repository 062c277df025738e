"""Exception hierarchy. Every error raised by the runtime derives from EvolveError."""


class EvolveError(Exception):
    pass


# registry
class DuplicateId(EvolveError):
    pass


class InvalidPayload(EvolveError, ValueError):
    pass


class NotFound(EvolveError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class VersionOutOfRange(EvolveError, IndexError):
    pass


class StaleBase(EvolveError):
    pass


class ArtifactPruned(EvolveError):
    pass


class AlreadyPruned(EvolveError):
    pass


class UnknownSnapshot(EvolveError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class StorageFailure(EvolveError, OSError):
    pass


# evidence
class NonMonotonicEpisode(EvolveError):
    pass


class EndOutOfRange(EvolveError, IndexError):
    pass


class EmptyWindow(EvolveError, ValueError):
    pass


class EmptyPatternSet(EvolveError, ValueError):
    pass


class ZeroTotal(EvolveError, ValueError):
    pass


class PassedExceedsTotal(EvolveError, ValueError):
    pass


# solve
class BackendUnavailable(EvolveError):
    pass


class MalformedAction(EvolveError, ValueError):
    pass


# sandbox
class SandboxUnavailable(EvolveError):
    pass


class SignatureViolation(EvolveError, ValueError):
    pass


class UnresolvableTarget(EvolveError):
    pass


# evolver
class BudgetExhausted(EvolveError):
    pass


class MalformedBackendReply(EvolveError, ValueError):
    pass


class InvalidPlan(EvolveError, ValueError):
    def __init__(self, rule, detail=""):
        self.rule = rule
        super().__init__(f"{rule}: {detail}" if detail else rule)


# governance
class StaleCandidate(EvolveError):
    pass


class UnresolvedTicket(EvolveError):
    pass


class ChainMismatch(EvolveError):
    pass


class AlreadyResolved(EvolveError):
    pass


# harness
class InvalidSchedule(EvolveError, ValueError):
    pass


class EmptyInput(EvolveError, ValueError):
    pass


class EmptyScores(EvolveError, ValueError):
    pass


class ScoreOutOfRange(EvolveError, ValueError):
    pass


# cli / runner
class ConfigError(EvolveError, ValueError):
    pass


class WorkspaceLocked(EvolveError):
    pass
