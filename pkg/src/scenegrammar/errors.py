"""Exception types shared across the package."""


class GrammarError(Exception):
    """Base class for grammar construction and validation failures."""


class UnknownSymbol(GrammarError):
    """A rule references a symbol that was never declared."""


class RuleProbabilityMismatch(GrammarError):
    """Rule probabilities for a symbol do not sum to one."""


class KernelUnnormalized(GrammarError):
    """A geometry kernel's declared distribution does not sum to one."""


class KernelInvalid(GrammarError):
    """A geometry kernel is structurally unusable for its rule slot."""


class EmptyPoseSpace(GrammarError):
    """A pose space has no poses (zero width/height or empty scale ladder)."""


class CyclicGrammar(GrammarError):
    """The expansion graph has a brick-level cycle, so no generative order exists."""


class CapacityExceeded(RuntimeError):
    """A requested materialization would exceed the configured budget."""


class DimensionMismatch(ValueError):
    """An assignment or evidence array does not match the grammar's brick table."""


class ScopeMismatch(ValueError):
    """A local assignment does not cover exactly a factor's scope."""


class DegenerateStatistics(RuntimeError):
    """An EM update collected zero mass for a symbol's sufficient statistics."""


class SingleClassInput(ValueError):
    """Calibration requires both positive and negative examples."""


class NoPositives(ValueError):
    """A precision-recall evaluation needs at least one positive in the truth."""
