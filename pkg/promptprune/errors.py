# =========================
# Error Hierarchy
# =========================
# Every failure raised by the library derives from PromptPruneError so the
# command-line layer can map it to an exit code in one place.


class PromptPruneError(Exception):
    """Base class for all library errors."""


class ConfigurationError(PromptPruneError):
    """Invalid configuration values or violated preconditions."""


class ShapeMismatchError(PromptPruneError):
    """Tensor extents or mask layouts do not match; the message names the block or layer."""


class NumericalError(PromptPruneError):
    """Zero norms, non-finite scores or non-finite loss terms."""


class DivergenceError(NumericalError):
    """Training produced a non-finite loss."""

    def __init__(self, iteration: int, term: str, phase: str = ""):
        self.iteration = iteration
        self.term = term
        self.phase = phase
        where = f" ({phase})" if phase else ""
        super().__init__(f"Non-finite loss at iteration {iteration}{where}: offending term '{term}'")


class CheckpointError(PromptPruneError):
    """Corrupt, truncated or incompatible checkpoint file."""


class CorpusFormatError(PromptPruneError):
    """Corrupt or inconsistent corpus files."""
