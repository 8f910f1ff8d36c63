"""Exception taxonomy shared across the package."""


class InvalidInputError(ValueError):
    """An argument violates an operation's precondition."""


class DegenerateInputError(InvalidInputError):
    """Input is structurally valid but geometrically degenerate."""


class FormatError(ValueError):
    """A file does not conform to its declared on-disk format."""


class PipelineStageError(RuntimeError):
    """A training-pipeline stage failed; the message names the stage."""
