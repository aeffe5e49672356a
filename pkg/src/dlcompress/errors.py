"""Exception types raised across the toolkit.

Every error subclasses :class:`CompressError` so callers can catch the
whole family; the CLI maps each class to a module-qualified error code.
"""


class CompressError(Exception):
    """Base class for all toolkit errors."""


# --- engine ---------------------------------------------------------------

class InvalidShape(CompressError):
    """Tensor shapes incompatible with the requested operation."""


class CorruptModel(CompressError):
    """Model parameters contain NaN/Inf."""


class FormatError(CompressError):
    """Malformed model or dataset file."""


class UnsupportedVersion(FormatError):
    """Model file written by an unknown format version."""


class UnsupportedTopology(CompressError):
    """Layer graph outside the sequential + single-source-residual family."""


# --- training / data ------------------------------------------------------

class EmptyDataset(CompressError):
    """Operation needs at least one sample."""


class TrainingDiverged(CompressError):
    """Loss became NaN; carries the best checkpoint seen so far."""

    def __init__(self, message, best_model=None, losses=None):
        super().__init__(message)
        self.best_model = best_model
        self.losses = losses if losses is not None else []


# --- sensitivity ----------------------------------------------------------

class InsufficientClasses(CompressError):
    """Separability needs >= 2 classes with >= 2 images each."""


class DegenerateBaseline(CompressError):
    """Baseline separability is not positive; sensitivities undefined."""


# --- pruning --------------------------------------------------------------

class UnknownLayer(CompressError):
    """Referenced layer id does not exist in the model."""


class InvalidAmount(CompressError):
    """Prune amount outside [0, 1)."""


class NoWeights(CompressError):
    """Layer has no learnable weights to rank."""


class BudgetTooLarge(CompressError):
    """Requested prune budget exceeds the prunable unit count."""


# --- quantization ---------------------------------------------------------

class ZeroMass(CompressError):
    """All k-means sample weights are zero."""


class ZeroCost(CompressError):
    """Model has zero total cost under the requested criteria."""


#: owning module per error class, for module-qualified CLI error codes
_MODULE_OF = {
    "InvalidShape": "nn", "CorruptModel": "nn", "FormatError": "serialize",
    "UnsupportedVersion": "serialize", "UnsupportedTopology": "prune",
    "EmptyDataset": "data", "TrainingDiverged": "train",
    "InsufficientClasses": "sensitivity", "DegenerateBaseline": "sensitivity",
    "UnknownLayer": "prune", "InvalidAmount": "prune", "NoWeights": "prune",
    "BudgetTooLarge": "prune", "ZeroMass": "weight_sharing",
    "ZeroCost": "profiler",
}


def error_code(exc: BaseException) -> str:
    """Module-qualified code like 'prune.UnknownLayer'."""
    name = type(exc).__name__
    return f"{_MODULE_OF.get(name, 'dlcompress')}.{name}"
