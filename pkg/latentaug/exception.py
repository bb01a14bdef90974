class LatentAugError(Exception):
    """latentaug specific errors
    """
    pass


class ManifestError(LatentAugError):
    pass


class ManifestParseError(ManifestError):
    def __init__(self, path, line_number, message):
        self.path = path
        self.line_number = line_number
        self.message = message
        super().__init__(f"{path}:{line_number}: {message}")

    def __reduce__(self):
        return type(self), (self.path, self.line_number, self.message)


class ManifestInvariantError(ManifestError):
    def __init__(self, record_path, message):
        self.record_path = record_path
        self.message = message
        super().__init__(f"record {record_path!r}: {message}")

    def __reduce__(self):
        return type(self), (self.record_path, self.message)


class VocabularyError(ManifestError):
    pass


class LabelInheritanceError(ManifestInvariantError):
    pass


class SplitError(LatentAugError):
    pass


class ConfigError(LatentAugError):
    pass


class ShapeError(LatentAugError):
    pass


class ResolutionError(LatentAugError):
    pass


class CheckpointError(LatentAugError):
    pass


class CheckpointMismatchError(CheckpointError):
    pass


class DivergenceError(LatentAugError):
    """Raised when a training or optimization loop produces a non-finite loss.

    Parameters
    ----------
    message : str
        what diverged
    diagnostics : dict, optional
        step, losses and controller state at the time of the abort
    """

    def __init__(self, message, diagnostics=None):
        self.message = message
        self.diagnostics = dict(diagnostics or {})
        detail = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
        super().__init__(f"{message} ({detail})" if detail else message)

    def __reduce__(self):
        return type(self), (self.message, self.diagnostics)


class SampleSizeError(LatentAugError):
    pass


class LatentOpsError(LatentAugError):
    pass


class ClassifierError(LatentAugError):
    pass


class CrossValidationError(LatentAugError):
    def __init__(self, fold_index, message):
        self.fold_index = fold_index
        self.message = message
        super().__init__(f"fold {fold_index}: {message}")

    def __reduce__(self):
        return type(self), (self.fold_index, self.message)


class UsageError(LatentAugError):
    pass
