"""Exception types raised across the package."""


class ContractError(ValueError):
    """An input violates a shape or value contract."""


class ConfigError(ValueError):
    pass


class RemapError(ValueError):
    """A mask holds a raw label id the merge map does not cover."""

    def __init__(self, label_id: int, path):
        self.label_id = int(label_id)
        self.path = path
        super().__init__(f"raw label id {self.label_id} in {path} has no entry in merge_map")


class SamplingError(RuntimeError):
    pass


class CoverageError(RuntimeError):
    """A meta-test list cannot evaluate some class often enough."""

    def __init__(self, class_id: int, message: str):
        self.class_id = int(class_id)
        super().__init__(message)


class EmptyClassError(ValueError):
    def __init__(self, class_id: int):
        self.class_id = int(class_id)
        super().__init__(f"class {self.class_id} has no pixels in the mask")


class UninitializedPrototypeError(RuntimeError):
    pass


class NonFiniteLossError(RuntimeError):
    pass
