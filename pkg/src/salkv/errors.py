"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes are inconsistent with each other or with a contract."""


class ValidationError(ValueError):
    """Input values are invalid (non-finite entries, bad ranges)."""


class CapacityError(ValueError):
    """A chunk cannot fit in the cache even after evicting every unpinned entry."""


class FormatError(ValueError):
    """A tensor file is malformed. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset
