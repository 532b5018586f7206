"""Exception types shared across the simulator."""


class LunarDTNError(Exception):
    pass


class ConfigError(LunarDTNError):
    """Invalid or unsatisfiable configuration."""


class ConstraintViolation(LunarDTNError):
    """A flow-vs-rate or buffer-bound check failed during a step.

    This always indicates a simulator bug, never a bad policy.
    """


class CapacityError(LunarDTNError):
    """A neighborhood does not fit in the padded observation."""


class FormatError(LunarDTNError):
    """Malformed checkpoint or log file."""


class ShapeError(LunarDTNError):
    pass


class InsufficientData(LunarDTNError):
    pass
