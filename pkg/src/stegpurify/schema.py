"""SchemaConfig: validated, dict-serialisable configuration dataclasses.

Each subclass declares its fields as a dataclass and a SCHEMA table mapping every field
name to a validator. Defaults live on the dataclass fields.

🔧 To ADD or REMOVE a field, edit both the dataclass and its SCHEMA.
"""

from dataclasses import fields
from typing import Any, Callable, ClassVar, Dict, Type, TypeVar

from stegpurify._util import ConfigurationError

Validator = Callable[[Any], bool]
T = TypeVar("T", bound="SchemaConfig")


def is_positive(val: Any) -> bool:
    """Check if value is a number strictly greater than zero."""
    return isinstance(val, (int, float)) and not isinstance(val, bool) and val > 0


def is_non_negative(val: Any) -> bool:
    """Check if value is a number greater than or equal to zero."""
    return isinstance(val, (int, float)) and not isinstance(val, bool) and val >= 0


def is_int(val: Any) -> bool:
    """Check if value is an integer (bools excluded)."""
    return isinstance(val, int) and not isinstance(val, bool)


def is_probability(val: Any) -> bool:
    """Check if value lies in [0, 1]."""
    return is_non_negative(val) and val <= 1


def is_range(val: Any) -> bool:
    """Check if value is an ordered (low, high) pair of non-negative numbers."""
    return (
        isinstance(val, (list, tuple))
        and len(val) == 2
        and all(is_non_negative(v) for v in val)
        and val[0] <= val[1]
    )


def is_optional_str(val: Any) -> bool:
    """Check if value is a string or None."""
    return val is None or isinstance(val, str)


def one_of(*choices: Any) -> Validator:
    """Validator accepting only the listed values."""
    return lambda val: val in choices


class SchemaConfig:
    """Mixin giving dataclasses SCHEMA validation and dict round-trips."""

    SCHEMA: ClassVar[Dict[str, Validator]] = {}

    def __post_init__(self) -> None:
        for name, validate in self.SCHEMA.items():
            value = getattr(self, name)
            if isinstance(value, list):
                value = tuple(value)
                object.__setattr__(self, name, value)
            if not validate(value):
                raise ConfigurationError(
                    f"Invalid value for {type(self).__name__}.{name}: {value!r}"
                )

    @classmethod
    def from_dict(cls: Type[T], raw: Dict[str, Any]) -> T:
        """Create an instance from a raw dictionary, applying defaults and validation."""
        known = {f.name for f in fields(cls)}  # type: ignore[arg-type]
        unknown = set(raw) - known
        if unknown:
            raise ConfigurationError(
                f"Unknown field(s) for {cls.__name__}: {', '.join(sorted(unknown))}"
            )
        return cls(**raw)

    def to_dict(self) -> Dict[str, Any]:
        """Serialise to plain python values (tuples become lists)."""
        out: Dict[str, Any] = {}
        for f in fields(self):  # type: ignore[arg-type]
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = list(value)
            elif isinstance(value, dict):
                value = dict(value)
            out[f.name] = value
        return out
