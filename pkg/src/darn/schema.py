"""Attribute schema and domain tags."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

from .autodiff import MISSING
from .errors import ConfigError, ContractError

__all__ = ["MISSING", "Domain", "AttributeSchema", "PAPER_SCHEMA", "DEFAULT_SCHEMA"]


class Domain(str, enum.Enum):
    ONLINE = "online"  # shop photos, gallery side
    OFFLINE = "offline"  # street photos, query side

    @classmethod
    def parse(cls, value) -> "Domain":
        if isinstance(value, Domain):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ContractError(f"sample domain must be 'online' or 'offline', got {value!r}") from None


@dataclass(frozen=True)
class AttributeSchema:
    categories: tuple[tuple[str, int], ...]

    def __post_init__(self):
        cats = tuple((str(n), int(c)) for n, c in self.categories)
        object.__setattr__(self, "categories", cats)
        names = [n for n, _ in cats]
        if len(set(names)) != len(names):
            raise ConfigError(f"schema.categories: duplicate names in {names}")
        for name, card in cats:
            if card < 2:
                raise ConfigError(f"schema.categories: {name!r} has cardinality {card} < 2")

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.categories]

    @property
    def cardinalities(self) -> list[int]:
        return [c for _, c in self.categories]

    @property
    def total_cardinality(self) -> int:
        return sum(self.cardinalities)

    def __len__(self) -> int:
        return len(self.categories)

    def validate_labels(self, labels: Sequence[int]) -> None:
        if len(labels) != len(self):
            raise ContractError(f"expected {len(self)} attribute values, got {len(labels)}")
        for (name, card), v in zip(self.categories, labels):
            if v != MISSING and not 0 <= v < card:
                raise ContractError(f"attribute {name!r} value {v} outside [0, {card})")

    def without(self, name: str) -> "AttributeSchema":
        return AttributeSchema(tuple(c for c in self.categories if c[0] != name))

    def to_dict(self) -> dict:
        return {"categories": [[n, c] for n, c in self.categories]}

    @classmethod
    def from_dict(cls, d: dict) -> "AttributeSchema":
        return cls(tuple((n, c) for n, c in d["categories"]))


# Nine clothing categories; cardinalities sum to 179.
PAPER_SCHEMA = AttributeSchema(
    (
        ("clothes_button", 12),
        ("clothes_category", 20),
        ("clothes_color", 56),
        ("clothes_length", 6),
        ("clothes_pattern", 27),
        ("clothes_shape", 10),
        ("collar_shape", 25),
        ("sleeve_length", 7),
        ("sleeve_shape", 16),
    )
)

DEFAULT_SCHEMA = AttributeSchema(
    (("color", 6), ("pattern", 5), ("collar", 4), ("sleeve", 4))
)
