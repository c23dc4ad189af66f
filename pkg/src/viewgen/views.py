"""View positions of a chest X-ray study."""

from __future__ import annotations

from enum import Enum


class View(str, Enum):
    AP = "AP"
    PA = "PA"
    LATERAL = "LATERAL"

    @property
    def index(self) -> int:
        return _ORDER.index(self)

    @property
    def is_frontal(self) -> bool:
        return self is not View.LATERAL

    @classmethod
    def parse(cls, name: str) -> "View":
        key = name.strip().upper()
        if key in ("LAT", "LL"):
            key = "LATERAL"
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown view {name!r}; expected AP, PA or LATERAL") from None


_ORDER = (View.AP, View.PA, View.LATERAL)
ALL_VIEWS = _ORDER
