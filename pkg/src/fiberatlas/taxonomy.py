"""Canonical anatomical tract taxonomy for labeled atlases.

Defines the 78 deep and superficial white matter tract names grouped into
six anatomical categories.  Bilateral tracts appear once per hemisphere
with ``_left`` / ``_right`` suffixes; midline structures (the corpus
callosum segments and the middle cerebellar peduncle) carry no suffix.
"""

from __future__ import annotations

import enum


class TractCategory(enum.Enum):
    ASSOCIATION = "association"
    COMMISSURAL = "commissural"
    LIMBIC = "limbic"
    PROJECTION = "projection"
    CEREBELLAR = "cerebellar"
    SUPERFICIAL = "superficial"


UNLABELED = "unlabeled"

# bilateral base names per category; each expands to _left and _right
_BILATERAL = {
    TractCategory.ASSOCIATION: (
        "AF", "EC", "EmC", "ILF", "IOFF", "MdLF", "SLF-I", "SLF-II", "SLF-III", "UF",
    ),
    TractCategory.LIMBIC: ("CB-D", "CB-V"),
    TractCategory.PROJECTION: (
        "CST", "CR-F", "CR-P", "SF", "SO", "SP", "TF", "TO", "TP", "TT",
    ),
    TractCategory.CEREBELLAR: (
        "CPC", "ICP", "Intra-CBLM-I&P", "Intra-CBLM-PaT", "SCP",
    ),
    TractCategory.SUPERFICIAL: (
        "Sup-F", "Sup-FP", "Sup-O", "Sup-OT", "Sup-P", "Sup-PO", "Sup-PT", "Sup-T",
    ),
}

# midline structures, listed once
_MIDLINE = {
    TractCategory.COMMISSURAL: tuple(f"CC{i}" for i in range(1, 8)),
    TractCategory.CEREBELLAR: ("MCP",),
}


def _build_table() -> dict[str, TractCategory]:
    table: dict[str, TractCategory] = {}
    for category in TractCategory:
        for base in _BILATERAL.get(category, ()):
            table[f"{base}_left"] = category
            table[f"{base}_right"] = category
        for name in _MIDLINE.get(category, ()):
            table[name] = category
    return table


_CATEGORY_BY_NAME = _build_table()

TRACT_NAMES: tuple[str, ...] = tuple(_CATEGORY_BY_NAME)


def is_valid_tract_name(name: str) -> bool:
    return name in _CATEGORY_BY_NAME


def is_valid_label(name: str) -> bool:
    """Atlas cluster labels may also be the explicit unlabeled marker."""
    return name == UNLABELED or is_valid_tract_name(name)


def category_of(name: str) -> TractCategory:
    try:
        return _CATEGORY_BY_NAME[name]
    except KeyError:
        raise ValueError(f"unknown tract name: {name!r}") from None


def hemisphere_of(name: str) -> str | None:
    """'left', 'right', or None for midline structures."""
    category_of(name)
    if name.endswith("_left"):
        return "left"
    if name.endswith("_right"):
        return "right"
    return None


def names_in_category(category: TractCategory) -> tuple[str, ...]:
    return tuple(n for n, c in _CATEGORY_BY_NAME.items() if c is category)
