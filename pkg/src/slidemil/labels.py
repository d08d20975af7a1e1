"""Ordinal diagnosis classes: non-neoplastic < low-grade < high-grade."""

NNEO = 1
LG = 2
HG = 3

N_CLASSES = 3

LABEL_NAMES = {NNEO: "NNeo", LG: "LG", HG: "HG"}
NAME_TO_LABEL = {v: k for k, v in LABEL_NAMES.items()}

# Fixed heatmap colors, one per class (RGB).
LABEL_COLORS = {NNEO: (46, 139, 87), LG: (255, 165, 0), HG: (178, 34, 34)}


def label_name(label: int) -> str:
    return LABEL_NAMES[label]


def parse_label(name):
    """Parse 'NNeo'/'LG'/'HG' (or an int 1..3) into a class label; '' -> None."""
    if name is None or name == "":
        return None
    if isinstance(name, int):
        if name not in LABEL_NAMES:
            raise ValueError(f"class label out of range: {name}")
        return name
    try:
        return NAME_TO_LABEL[name]
    except KeyError:
        raise ValueError(f"unknown class label: {name!r}") from None
