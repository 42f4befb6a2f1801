FEATURES = [
    "flow",
    "speed",
    "occupancy",
]

FEATURE_UNITS = {
    "flow": "vehicles/5-min",
    "speed": "mph",
    "occupancy": "fraction",
}

FEATURE2ID = {name: i for i, name in enumerate(FEATURES)}
ID2FEATURE = {i: name for name, i in FEATURE2ID.items()}

STEP_MINUTES = 5
MINUTES_PER_DAY = 1440

# forecast lead times reported by default: 15/30/45 minutes at 5-minute steps
HORIZON_STEPS = (3, 6, 9)

VARIANTS = {
    "full": {},
    "nG": {"no_global": True},
    "nL": {"no_local": True},
    "nFE": {"no_feature_enhance": True},
    "nGate": {"no_gate": True},
    "nRes": {"no_residual": True},
}

# comparison models that coincide with a variant
VARIANT_ALIASES = {
    "stgcn": "nG",
    "graphormer-t": "nL",
}


def feature_ids(names) -> list:
    return [FEATURE2ID[n] for n in names]


def slots_per_day(step_minutes: int = STEP_MINUTES) -> int:
    return MINUTES_PER_DAY // step_minutes


def resolve_variant(name: str) -> dict:
    name = VARIANT_ALIASES.get(name, name)
    if name not in VARIANTS:
        raise KeyError(name)
    return dict(VARIANTS[name])
