from .schedule import plan_end_to_end, plan_layerwise, plan_layerwise_dropout

TRAINING_MODES = {
    "layerwise": plan_layerwise,
    "layerwise-dropout": plan_layerwise_dropout,
    "end2end": plan_end_to_end,
}

DEFAULT_MODE = "layerwise"

USER_FRIENDLY_MODE_NAMES = {
    "layerwise": "Federated Layer-wise Learning",
    "layerwise-dropout": "Federated Layer-wise Learning + Depth Dropout",
    "end2end": "Federated End-to-end Learning",
}


def list_available_modes() -> list[str]:
    """Return the list of training mode names."""
    return sorted(TRAINING_MODES.keys())


def get_planner(name: str):
    """Return the round planner of a training mode."""
    if name not in TRAINING_MODES:
        raise ValueError(
            f"Unknown training mode '{name}'. "
            f"Available modes: {list_available_modes()}"
        )
    return TRAINING_MODES[name]


__all__ = [
    "TRAINING_MODES",
    "DEFAULT_MODE",
    "USER_FRIENDLY_MODE_NAMES",
    "list_available_modes",
    "get_planner",
]
