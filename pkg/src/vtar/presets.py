"""Ready-made synthetic corpora.

The generic corpus stands in for a large pre-training set: eight motion
classes described with everyday wordings. The task corpus holds four
material-handling classes whose label texts never occur in the generic
captions. "carrying" and "pushing" share a verb with some generic class.
"loading" shares none, though its visual (a box raised from below) matches
the generic lifting captions. "pulling" only appears as "pull ups"; its
visual (actor on the leading side) only appears under "towing". Pushing and
pulling differ only in which side of the box the actor is on.

Directions are in image coordinates (dy < 0 moves up). Horizontal flips
during augmentation preserve every class, because each one is defined by
the actor's position relative to the motion.
"""
from __future__ import annotations

from .data import SyntheticClass, SyntheticSpec

SPEED = (0.2, 0.3)

GENERIC_CLASSES = [
    SyntheticClass("pushing a cart", (1, 0), "left", SPEED,
                   ["pushing a cart", "pushing a stroller", "pushing a wheelbarrow", "pushing a trolley"]),
    SyntheticClass("carrying weight", (1, 0), "below", SPEED,
                   ["carrying weight", "carrying a bag", "carrying groceries", "carrying a suitcase"]),
    SyntheticClass("deadlifting", (0, -1), "below", SPEED,
                   ["deadlifting", "lifting a barbell", "lifting weights", "lifting a hat"]),
    SyntheticClass("pull ups", (0, -1), "above", SPEED,
                   ["pull ups", "doing pull ups", "chin ups", "climbing a rope"]),
    SyntheticClass("towing a car", (-1, 0), "left", SPEED,
                   ["towing a car", "towing a boat", "walking the dog", "leading a horse"]),
    SyntheticClass("dropping a ball", (0, 1), "none", SPEED,
                   ["dropping a ball", "falling rock", "dropping a stone", "a falling object"]),
    SyntheticClass("sliding", (1, 0), "none", SPEED,
                   ["sliding", "sliding on ice", "rolling a tire", "gliding"]),
    SyntheticClass("standing still", (0, 0), "left", SPEED,
                   ["standing still", "waiting in line", "standing next to a table", "resting"]),
]

TASK_CLASSES = [
    SyntheticClass("loading a box", (0, -1), "below", SPEED),
    SyntheticClass("carrying a box", (1, 0), "below", SPEED),
    SyntheticClass("pushing a box", (1, 0), "left", SPEED),
    SyntheticClass("pulling a box", (1, 0), "right", SPEED),
]

TASK_LABELS = [c.label for c in TASK_CLASSES]
PUSH_PULL_MERGE = {"pushing or pulling a box": ["pushing a box", "pulling a box"]}

# label-wording variants for the task classes, in TASK_LABELS order
PROMPT_VARIANTS = {
    "matched": list(TASK_LABELS),
    "lifting": ["lifting a box", "carrying a box", "pushing a box", "pulling a box"],
    "load": ["loading a load", "carrying a load", "pushing a load", "pulling a load"],
    "verb only": ["loading", "carrying", "pushing", "pulling"],
    "photo of": ["a photo of someone loading a box", "a photo of someone carrying a box",
                 "a photo of someone pushing a box", "a photo of someone pulling a box"],
    "mismatched": ["pulling a box", "loading a box", "carrying a box", "pushing a box"],
}


def generic_spec(seed: int = 0, clips_per_class: int = 16, **overrides) -> SyntheticSpec:
    return SyntheticSpec(GENERIC_CLASSES, clips_per_class=clips_per_class, seed=seed, **overrides)


def task_spec(seed: int = 0, clips_per_class: int = 20, **overrides) -> SyntheticSpec:
    return SyntheticSpec(TASK_CLASSES, clips_per_class=clips_per_class, seed=seed, **overrides)
