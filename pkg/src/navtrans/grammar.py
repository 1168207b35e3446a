"""Seeded template grammar that verbalizes a path of graph edges."""
from __future__ import annotations

import re
from typing import Sequence

import numpy as np

from .graph import Triplet

DEFAULT_BEHAVIORS = (
    "exit_office",
    "enter_office",
    "follow_corridor",
    "turn_left",
    "turn_right",
    "go_straight",
    "cross_hall",
    "take_stairs",
)

TEMPLATES: dict[str, list[str]] = {
    "exit_office": ["exit the office", "leave the office", "get out of the room"],
    "enter_office": ["enter the office", "go into the office", "walk into the room"],
    "follow_corridor": ["follow the corridor", "go down the hallway", "walk along the corridor"],
    "turn_left": ["turn left", "take a left", "make a left turn"],
    "turn_right": ["turn right", "take a right", "make a right turn"],
    "go_straight": ["go straight", "keep going forward", "continue straight ahead"],
    "cross_hall": ["cross the hall", "walk across the hall", "pass through the hall"],
    "take_stairs": ["take the stairs", "climb the stairs", "use the staircase"],
}

LANDMARKS = ["to the {place}", "until you reach the {place}", "toward the {place}"]
CONNECTORS = ["then", "and", "and then", "after that", ","]

ROOM_KINDS = (
    "office",
    "corridor",
    "kitchen",
    "hall",
    "lab",
    "lobby",
    "bathroom",
    "classroom",
    "meeting_room",
    "storage",
)

_TRAILING_NUM = re.compile(r"[_\-]?\d+$")


def templates_for(behavior: str) -> list[str]:
    if behavior in TEMPLATES:
        return TEMPLATES[behavior]
    words = behavior.replace("-", " ").replace("_", " ")
    return [words, f"now {words}", f"you should {words}"]


def place_words(node: str) -> str:
    """'meeting_room_12' -> 'meeting room'"""
    return _TRAILING_NUM.sub("", node).replace("_", " ").replace("-", " ").strip() or node


def render_instruction(
    path: Sequence[Triplet],
    template_choices: Sequence[int],
    landmarks: Sequence[int | None] | None = None,
    connectors: Sequence[int] | None = None,
) -> list[str]:
    """Deterministic surface form of ``path`` for explicit grammar choices.

    ``landmarks[i]`` selects a landmark phrase naming the destination of step
    i (None for no mention); ``connectors[i]`` joins step i and step i+1.
    """
    n = len(path)
    landmarks = landmarks if landmarks is not None else [None] * n
    connectors = connectors if connectors is not None else [0] * max(n - 1, 0)
    words: list[str] = []
    for i, e in enumerate(path):
        if i:
            words.append(CONNECTORS[connectors[i - 1]])
        opts = templates_for(e.b)
        words.append(opts[template_choices[i] % len(opts)])
        if landmarks[i] is not None:
            words.append(LANDMARKS[landmarks[i]].format(place=place_words(e.n2)))
    return tokenize(" ".join(words))


def tokenize(text: str) -> list[str]:
    return re.findall(r"[a-z0-9]+|[^\sa-z0-9]", text.lower())


def generate_instruction(path: Sequence[Triplet], seed, landmark_prob: float = 0.3) -> list[str]:
    rng = np.random.default_rng(seed)
    n = len(path)
    choices = [int(rng.integers(len(templates_for(e.b)))) for e in path]
    marks = [
        int(rng.integers(len(LANDMARKS))) if rng.random() < landmark_prob else None for _ in path
    ]
    joins = [int(rng.integers(len(CONNECTORS))) for _ in range(max(n - 1, 0))]
    return render_instruction(path, choices, marks, joins)
