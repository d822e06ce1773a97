"""Recursive template grammar for prompt synthesis."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

MAX_DEPTH = 8
_SLOT = re.compile(r"\{([a-z_][a-z0-9_]*)\}")


class GrammarRecursionError(RecursionError):
    pass


class GrammarError(ValueError):
    pass


@dataclass
class Grammar:
    """Templates per task kind plus a choice set per placeholder.

    Choices may contain further placeholders; expansion recurses up to
    ``MAX_DEPTH`` levels.
    """

    templates: dict[str, list[str]]
    choices: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        for k, opts in self.choices.items():
            if not opts:
                raise GrammarError(f"placeholder {k!r} has an empty choice set")

    def choice_set(self, key, bindings=None) -> list[str]:
        if bindings and key in bindings:
            return list(bindings[key])
        if key not in self.choices:
            raise GrammarError(f"no choices for placeholder {{{key}}}")
        return self.choices[key]

    def expand(self, text: str, rng: np.random.Generator, bindings=None, depth: int = 0) -> str:
        if not _SLOT.search(text):
            return text
        if depth >= MAX_DEPTH:
            raise GrammarRecursionError(f"placeholder expansion exceeded depth {MAX_DEPTH}")

        def fill(m):
            opts = self.choice_set(m.group(1), bindings)
            pick = opts[int(rng.integers(len(opts)))]
            return self.expand(pick, rng, bindings, depth + 1)

        return _SLOT.sub(fill, text)

    def leaves(self) -> int:
        return sum(len(v) for v in self.choices.values())


def expand_prompt(kind: str, grammar: Grammar, rng: np.random.Generator, bindings=None) -> str:
    """Sample a template for ``kind`` and fill every placeholder recursively."""
    templates = grammar.templates.get(kind)
    if not templates:
        raise GrammarError(f"grammar has no templates for task kind {kind!r}")
    tmpl = templates[int(rng.integers(len(templates)))]
    return grammar.expand(tmpl, rng, bindings)


def membership_pattern(kind: str, grammar: Grammar, bindings=None) -> re.Pattern:
    """Regex accepting exactly the strings derivable from ``kind``'s templates."""
    cache: dict[str, str] = {}

    def rx(text, depth):
        if depth > MAX_DEPTH:
            raise GrammarRecursionError("grammar recursion while building the membership pattern")
        parts, pos = [], 0
        for m in _SLOT.finditer(text):
            parts.append(re.escape(text[pos : m.start()]))
            key = m.group(1)
            if key not in cache:
                alts = [rx(o, depth + 1) for o in grammar.choice_set(key, bindings)]
                cache[key] = "(?:" + "|".join(alts) + ")"
            parts.append(cache[key])
            pos = m.end()
        parts.append(re.escape(text[pos:]))
        return "".join(parts)

    return re.compile("(?:" + "|".join(rx(t, 0) for t in grammar.templates[kind]) + r")\Z")


def default_grammar() -> Grammar:
    """The shipped prompt grammar for every task kind."""
    templates = {
        "segment": [
            "{segment_verb} the {roi}{in_scan}.",
            "Please {segment_verb_lc} the {roi}{in_scan}.",
            "{polite} {segment_verb_lc} the {roi}{in_scan}?",
            "I need a {mask_noun} of the {roi}{in_scan}.",
        ],
        "roi_metric": [
            "What is the {metric} of the {roi}{in_scan}?",
            "{report} the {metric} of the {roi}.",
            "{polite} {measure_verb_lc} the {metric} of the {roi}?",
        ],
        "compare_multi": [
            "How much larger is the {roi} than the {roi2}{in_scan}?",
            "What is the volume difference between the {roi} and the {roi2}?",
            "{polite} compare the volume of the {roi} with the {roi2}?",
        ],
        "longitudinal": [
            "How much has the {roi} {changed} between the {scans}?",
            "What is the change in {roi} volume {across} the {scans}?",
            "{polite} {measure_verb_lc} the growth of the {roi} {across} the {scans}?",
        ],
        "classify_intensity": [
            "{describe} the signal intensity of the lesion{in_scan}.",
            "{is_lesion} hyperintense, hypointense, or isointense{in_scan}?",
            "What is the {intensity_noun} of the lesion relative to {surrounding}?",
        ],
        "classify_location": [
            "Where is the lesion located?",
            "{describe} the location of the lesion{in_scan}.",
            "In which hemisphere {is_found} the lesion?",
        ],
    }
    choices = {
        "segment_verb": ["Segment", "Delineate", "Outline", "Label"],
        "segment_verb_lc": ["segment", "delineate", "outline", "label", "mask out"],
        "polite": ["Can you", "Could you", "Would you", "{polite_long}"],
        "polite_long": ["Could you please", "Would you kindly", "Can you please"],
        "mask_noun": ["segmentation", "mask", "label map", "{adj} segmentation"],
        "adj": ["precise", "careful", "full"],
        "in_scan": ["", " in this scan", " in the image", " on this {modality_word}"],
        "modality_word": ["scan", "image", "MRI", "volume"],
        "report": ["Report", "Measure", "Compute", "Calculate", "Estimate"],
        "metric": ["volume", "total volume", "size"],
        "measure_verb_lc": ["measure", "compute", "calculate", "estimate"],
        "changed": ["changed", "grown", "increased"],
        "across": ["across", "between", "over"],
        "scans": ["two scans", "two sessions", "baseline and follow-up scans", "{visit} visits"],
        "visit": ["two", "both"],
        "describe": ["Describe", "Characterize", "Classify"],
        "is_lesion": ["Is the lesion", "Does the lesion appear"],
        "intensity_noun": ["signal intensity", "intensity", "brightness"],
        "surrounding": ["surrounding tissue", "the surrounding tissue", "nearby {tissue}"],
        "tissue": ["tissue", "parenchyma", "brain tissue"],
        "is_found": ["is", "do you find"],
    }
    return Grammar(templates, choices)
