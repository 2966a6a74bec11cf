"""
Instruction templates and synonym banks.

Every task kind has one canonical template (what the demonstrations use), a
train-visible split (allowed for instruction augmentation) and a holdout split
whose content words never occur in any training string.
"""

import logging
import re
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

import config
from exceptions import UnknownTemplateError

logger = logging.getLogger('vla.paraphrase')

SPLITS = ("train", "holdout")
FUNCTION_WORDS = frozenset({"the", "to"})

CANONICAL_TEMPLATES = {
    "Reach": "reach the {target}",
    "Pick": "pick the {target}",
    "PlaceNear": "move the {target} near the {reference}",
}

DEFAULT_BANK_ENTRIES = {
    "Reach": {
        "train": ["reach for the {target}", "approach the {target}"],
        "holdout": ["go to the {target}", "touch the {target}"],
    },
    "Pick": {
        "train": ["pick up the {target}", "take the {target}"],
        "holdout": ["grasp the {target}", "get the {target}", "lift the {target}"],
    },
    "PlaceNear": {
        "train": ["put the {target} near the {reference}"],
        "holdout": ["place the {target} beside the {reference}", "bring the {target} next to the {reference}"],
    },
}

_DESCRIPTOR = r"[a-z]+ [a-z]+"


def _template_regex(template: str) -> re.Pattern:
    pattern = re.escape(template)
    pattern = pattern.replace(re.escape("{target}"), f"(?P<target>{_DESCRIPTOR})")
    pattern = pattern.replace(re.escape("{reference}"), f"(?P<reference>{_DESCRIPTOR})")
    return re.compile(f"^{pattern}$")


@dataclass
class ParaphraseBank:
    """Template tables per task kind: canonical form plus train/holdout synonym lists."""

    entries: Dict[str, Dict[str, List[str]]] = field(
        default_factory=lambda: {k: {s: list(v[s]) for s in SPLITS} for k, v in DEFAULT_BANK_ENTRIES.items()}
    )
    canonical: Dict[str, str] = field(default_factory=lambda: dict(CANONICAL_TEMPLATES))

    def templates(self, kind: str, split: str) -> List[str]:
        if split not in SPLITS:
            raise ValueError(f"Unknown paraphrase split {split!r}")
        if kind not in self.entries:
            raise UnknownTemplateError(f"No paraphrase entry for task kind {kind!r}")
        return self.entries[kind][split]

    def all_templates(self) -> List[Tuple[str, str]]:
        """(task kind, template) for the canonical form and every split."""
        out = []
        for kind, template in self.canonical.items():
            out.append((kind, template))
            for split in SPLITS:
                out.extend((kind, t) for t in self.entries.get(kind, {}).get(split, []))
        return out

    def parse(self, instruction: str) -> Tuple[str, str, Optional[str]]:
        """
        Recover (task kind, target descriptor, reference descriptor) from any
        instruction the bank can produce.

        Raises:
            UnknownTemplateError: No template matches
        """
        for kind, template in self.all_templates():
            match = _template_regex(template).match(instruction)
            if match:
                groups = match.groupdict()
                return kind, groups["target"], groups.get("reference")
        raise UnknownTemplateError(f"Instruction does not match any template: {instruction!r}")


def descriptor(color: str, shape: str) -> str:
    return f"{color} {shape}"


def render_template(template: str, target: str, reference: Optional[str] = None) -> str:
    if "{reference}" in template and reference is None:
        raise UnknownTemplateError(f"Template {template!r} needs a reference descriptor")
    return template.format(target=target, reference=reference)


def canonical_instruction(kind: str, target: str, reference: Optional[str] = None) -> str:
    if kind not in CANONICAL_TEMPLATES:
        raise UnknownTemplateError(f"Unknown task kind {kind!r}")
    return render_template(CANONICAL_TEMPLATES[kind], target, reference)


def paraphrase(
    instruction: str,
    bank: ParaphraseBank,
    rng: np.random.Generator,
    split: str = "holdout",
) -> str:
    """
    Substitute the instruction's verb phrase with a synonym from one bank split.

    Args:
        instruction (str): Instruction produced by a known template
        bank (ParaphraseBank): Template tables
        rng (np.random.Generator): Stream used to pick the synonym
        split (str): ``train`` (augmentation) or ``holdout`` (evaluation)

    Returns:
        str: The paraphrased instruction; identity when the split holds only the
        instruction's own template
    """
    kind, target, reference = bank.parse(instruction)
    options = bank.templates(kind, split)
    if not options:
        return instruction
    template = options[int(rng.integers(len(options)))] if len(options) > 1 else options[0]
    return render_template(template, target, reference)


def all_descriptors() -> List[str]:
    return [descriptor(c, s) for s in config.SHAPES for c in config.COLORS]


def instruction_corpus(bank: Optional[ParaphraseBank] = None) -> List[str]:
    """Every instruction any template can produce (canonical and both splits)."""
    bank = bank or ParaphraseBank()
    descriptors = all_descriptors()
    out = []
    for _, template in bank.all_templates():
        for target in descriptors:
            if "{reference}" in template:
                out.extend(render_template(template, target, ref) for ref in descriptors if ref != target)
            else:
                out.append(render_template(template, target))
    return out


def content_words(texts: Iterable[str]) -> set:
    return {w for t in texts for w in t.split() if w.isalpha() and w not in FUNCTION_WORDS}


def holdout_words(bank: Optional[ParaphraseBank] = None) -> set:
    """Content words introduced by the holdout split (descriptors excluded)."""
    bank = bank or ParaphraseBank()
    fixed = set(config.COLORS) | set(config.SHAPES)
    words = set()
    for kind in bank.entries:
        for template in bank.templates(kind, "holdout"):
            stripped = template.replace("{target}", "").replace("{reference}", "")
            words |= content_words([stripped])
    return words - fixed
