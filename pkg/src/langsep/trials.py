"""Bilingual verification protocols.

A protocol pairs utterances into trials: positives are intra-speaker
cross-lingual (same speaker, different language), negatives inter-speaker
monolingual (different speakers, same language). Unknown-language
utterances never enter a trial. Per-language speaker counts and
per-speaker sample counts are capped so frequent languages do not
dominate, and the two sides are balanced to equal size.

Sampling discipline (all driven by one generator seeded from the config,
consumed in exactly this order, which keeps builds reproducible and lets
an independent oracle follow along):

  1. languages in sorted order: where a language has more speakers than
     the cap, permute the sorted speaker ids and keep the first cap
     (no permutation is drawn when the language is within the cap)
  2. speakers in sorted order: where a speaker has more eligible
     utterances than the cap, permute the sorted utterance ids and keep
     the first cap (again only when actually over the cap)
  3. permute the lexicographically sorted positive pairs, truncate to the
     balanced count
  4. permute the lexicographically sorted negative pairs, truncate
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .dataset import UNKNOWN_LANGUAGE, UtteranceMeta
from .errors import ContractError, ParseError, ProtocolEmptyError

TARGET = 1
NONTARGET = 0


@dataclass(frozen=True)
class Trial:
    enroll_id: str
    test_id: str
    label: int

    def __post_init__(self) -> None:
        if self.enroll_id == self.test_id:
            raise ContractError("trial pairs an utterance with itself")
        if self.label not in (TARGET, NONTARGET):
            raise ContractError(f"label must be 0 or 1, got {self.label}")


@dataclass(frozen=True)
class ProtocolConfig:
    max_speakers_per_language: int = 1000
    max_samples_per_speaker: int = 15
    pairs_budget: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_speakers_per_language < 1 or self.max_samples_per_speaker < 1:
            raise ContractError("caps must be >= 1")
        if self.pairs_budget is not None and self.pairs_budget < 1:
            raise ContractError("pairs_budget must be >= 1")


def _eligible_utterances(metadata: Sequence[UtteranceMeta],
                         config: ProtocolConfig,
                         rng: np.random.Generator) -> list[UtteranceMeta]:
    """Apply the unknown-language filter and both caps (steps 1 and 2)."""
    known = [m for m in metadata if m.language_id != UNKNOWN_LANGUAGE]
    speakers_by_lang: dict[str, set[str]] = {}
    for m in known:
        speakers_by_lang.setdefault(m.language_id, set()).add(m.speaker_id)
    kept_pairs: set[tuple[str, str]] = set()
    for lang in sorted(speakers_by_lang):
        speakers = sorted(speakers_by_lang[lang])
        if len(speakers) > config.max_speakers_per_language:
            order = rng.permutation(len(speakers))
            speakers = [speakers[i] for i in order[:config.max_speakers_per_language]]
        kept_pairs.update((s, lang) for s in speakers)
    capped = [m for m in known if (m.speaker_id, m.language_id) in kept_pairs]

    by_speaker: dict[str, list[UtteranceMeta]] = {}
    for m in capped:
        by_speaker.setdefault(m.speaker_id, []).append(m)
    eligible: list[UtteranceMeta] = []
    for spk in sorted(by_speaker):
        utts = sorted(by_speaker[spk], key=lambda m: m.utterance_id)
        if len(utts) > config.max_samples_per_speaker:
            order = rng.permutation(len(utts))
            keep = sorted(order[:config.max_samples_per_speaker])
            utts = [utts[i] for i in keep]
        eligible.extend(utts)
    return eligible


def _select(pairs: list[tuple[str, str]], count: int,
            rng: np.random.Generator) -> list[tuple[str, str]]:
    """Permute a sorted pair list and truncate (steps 3 and 4)."""
    pairs = sorted(pairs)
    order = rng.permutation(len(pairs))
    return [pairs[i] for i in order[:count]]


def build_bilingual_protocol(metadata: Sequence[UtteranceMeta],
                             config: ProtocolConfig) -> list[Trial]:
    """Build a balanced cross-lingual protocol (see module docstring).

    Output order is the positive block followed by the negative block,
    each a seeded permutation of its lexicographically sorted pair list.
    """
    rng = np.random.default_rng(config.seed)
    eligible = _eligible_utterances(metadata, config, rng)

    by_speaker: dict[str, list[UtteranceMeta]] = {}
    by_language: dict[str, list[UtteranceMeta]] = {}
    for m in eligible:
        by_speaker.setdefault(m.speaker_id, []).append(m)
        by_language.setdefault(m.language_id, []).append(m)

    positives: list[tuple[str, str]] = []
    for utts in by_speaker.values():
        for i in range(len(utts)):
            for j in range(i + 1, len(utts)):
                a, b = utts[i], utts[j]
                if a.language_id != b.language_id:
                    pair = (a.utterance_id, b.utterance_id)
                    positives.append(pair if pair[0] < pair[1] else pair[::-1])
    if not positives:
        raise ProtocolEmptyError("no speaker has utterances in two languages")

    negatives: list[tuple[str, str]] = []
    for utts in by_language.values():
        for i in range(len(utts)):
            for j in range(i + 1, len(utts)):
                a, b = utts[i], utts[j]
                if a.speaker_id != b.speaker_id:
                    pair = (a.utterance_id, b.utterance_id)
                    negatives.append(pair if pair[0] < pair[1] else pair[::-1])
    if not negatives:
        raise ProtocolEmptyError("no two speakers share a language")

    count = min(len(positives), len(negatives))
    if config.pairs_budget is not None:
        count = min(count, config.pairs_budget)
    trials = [Trial(a, b, TARGET) for a, b in _select(positives, count, rng)]
    trials += [Trial(a, b, NONTARGET) for a, b in _select(negatives, count, rng)]
    return trials


# ---------------------------------------------------------------------------
# validation and statistics


@dataclass
class ValidationReport:
    n_trials: int
    violations: list[tuple[int, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_protocol(trials: Sequence[Trial],
                      metadata: Sequence[UtteranceMeta],
                      config: ProtocolConfig | None = None) -> ValidationReport:
    """Check every protocol invariant; violations carry trial indices
    (-1 for protocol-wide failures such as imbalance or cap breaches)."""
    config = config or ProtocolConfig()
    meta = {m.utterance_id: m for m in metadata}
    report = ValidationReport(n_trials=len(trials))
    used_speakers_by_lang: dict[str, set[str]] = {}
    used_utts_by_speaker: dict[str, set[str]] = {}
    n_pos = n_neg = 0
    for i, t in enumerate(trials):
        a, b = meta.get(t.enroll_id), meta.get(t.test_id)
        if a is None or b is None:
            missing = t.enroll_id if a is None else t.test_id
            report.violations.append((i, f"unknown utterance {missing!r}"))
            continue
        if UNKNOWN_LANGUAGE in (a.language_id, b.language_id):
            report.violations.append((i, "references an unknown-language utterance"))
        if t.label == TARGET:
            n_pos += 1
            if a.speaker_id != b.speaker_id:
                report.violations.append((i, "target trial with different speakers"))
            if a.language_id == b.language_id:
                report.violations.append((i, "target trial with matching languages"))
        else:
            n_neg += 1
            if a.speaker_id == b.speaker_id:
                report.violations.append((i, "nontarget trial with the same speaker"))
            if a.language_id != b.language_id:
                report.violations.append((i, "nontarget trial with different languages"))
        for m in (a, b):
            used_speakers_by_lang.setdefault(m.language_id, set()).add(m.speaker_id)
            used_utts_by_speaker.setdefault(m.speaker_id, set()).add(m.utterance_id)
    if n_pos != n_neg:
        report.violations.append((-1, f"unbalanced protocol: {n_pos} vs {n_neg}"))
    for lang, speakers in sorted(used_speakers_by_lang.items()):
        if len(speakers) > config.max_speakers_per_language:
            report.violations.append(
                (-1, f"language {lang!r} uses {len(speakers)} speakers "
                     f"(cap {config.max_speakers_per_language})"))
    for spk, utts in sorted(used_utts_by_speaker.items()):
        if len(utts) > config.max_samples_per_speaker:
            report.violations.append(
                (-1, f"speaker {spk!r} uses {len(utts)} utterances "
                     f"(cap {config.max_samples_per_speaker})"))
    return report


@dataclass(frozen=True)
class ProtocolStats:
    """Aggregates that merge additively (speaker sets merge by union)."""

    n_target: int
    n_nontarget: int
    trials_by_language: Counter
    speakers_by_language: dict[str, frozenset[str]]

    def __add__(self, other: "ProtocolStats") -> "ProtocolStats":
        langs = set(self.speakers_by_language) | set(other.speakers_by_language)
        return ProtocolStats(
            n_target=self.n_target + other.n_target,
            n_nontarget=self.n_nontarget + other.n_nontarget,
            trials_by_language=self.trials_by_language + other.trials_by_language,
            speakers_by_language={
                lang: self.speakers_by_language.get(lang, frozenset())
                | other.speakers_by_language.get(lang, frozenset())
                for lang in langs
            },
        )

    def speaker_counts(self) -> dict[str, int]:
        return {lang: len(s) for lang, s in sorted(self.speakers_by_language.items())}


def protocol_stats(trials: Sequence[Trial],
                   metadata: Sequence[UtteranceMeta]) -> ProtocolStats:
    """Count trials per label and per language (a trial counts once for
    each distinct language it touches) and collect speakers per language."""
    meta = {m.utterance_id: m for m in metadata}
    n_target = n_nontarget = 0
    by_lang: Counter = Counter()
    speakers: dict[str, set[str]] = {}
    for t in trials:
        for utt_id in (t.enroll_id, t.test_id):
            if utt_id not in meta:
                raise ContractError(f"unknown utterance id {utt_id!r}")
        a, b = meta[t.enroll_id], meta[t.test_id]
        if t.label == TARGET:
            n_target += 1
        else:
            n_nontarget += 1
        for lang in {a.language_id, b.language_id}:
            by_lang[lang] += 1
        for m in (a, b):
            speakers.setdefault(m.language_id, set()).add(m.speaker_id)
    return ProtocolStats(n_target, n_nontarget, by_lang,
                         {lang: frozenset(s) for lang, s in speakers.items()})


# ---------------------------------------------------------------------------
# trial list file: `label enrollId testId`, one per line


def save_trials(path, trials: Sequence[Trial],
                config_echo: Sequence[str] = ()) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for line in config_echo:
            f.write(f"# {line}\n")
        for t in trials:
            f.write(f"{t.label} {t.enroll_id} {t.test_id}\n")


def load_trials(path) -> list[Trial]:
    trials: list[Trial] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3 or parts[0] not in ("0", "1"):
                raise ParseError(f"{path}:{lineno}: expected 'label enroll test'")
            trials.append(Trial(parts[1], parts[2], int(parts[0])))
    return trials
