"""Synthetic bilingual corpora and feature / metadata file formats.

Synthetic utterances are frame matrices built as

    frame = speaker_vector + confound_strength * language_vector + noise

with fixed unit vectors per speaker and per language, so the strength of
the language confound is a single knob. A fraction of language labels can
be flipped to a wrong language to mimic pseudo-labels from an imperfect
recognizer; the untouched assignments are returned separately as ground
truth.

File formats:
  metadata  CSV, header `utteranceId,speakerId,languageId,split`, UTF-8.
            Leading lines starting with '#' carry a config echo and are
            skipped on read.
  features  binary, magic + JSON header, then one record per utterance:
            u32 id length, id bytes, u32 rows, u32 cols, rows*cols
            little-endian float64 values.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, ParseError

UNKNOWN_LANGUAGE = "UNKNOWN"

SPLITS = ("train", "eval")


@dataclass(frozen=True)
class UtteranceMeta:
    utterance_id: str
    speaker_id: str
    language_id: str
    split: str

    def __post_init__(self) -> None:
        if self.split not in SPLITS:
            raise ContractError(f"split must be one of {SPLITS}, got {self.split!r}")


@dataclass(frozen=True)
class SyntheticConfig:
    num_speakers: int
    num_languages: int
    languages_per_speaker: int = 2
    utts_per_speaker_per_language: int = 4
    frames_per_utt: int = 20
    feat_dim: int = 24
    confound_strength: float = 1.0
    noise_std: float = 0.1
    pseudo_label_error_rate: float = 0.0
    eval_utts_per_speaker_per_language: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_speakers < 1 or self.num_languages < 1:
            raise ContractError("need at least one speaker and one language")
        if not 1 <= self.languages_per_speaker <= self.num_languages:
            raise ContractError("languages_per_speaker must be in [1, num_languages]")
        if self.utts_per_speaker_per_language < 1:
            raise ContractError("utts_per_speaker_per_language must be >= 1")
        if self.frames_per_utt < 1 or self.feat_dim < 1:
            raise ContractError("frames_per_utt and feat_dim must be >= 1")
        if self.confound_strength < 0.0:
            raise ContractError("confound_strength must be >= 0")
        if not 0.0 <= self.pseudo_label_error_rate < 1.0:
            raise ContractError("pseudo_label_error_rate must be in [0, 1)")
        if not 0 <= self.eval_utts_per_speaker_per_language < self.utts_per_speaker_per_language + 1:
            raise ContractError("eval_utts_per_speaker_per_language out of range")


class FeatureStore:
    """Read-only mapping from utterance id to a frames x feat_dim array."""

    def __init__(self, features: dict[str, np.ndarray] | None = None):
        self._features: dict[str, np.ndarray] = dict(features or {})

    def __contains__(self, utt_id: str) -> bool:
        return utt_id in self._features

    def __getitem__(self, utt_id: str) -> np.ndarray:
        try:
            return self._features[utt_id]
        except KeyError:
            raise ContractError(f"unknown utterance id {utt_id!r}") from None

    def __len__(self) -> int:
        return len(self._features)

    def ids(self) -> list[str]:
        return list(self._features)

    def add(self, utt_id: str, frames: np.ndarray) -> None:
        if utt_id in self._features:
            raise ContractError(f"duplicate utterance id {utt_id!r}")
        self._features[utt_id] = np.asarray(frames, dtype=np.float64)

    # -- binary container ---------------------------------------------------

    _MAGIC = b"LANGSEP-FEAT-1\n"

    def save(self, path, header: dict | None = None) -> None:
        blob = json.dumps(header or {}, sort_keys=True, separators=(",", ":")).encode()
        with open(path, "wb") as f:
            f.write(self._MAGIC)
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            for utt_id, arr in self._features.items():
                raw_id = utt_id.encode()
                f.write(struct.pack("<I", len(raw_id)))
                f.write(raw_id)
                f.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
                f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> tuple["FeatureStore", dict]:
        store = cls()
        with open(path, "rb") as f:
            if f.read(len(cls._MAGIC)) != cls._MAGIC:
                raise ParseError(f"{path}: not a feature file")
            (blob_len,) = struct.unpack("<I", f.read(4))
            header = json.loads(f.read(blob_len).decode())
            while True:
                lead = f.read(4)
                if not lead:
                    break
                (id_len,) = struct.unpack("<I", lead)
                utt_id = f.read(id_len).decode()
                rows, cols = struct.unpack("<II", f.read(8))
                raw = f.read(rows * cols * 8)
                if len(raw) != rows * cols * 8:
                    raise ParseError(f"{path}: truncated record for {utt_id!r}")
                store.add(utt_id, np.frombuffer(raw, dtype="<f8")
                          .astype(np.float64).reshape(rows, cols))
        return store, header


@dataclass
class Corpus:
    """Features plus metadata, with derived lookups used by sampling."""

    features: FeatureStore
    metadata: list[UtteranceMeta]
    languages: list[str] = field(init=False)
    language_index: dict[str, int] = field(init=False)

    def __post_init__(self) -> None:
        langs = sorted({m.language_id for m in self.metadata
                        if m.language_id != UNKNOWN_LANGUAGE})
        self.languages = langs
        self.language_index = {lang: i for i, lang in enumerate(langs)}

    def subset(self, split: str) -> "Corpus":
        return Corpus(self.features, [m for m in self.metadata if m.split == split])

    def utts_by_speaker(self) -> dict[str, list[UtteranceMeta]]:
        by_spk: dict[str, list[UtteranceMeta]] = {}
        for m in self.metadata:
            by_spk.setdefault(m.speaker_id, []).append(m)
        return by_spk


@dataclass(frozen=True)
class Batch:
    """n_speakers * m_utts utterances in speaker-major order."""

    utterance_ids: list[str]
    features: list[np.ndarray]
    speaker_ids: list[str]
    language_labels: np.ndarray
    n_speakers: int
    m_utts: int


def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    vecs = rng.normal(size=(n, dim))
    return vecs / np.linalg.norm(vecs, axis=1, keepdims=True)


def generate_synthetic(config: SyntheticConfig
                       ) -> tuple[FeatureStore, list[UtteranceMeta], dict[str, str]]:
    """Build a synthetic bilingual corpus.

    Returns (features, metadata, true_language). Metadata carries the
    *pseudo* language labels (with the configured error rate already
    applied); true_language maps each utterance id to its actual
    language. Within every speaker-language group the last
    eval_utts_per_speaker_per_language utterances are marked split=eval.
    Fully deterministic for a fixed config.
    """
    c = config
    rng_vec = np.random.default_rng((c.seed, 1))
    rng_assign = np.random.default_rng((c.seed, 2))
    rng_noise = np.random.default_rng((c.seed, 3))
    rng_pseudo = np.random.default_rng((c.seed, 4))

    spk_vecs = _unit_rows(rng_vec, c.num_speakers, c.feat_dim)
    lang_vecs = _unit_rows(rng_vec, c.num_languages, c.feat_dim)
    lang_names = [f"lang{j}" for j in range(c.num_languages)]

    store = FeatureStore()
    metadata: list[UtteranceMeta] = []
    true_language: dict[str, str] = {}
    n_eval = c.eval_utts_per_speaker_per_language
    for s in range(c.num_speakers):
        spk_id = f"spk{s:04d}"
        assigned = sorted(rng_assign.choice(
            c.num_languages, size=c.languages_per_speaker, replace=False))
        for j in assigned:
            base = spk_vecs[s] + c.confound_strength * lang_vecs[j]
            for k in range(c.utts_per_speaker_per_language):
                utt_id = f"{spk_id}-{lang_names[j]}-{k:02d}"
                noise = rng_noise.normal(scale=c.noise_std,
                                         size=(c.frames_per_utt, c.feat_dim))
                store.add(utt_id, base[None, :] + noise)
                split = ("eval" if k >= c.utts_per_speaker_per_language - n_eval
                         else "train")
                metadata.append(UtteranceMeta(utt_id, spk_id, lang_names[j], split))
                true_language[utt_id] = lang_names[j]

    # flip an exact fraction of language labels to a wrong language
    n_wrong = round(c.pseudo_label_error_rate * len(metadata))
    if n_wrong and c.num_languages > 1:
        picked = rng_pseudo.choice(len(metadata), size=n_wrong, replace=False)
        for idx in sorted(picked):
            m = metadata[idx]
            others = [l for l in lang_names if l != m.language_id]
            wrong = others[int(rng_pseudo.integers(len(others)))]
            metadata[idx] = UtteranceMeta(m.utterance_id, m.speaker_id, wrong, m.split)
    return store, metadata, true_language


# ---------------------------------------------------------------------------
# metadata CSV

_CSV_HEADER = "utteranceId,speakerId,languageId,split"


def save_metadata(path, metadata: Sequence[UtteranceMeta],
                  config_echo: Sequence[str] = ()) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for line in config_echo:
            f.write(f"# {line}\n")
        f.write(_CSV_HEADER + "\n")
        for m in metadata:
            f.write(f"{m.utterance_id},{m.speaker_id},{m.language_id},{m.split}\n")


def load_metadata(path) -> list[UtteranceMeta]:
    """Strictly parse a metadata CSV. Unknown-language rows are kept (the
    caller decides whether to exclude them); duplicate ids are rejected."""
    metadata: list[UtteranceMeta] = []
    seen: set[str] = set()
    header_seen = False
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            if not header_seen:
                if line != _CSV_HEADER:
                    raise ParseError(f"{path}:{lineno}: expected header {_CSV_HEADER!r}")
                header_seen = True
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise ParseError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            utt_id, spk_id, lang_id, split = parts
            if not utt_id or not spk_id or not lang_id:
                raise ParseError(f"{path}:{lineno}: empty field")
            if split not in SPLITS:
                raise ParseError(f"{path}:{lineno}: bad split {split!r}")
            if utt_id in seen:
                raise ContractError(f"duplicate utterance id {utt_id!r}")
            seen.add(utt_id)
            metadata.append(UtteranceMeta(utt_id, spk_id, lang_id, split))
    if not header_seen and metadata:
        raise ParseError(f"{path}: missing header")
    return metadata


# ---------------------------------------------------------------------------
# batch sampling


def sample_batch(corpus: Corpus, n_speakers: int, m_utts: int,
                 seed: int, step: int) -> Batch:
    """Draw n_speakers speakers without replacement, m_utts utterances
    each, preferring distinct languages within a speaker so that the
    batch carries cross-lingual variation. Deterministic in (seed, step).
    """
    by_spk = corpus.utts_by_speaker()
    eligible = sorted(s for s, utts in by_spk.items() if len(utts) >= m_utts)
    if len(eligible) < n_speakers:
        raise ContractError(
            f"need {n_speakers} speakers with >= {m_utts} utterances, "
            f"have {len(eligible)}")
    rng = np.random.default_rng((seed, step))
    chosen = [eligible[i] for i in rng.choice(len(eligible), size=n_speakers,
                                              replace=False)]
    utt_ids: list[str] = []
    features: list[np.ndarray] = []
    speaker_ids: list[str] = []
    labels: list[int] = []
    for spk in chosen:
        utts = sorted(by_spk[spk], key=lambda m: m.utterance_id)
        by_lang: dict[str, list[UtteranceMeta]] = {}
        for m in utts:
            by_lang.setdefault(m.language_id, []).append(m)
        langs = list(by_lang)
        rng.shuffle(langs)
        picked: list[UtteranceMeta] = []
        # one utterance per language first, then round-robin the leftovers
        for lang in langs:
            if len(picked) == m_utts:
                break
            group = by_lang[lang]
            picked.append(group.pop(int(rng.integers(len(group)))))
        while len(picked) < m_utts:
            nonempty = [lang for lang in langs if by_lang[lang]]
            group = by_lang[nonempty[int(rng.integers(len(nonempty)))]]
            picked.append(group.pop(int(rng.integers(len(group)))))
        for m in picked:
            utt_ids.append(m.utterance_id)
            features.append(corpus.features[m.utterance_id])
            speaker_ids.append(spk)
            labels.append(corpus.language_index.get(m.language_id, -1))
    return Batch(utt_ids, features, speaker_ids,
                 np.asarray(labels, dtype=np.int64), n_speakers, m_utts)
