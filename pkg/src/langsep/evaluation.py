"""Verification scoring, EER, minDCF, and the language probe.

Trial scores are segment-averaged cosines: each utterance is cut into
segments starting at evenly spaced offsets, every segment is embedded,
and the score is the mean cosine over all cross-utterance segment pairs.
EER is found by sweeping thresholds at score midpoints and linearly
interpolating the FRR / FAR crossing. minDCF is the minimum over the same
candidate thresholds of the normalized detection cost.

The language probe trains a fresh classifier (same shape as the model's
language head) on frozen utterance embeddings and reports held-out
accuracy; lower accuracy means less language information survives in the
embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import losses as lo
from . import model as mo
from .dataset import FeatureStore
from .errors import ContractError, ParseError
from .trainer import AdamState, adam_update
from .trials import TARGET, Trial

Embedder = Callable[[np.ndarray], np.ndarray]

DEFAULT_P_TARGET = 0.05
DEFAULT_C_MISS = 1.0
DEFAULT_C_FA = 1.0


def bundle_embedder(bundle: mo.ModelBundle) -> Embedder:
    """Inference-mode embedding function of a trained model."""
    bound = mo.BoundModel(bundle, tape=None)

    def embed(frames: np.ndarray) -> np.ndarray:
        return mo.embed_utterance(bound, frames).data

    return embed


def _as_embedder(model) -> Embedder:
    return bundle_embedder(model) if isinstance(model, mo.ModelBundle) else model


def _cosine_matrix(a: np.ndarray, b: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    na = a / np.sqrt((a * a).sum(axis=1, keepdims=True) + eps)
    nb = b / np.sqrt((b * b).sum(axis=1, keepdims=True) + eps)
    return na @ nb.T


def segment_starts(n_frames: int, seg_frames: int, num_segments: int) -> list[int]:
    """Deterministic, evenly spaced segment offsets covering the utterance."""
    if seg_frames > n_frames:
        raise ContractError(f"utterance has {n_frames} frames, need {seg_frames}")
    if num_segments < 1:
        raise ContractError("num_segments must be >= 1")
    if num_segments == 1:
        return [0]
    span = n_frames - seg_frames
    return [round(i * span / (num_segments - 1)) for i in range(num_segments)]


def segment_embeddings(model, frames: np.ndarray, num_segments: int,
                       seg_frames: int) -> np.ndarray:
    embed = _as_embedder(model)
    rows = [embed(frames[s:s + seg_frames])
            for s in segment_starts(frames.shape[0], seg_frames, num_segments)]
    return np.vstack(rows)


def segment_score(model, frames_a: np.ndarray, frames_b: np.ndarray,
                  num_segments: int = 10, seg_frames: int | None = None) -> float:
    """Mean cosine over all num_segments^2 segment pairs of two utterances.

    seg_frames defaults to half the shorter utterance.
    """
    if seg_frames is None:
        seg_frames = max(1, min(frames_a.shape[0], frames_b.shape[0]) // 2)
    ea = segment_embeddings(model, frames_a, num_segments, seg_frames)
    eb = segment_embeddings(model, frames_b, num_segments, seg_frames)
    return float(_cosine_matrix(ea, eb).mean())


# ---------------------------------------------------------------------------
# detection metrics


@dataclass(frozen=True)
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray  # 1 target, 0 nontarget

    def __post_init__(self) -> None:
        object.__setattr__(self, "scores", np.asarray(self.scores, dtype=np.float64))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise ContractError("scores and labels must be 1-D and equally long")

    def split(self) -> tuple[np.ndarray, np.ndarray]:
        targets = self.scores[self.labels == TARGET]
        nontargets = self.scores[self.labels != TARGET]
        if targets.size == 0 or nontargets.size == 0:
            raise ContractError("need at least one target and one nontarget score")
        return targets, nontargets


def _candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    """Midpoints between consecutive distinct scores, bracketed by one
    threshold below the minimum and one above the maximum."""
    uniq = np.unique(scores)
    mids = (uniq[:-1] + uniq[1:]) / 2.0
    return np.concatenate(([uniq[0] - 1.0], mids, [uniq[-1] + 1.0]))


def _error_rates(targets: np.ndarray, nontargets: np.ndarray,
                 thresholds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """FRR(t) = fraction of targets below t; FAR(t) = fraction of
    nontargets at or above t. Scores >= threshold are accepted."""
    frr = (targets[None, :] < thresholds[:, None]).mean(axis=1)
    far = (nontargets[None, :] >= thresholds[:, None]).mean(axis=1)
    return frr, far


def compute_eer(score_set: ScoreSet) -> tuple[float, float]:
    """Equal error rate and its threshold.

    FRR rises and FAR falls as the threshold sweeps upward; the EER is
    read off by linear interpolation between the last candidate where
    FRR < FAR and the first where FRR >= FAR (ties resolve to the lowest
    such threshold).
    """
    targets, nontargets = score_set.split()
    thresholds = _candidate_thresholds(np.concatenate([targets, nontargets]))
    frr, far = _error_rates(targets, nontargets, thresholds)
    diff = frr - far
    idx = int(np.argmax(diff >= 0.0))  # first crossing; diff starts at -1
    if idx == 0:
        return float(frr[0]), float(thresholds[0])
    d0, d1 = diff[idx - 1], diff[idx]
    gamma = d0 / (d0 - d1) if d1 != d0 else 1.0
    eer = frr[idx - 1] + gamma * (frr[idx] - frr[idx - 1])
    threshold = thresholds[idx - 1] + gamma * (thresholds[idx] - thresholds[idx - 1])
    return float(eer), float(threshold)


def compute_min_dcf(score_set: ScoreSet,
                    p_target: float = DEFAULT_P_TARGET,
                    c_miss: float = DEFAULT_C_MISS,
                    c_fa: float = DEFAULT_C_FA) -> float:
    """Minimum normalized detection cost over the candidate thresholds.

    DCF(t) = c_miss * Pmiss(t) * p_target + c_fa * Pfa(t) * (1 - p_target),
    normalized by the better of always-accept and always-reject, so the
    result lies in [0, 1].
    """
    if not 0.0 < p_target < 1.0:
        raise ContractError("p_target must be in (0, 1)")
    if c_miss <= 0.0 or c_fa <= 0.0:
        raise ContractError("costs must be positive")
    targets, nontargets = score_set.split()
    thresholds = _candidate_thresholds(np.concatenate([targets, nontargets]))
    frr, far = _error_rates(targets, nontargets, thresholds)
    dcf = c_miss * frr * p_target + c_fa * far * (1.0 - p_target)
    norm = min(c_miss * p_target, c_fa * (1.0 - p_target))
    return float(dcf.min() / norm)


# ---------------------------------------------------------------------------
# protocol evaluation


@dataclass(frozen=True)
class EvalReport:
    eer: float
    eer_threshold: float
    min_dcf: float
    p_target: float
    c_miss: float
    c_fa: float
    trials_evaluated: int
    slr_accuracy: float | None = None

    def to_lines(self) -> list[str]:
        lines = [
            f"eer = {self.eer!r}",
            f"eer_threshold = {self.eer_threshold!r}",
            f"min_dcf = {self.min_dcf!r}",
            f"p_target = {self.p_target!r}",
            f"c_miss = {self.c_miss!r}",
            f"c_fa = {self.c_fa!r}",
            f"trials_evaluated = {self.trials_evaluated}",
        ]
        if self.slr_accuracy is not None:
            lines.append(f"slr_accuracy = {self.slr_accuracy!r}")
        return lines


def evaluate_protocol(model, trials: Sequence[Trial], features: FeatureStore,
                      num_segments: int = 10, seg_frames: int | None = None,
                      p_target: float = DEFAULT_P_TARGET,
                      c_miss: float = DEFAULT_C_MISS,
                      c_fa: float = DEFAULT_C_FA
                      ) -> tuple[EvalReport, ScoreSet]:
    """Score every trial and compute EER / minDCF.

    Segment embeddings are cached per utterance, and scores come out in
    trial order, so the report does not depend on evaluation scheduling.
    """
    if not trials:
        raise ContractError("empty trial list")
    embed = _as_embedder(model)
    cache: dict[str, np.ndarray] = {}

    def segments_of(utt_id: str) -> np.ndarray:
        if utt_id not in cache:
            frames = features[utt_id]
            sf = seg_frames if seg_frames is not None else max(1, frames.shape[0] // 2)
            cache[utt_id] = segment_embeddings(embed, frames, num_segments, sf)
        return cache[utt_id]

    scores = np.empty(len(trials))
    labels = np.empty(len(trials), dtype=np.int64)
    for i, t in enumerate(trials):
        scores[i] = _cosine_matrix(segments_of(t.enroll_id),
                                   segments_of(t.test_id)).mean()
        labels[i] = t.label
    score_set = ScoreSet(scores, labels)
    eer, threshold = compute_eer(score_set)
    min_dcf = compute_min_dcf(score_set, p_target, c_miss, c_fa)
    report = EvalReport(eer=eer, eer_threshold=threshold, min_dcf=min_dcf,
                        p_target=p_target, c_miss=c_miss, c_fa=c_fa,
                        trials_evaluated=len(trials))
    return report, score_set


# ---------------------------------------------------------------------------
# language probe


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 32
    holdout_fraction: float = 0.2
    hidden_dim: int = 64
    seed: int = 0


def slr_probe(model, features_by_utt: Mapping[str, np.ndarray],
              languages_by_utt: Mapping[str, str],
              config: ProbeConfig = ProbeConfig()) -> float:
    """Train a fresh language classifier on frozen embeddings and return
    held-out accuracy.

    The probe has the same three-layer shape as the model's language
    head. Utterances are split 80/20 (seeded) by id; embeddings are
    computed once up front, so no gradient ever reaches the model.
    """
    utt_ids = sorted(languages_by_utt)
    langs = sorted(set(languages_by_utt.values()))
    if len(langs) < 2:
        raise ContractError("probe needs at least two languages")
    lang_index = {l: i for i, l in enumerate(langs)}
    embed = _as_embedder(model)
    x = np.vstack([embed(np.asarray(features_by_utt[u])) for u in utt_ids])
    y = np.array([lang_index[languages_by_utt[u]] for u in utt_ids], dtype=np.int64)

    rng = np.random.default_rng((config.seed, 0x9B0))
    order = rng.permutation(len(utt_ids))
    n_holdout = max(1, int(round(config.holdout_fraction * len(utt_ids))))
    test_idx, train_idx = order[:n_holdout], order[n_holdout:]
    if train_idx.size == 0:
        raise ContractError("probe training split is empty")

    d = x.shape[1]
    k = len(langs)
    h = config.hidden_dim
    init = np.random.default_rng((config.seed, 0x9B1))

    def glorot(fan_in, fan_out):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return init.uniform(-lim, lim, size=(fan_in, fan_out))

    params = {
        "fc1.w": glorot(d, h), "fc1.b": np.zeros((1, h)),
        "fc2.w": glorot(h, d), "fc2.b": np.zeros((1, d)),
        "fc3.w": glorot(d, k), "fc3.b": np.zeros((1, k)),
    }
    state = AdamState.for_params(params, list(params))
    shuffler = np.random.default_rng((config.seed, 0x9B2))
    for _ in range(config.epochs):
        epoch_order = shuffler.permutation(train_idx)
        for start in range(0, epoch_order.size, config.batch_size):
            idx = epoch_order[start:start + config.batch_size]
            tape = ad.Tape()
            p = {name: tape.watch(arr) for name, arr in params.items()}
            xb = ad.Tensor(x[idx])
            a1 = ad.tanh(ad.add_row_vector(ad.matmul(xb, p["fc1.w"]), p["fc1.b"]))
            a2 = ad.tanh(ad.add_row_vector(ad.matmul(a1, p["fc2.w"]), p["fc2.b"]))
            logits = ad.add_row_vector(ad.matmul(a2, p["fc3.w"]), p["fc3.b"])
            loss = lo.cross_entropy(logits, y[idx])
            gmap = ad.backward(tape, loss)
            grads = {name: gmap[p[name].node] for name in params
                     if p[name].node in gmap}
            adam_update(params, grads, state, config.lr)

    a1 = np.tanh(x[test_idx] @ params["fc1.w"] + params["fc1.b"])
    a2 = np.tanh(a1 @ params["fc2.w"] + params["fc2.b"])
    logits = a2 @ params["fc3.w"] + params["fc3.b"]
    return float((logits.argmax(axis=1) == y[test_idx]).mean())


# ---------------------------------------------------------------------------
# score dump and report files


def save_scores(path, trials: Sequence[Trial], score_set: ScoreSet,
                config_echo: Sequence[str] = ()) -> None:
    """Per-trial dump: `enrollId testId label score`, full float precision."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for line in config_echo:
            f.write(f"# {line}\n")
        for t, s in zip(trials, score_set.scores):
            f.write(f"{t.enroll_id} {t.test_id} {t.label} {s!r}\n")


def load_scores(path) -> ScoreSet:
    scores: list[float] = []
    labels: list[int] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4 or parts[2] not in ("0", "1"):
                raise ParseError(f"{path}:{lineno}: expected 'enroll test label score'")
            labels.append(int(parts[2]))
            scores.append(float(parts[3]))
    return ScoreSet(np.asarray(scores), np.asarray(labels))


def save_report(path, report: EvalReport, config_echo: Sequence[str] = ()) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for line in config_echo:
            f.write(f"# {line}\n")
        for line in report.to_lines():
            f.write(line + "\n")


def load_report(path) -> EvalReport:
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for raw in f:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition(" = ")
            values[key] = value
    try:
        return EvalReport(
            eer=float(values["eer"]),
            eer_threshold=float(values["eer_threshold"]),
            min_dcf=float(values["min_dcf"]),
            p_target=float(values["p_target"]),
            c_miss=float(values["c_miss"]),
            c_fa=float(values["c_fa"]),
            trials_evaluated=int(values["trials_evaluated"]),
            slr_accuracy=float(values["slr_accuracy"]) if "slr_accuracy" in values else None,
        )
    except KeyError as exc:
        raise ParseError(f"{path}: missing report field {exc}") from None
