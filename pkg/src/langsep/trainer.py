"""Two-phase alternating training.

Every mini-batch is used twice: first the language classifier trains to
recognize the language from the current speaker embeddings (discriminator
phase, speaker network frozen), then the speaker network trains on the
same batch with the mode's objective (embedding phase, language classifier
frozen). The reversal node in front of the language classifier is active
only during the embedding phase and only for the adversarial modes.

Each phase keeps its own Adam state; both follow the same schedule
lr_epoch = lr0 * (1 - decay_per_epoch) ** epoch.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import losses as lo
from . import model as mo
from .dataset import Batch, Corpus, sample_batch
from .errors import ContractError, NumericError

#: default clip applied to the adversarial modes; reversal gradients are
#: the unstable part of this recipe
ADVERSARIAL_CLIP = 5.0


@dataclass(frozen=True)
class TrainConfig:
    mode: str
    epochs: int
    speakers_per_batch: int
    frames_per_utt: int
    utts_per_speaker: int = 2
    lam: float = 0.5
    lr0: float = 1e-3
    decay_per_epoch: float = 0.03
    seed: int = 0
    steps_per_epoch: int | None = None
    grad_clip: float | None = None
    train_language_head: bool = True
    disc_steps_per_batch: int = 1

    def __post_init__(self) -> None:
        if self.mode not in lo.MODES:
            raise ContractError(f"unknown mode {self.mode!r}")
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")
        if not 0.0 <= self.decay_per_epoch < 1.0:
            raise ContractError("decay_per_epoch must be in [0, 1)")
        if self.lam < 0.0:
            raise ContractError("lam must be >= 0")
        if self.speakers_per_batch * self.utts_per_speaker < 2:
            raise ContractError("batch must hold at least 2 utterances")
        if self.disc_steps_per_batch < 1:
            raise ContractError("disc_steps_per_batch must be >= 1")

    def resolved_clip(self) -> float | None:
        """Explicit value wins; otherwise clip only the adversarial modes."""
        if self.grad_clip is not None:
            return self.grad_clip
        return ADVERSARIAL_CLIP if self.mode in lo.ADVERSARIAL_MODES else None


@dataclass
class AdamState:
    """Bias-corrected Adam moments for a named set of parameters."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray],
                   names: Sequence[str]) -> "AdamState":
        return cls(m={n: np.zeros_like(params[n]) for n in names},
                   v={n: np.zeros_like(params[n]) for n in names})


def adam_update(params: dict[str, np.ndarray],
                grads: dict[str, np.ndarray],
                state: AdamState, lr: float) -> None:
    """Apply one bias-corrected Adam step in place.

    Parameters missing from `grads` are treated as zero-gradient: their
    moments decay but a fresh state leaves them untouched.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name in state.m:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(params[name])
        elif not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        params[name] -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


def _clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        factor = max_norm / total
        for name in grads:
            grads[name] = grads[name] * factor


def _named_grads(bound: mo.BoundModel, grad_map: dict[int, np.ndarray],
                 names: Sequence[str]) -> dict[str, np.ndarray]:
    out = {}
    for name in names:
        g = grad_map.get(bound.node_of(name))
        if g is not None:
            out[name] = g
    return out


def discriminator_step(bundle: mo.ModelBundle, batch: Batch,
                       state: AdamState, lr: float) -> lo.LossTerms:
    """Phase 1: train the language classifier on the current embeddings.

    Reversal inactive; only language-classifier parameters are updated,
    everything on the speaker side stays bit-identical.
    """
    if np.any(batch.language_labels < 0):
        raise ContractError("batch has utterances without a language label")
    tape = ad.Tape()
    bound = mo.BoundModel(bundle, tape)
    e_spk = mo.embed_batch(bound, batch.features)
    logits, _ = mo.language_forward(bound, e_spk, grl_active=False)
    loss = lo.cross_entropy(logits, batch.language_labels)
    grad_map = ad.backward(tape, loss)
    grads = _named_grads(bound, grad_map, bundle.language_param_names())
    adam_update(bundle.params, grads, state, lr)
    value = loss.item()
    return lo.LossTerms(mode="baseline", l_lang=value, l_total=value)


def embedding_step(bundle: mo.ModelBundle, batch: Batch, mode: str, lam: float,
                   state: AdamState, lr: float,
                   grad_clip: float | None = None) -> lo.LossTerms:
    """Phase 2: train the speaker network with the mode's objective.

    Reversal active for the adversarial modes; language-classifier
    parameters stay bit-identical. The prototypical scale is clamped
    positive after the update.
    """
    n, m = batch.n_speakers, batch.m_utts
    if len(batch.features) != n * m:
        raise ContractError(f"batch is not grouped {n} speakers x {m} utterances")
    tape = ad.Tape()
    bound = mo.BoundModel(bundle, tape)
    e_spk = mo.embed_batch(bound, batch.features)
    l_spk = lo.angular_prototypical(e_spk, n, m, bound.p["proto.w"], bound.p["proto.b"])

    l_lang = l_corr = l_cos = None
    grl_active = mode in lo.ADVERSARIAL_MODES
    if mode in ("grl", "cos", "mapc", "ours"):
        logits, e_lang = mo.language_forward(bound, e_spk, grl_active=grl_active)
        if mode in ("grl", "ours"):
            l_lang = lo.cross_entropy(logits, batch.language_labels)
        if mode in ("mapc", "ours"):
            l_corr = lo.mapc(e_spk, e_lang)
        if mode == "cos":
            l_cos = lo.cosine_min(e_spk, e_lang)
    total = lo.total_loss(mode, lam, l_spk, l_lang=l_lang, l_corr=l_corr, l_cos=l_cos)

    grad_map = ad.backward(tape, total)
    grads = _named_grads(bound, grad_map, bundle.speaker_param_names())
    if grad_clip is not None:
        _clip_global_norm(grads, grad_clip)
    adam_update(bundle.params, grads, state, lr)
    np.maximum(bundle.params["proto.w"], mo.PROTO_W_MIN, out=bundle.params["proto.w"])
    return lo.LossTerms(
        mode=mode,
        l_spk=l_spk.item(),
        l_lang=l_lang.item() if l_lang is not None else 0.0,
        l_corr=l_corr.item() if l_corr is not None else 0.0,
        l_cos=l_cos.item() if l_cos is not None else 0.0,
        l_total=total.item(),
    )


@dataclass(frozen=True)
class TrainLogEntry:
    """Per-epoch averages; `l_lang` reports the discriminator CE when the
    discriminator ran, since that phase measures language recoverability
    for every mode."""

    epoch: int
    mode: str
    lr: float
    l_spk: float
    l_lang: float
    l_corr: float
    l_total: float
    wall_time: float

    def to_line(self) -> str:
        return (f"epoch={self.epoch} mode={self.mode} lr={self.lr!r} "
                f"l_spk={self.l_spk!r} l_lang={self.l_lang!r} "
                f"l_corr={self.l_corr!r} l_total={self.l_total!r} "
                f"wall_time={self.wall_time:.3f}")


def learning_rate(config: TrainConfig, epoch: int) -> float:
    return config.lr0 * (1.0 - config.decay_per_epoch) ** epoch


def fit(config: TrainConfig, corpus: Corpus,
        model_config: mo.ModelConfig | None = None
        ) -> tuple[mo.ModelBundle, list[TrainLogEntry]]:
    """Run the full two-phase loop and return the model plus the log.

    The model, sampling, and updates are all seeded, so two runs with
    identical inputs produce bit-identical parameters. With epochs=0 the
    returned model is exactly the seeded initialization.
    """
    if not corpus.metadata:
        raise ContractError("empty dataset")
    speakers = sorted({m.speaker_id for m in corpus.metadata})
    languages = corpus.languages
    if not languages:
        raise ContractError("dataset has no labeled languages")
    if model_config is None:
        model_config = mo.ModelConfig(
            feat_dim=corpus.features[corpus.metadata[0].utterance_id].shape[1],
            num_speakers=len(speakers),
            num_languages=len(languages),
        )
    bundle = mo.ModelBundle.initialize(model_config, config.seed)

    speaker_state = AdamState.for_params(bundle.params, bundle.speaker_param_names())
    language_state = AdamState.for_params(bundle.params, bundle.language_param_names())
    steps = config.steps_per_epoch
    if steps is None:
        steps = max(1, len(speakers) // config.speakers_per_batch)
    clip = config.resolved_clip()
    run_discriminator = config.train_language_head or config.mode != "baseline"

    log: list[TrainLogEntry] = []
    t0 = time.monotonic()
    for epoch in range(config.epochs):
        lr = learning_rate(config, epoch)
        sums = np.zeros(4)  # l_spk, l_lang, l_corr, l_total
        for step in range(steps):
            global_step = epoch * steps + step
            batch = sample_batch(corpus, config.speakers_per_batch,
                                 config.utts_per_speaker, config.seed, global_step)
            batch = _crop_frames(batch, config.frames_per_utt)
            disc_lang = 0.0
            if run_discriminator:
                for _ in range(config.disc_steps_per_batch):
                    disc_lang = discriminator_step(bundle, batch,
                                                   language_state, lr).l_lang
            terms = embedding_step(bundle, batch, config.mode, config.lam,
                                   speaker_state, lr, grad_clip=clip)
            sums += (terms.l_spk, disc_lang if run_discriminator else terms.l_lang,
                     terms.l_corr, terms.l_total)
        means = sums / steps
        log.append(TrainLogEntry(epoch=epoch, mode=config.mode, lr=lr,
                                 l_spk=float(means[0]), l_lang=float(means[1]),
                                 l_corr=float(means[2]), l_total=float(means[3]),
                                 wall_time=time.monotonic() - t0))
    return bundle, log


def _crop_frames(batch: Batch, frames_per_utt: int) -> Batch:
    cropped = []
    for utt_id, f in zip(batch.utterance_ids, batch.features):
        if f.shape[0] < frames_per_utt:
            raise ContractError(
                f"utterance {utt_id!r} has {f.shape[0]} frames, "
                f"need {frames_per_utt}")
        cropped.append(f[:frames_per_utt])
    return replace(batch, features=cropped)


def save_train_log(path, log: Sequence[TrainLogEntry],
                   config_echo: Sequence[str] = ()) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for line in config_echo:
            f.write(f"# {line}\n")
        for entry in log:
            f.write(entry.to_line() + "\n")
