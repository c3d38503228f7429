"""Command-line pipeline.

Subcommands: synth, build-trials, validate-trials, train, evaluate,
probe, compare. Every command accepts `--config FILE` with flat
`key = value` lines ('#' comments allowed); flags override file values.
The effective configuration is echoed into every artifact (as '#' header
lines in text files, as the JSON header in binary files) so any artifact
can be reproduced from its own provenance.

Exit codes: 0 success, 1 contract violation, 2 parse or usage error.
"""

from __future__ import annotations

import argparse
import io
import sys
from contextlib import redirect_stderr
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import dataset as ds
from . import evaluation as ev
from . import losses as lo
from . import model as mo
from . import trainer as tr
from . import trials as tl
from .errors import ContractError, ParseError


@dataclass(frozen=True)
class Field:
    name: str
    type: Callable
    default: object
    help: str = ""
    required: bool = False


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    if text.lower() in ("true", "1", "yes"):
        return True
    if text.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text) -> int | None:
    if text is None or text == "" or str(text).lower() == "none":
        return None
    return int(text)


def _opt_float(text) -> float | None:
    if text is None or text == "" or str(text).lower() == "none":
        return None
    return float(text)


_SYNTH_FIELDS = [
    Field("out", str, None, "output directory", required=True),
    Field("seed", int, 0),
    Field("num_speakers", int, 20),
    Field("num_languages", int, 3),
    Field("languages_per_speaker", int, 2),
    Field("utts_per_speaker_per_language", int, 4),
    Field("frames_per_utt", int, 20),
    Field("feat_dim", int, 24),
    Field("confound_strength", float, 1.0),
    Field("noise_std", float, 0.1),
    Field("pseudo_label_error_rate", float, 0.0),
    Field("eval_utts_per_speaker_per_language", int, 1),
]

_PROTOCOL_FIELDS = [
    Field("max_speakers_per_language", int, 1000),
    Field("max_samples_per_speaker", int, 15),
    Field("pairs_budget", _opt_int, None),
]

_TRAIN_FIELDS = [
    Field("mode", str, "baseline", "one of " + ", ".join(lo.MODES)),
    Field("epochs", int, 30),
    Field("speakers_per_batch", int, 8),
    Field("utts_per_speaker", int, 2),
    Field("frames_per_utt", int, 0, "0 infers the shortest utterance"),
    Field("lam", float, 0.5),
    Field("lr0", float, 1e-3),
    Field("decay_per_epoch", float, 0.03),
    Field("steps_per_epoch", _opt_int, None),
    Field("grad_clip", _opt_float, None),
    Field("train_language_head", _bool, True),
    Field("hidden_dim", int, 64),
    Field("embed_dim", int, 32),
    Field("encoder_layers", int, 2),
]

_EVAL_FIELDS = [
    Field("num_segments", int, 10),
    Field("seg_frames", _opt_int, None, "default: half the utterance"),
    Field("p_target", float, ev.DEFAULT_P_TARGET),
    Field("c_miss", float, ev.DEFAULT_C_MISS),
    Field("c_fa", float, ev.DEFAULT_C_FA),
]

_PROBE_FIELDS = [
    Field("probe_epochs", int, 20),
    Field("probe_lr", float, 1e-3),
    Field("probe_batch_size", int, 32),
    Field("probe_holdout_fraction", float, 0.2),
]

_COMMAND_FIELDS: dict[str, list[Field]] = {
    "synth": _SYNTH_FIELDS,
    "build-trials": [
        Field("metadata", str, None, required=True),
        Field("out", str, None, required=True),
        Field("seed", int, 0),
        *_PROTOCOL_FIELDS,
    ],
    "validate-trials": [
        Field("trials", str, None, required=True),
        Field("metadata", str, None, required=True),
        *_PROTOCOL_FIELDS,
    ],
    "train": [
        Field("features", str, None, required=True),
        Field("metadata", str, None, required=True),
        Field("out", str, None, "checkpoint path", required=True),
        Field("log", str, None, "training-log path"),
        Field("seed", int, 0),
        *_TRAIN_FIELDS,
    ],
    "evaluate": [
        Field("checkpoint", str, None, required=True),
        Field("trials", str, None, required=True),
        Field("features", str, None, required=True),
        Field("report", str, None, "report output path"),
        Field("scores", str, None, "per-trial score dump path"),
        *_EVAL_FIELDS,
    ],
    "probe": [
        Field("checkpoint", str, None, required=True),
        Field("features", str, None, required=True),
        Field("metadata", str, None, required=True),
        Field("seed", int, 0),
        *_PROBE_FIELDS,
    ],
    "compare": [
        Field("out", str, None, "output directory", required=True),
        Field("seed", int, 0, "corpus and protocol seed"),
        Field("seeds", int, 3, "number of training seeds (seed, seed+1, ...)"),
        Field("modes", str, ",".join(lo.MODES), "comma-separated mode list"),
        Field("report_format", str, "text", "text or csv"),
        *[f for f in _SYNTH_FIELDS if f.name not in ("out", "seed")],
        *_PROTOCOL_FIELDS,
        # frames_per_utt already comes from the synthesis fields; training
        # then uses every generated frame
        *[f for f in _TRAIN_FIELDS if f.name not in ("mode", "frames_per_utt")],
        *_EVAL_FIELDS,
        *_PROBE_FIELDS,
    ],
}


# ---------------------------------------------------------------------------
# config file parsing and provenance echo


def parse_config_file(path) -> dict[str, str]:
    """Flat `key = value` file with '#' comments. Duplicate keys are an
    error naming both occurrences."""
    values: dict[str, str] = {}
    first_line: dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ParseError(f"{path}:{lineno}: expected 'key = value'")
            key, value = key.strip(), value.strip()
            if not key:
                raise ParseError(f"{path}:{lineno}: empty key")
            if key in values:
                raise ParseError(
                    f"{path}: key {key!r} set twice "
                    f"(lines {first_line[key]} and {lineno})")
            values[key] = value
            first_line[key] = lineno
    return values


def resolve_config(command: str, file_values: dict[str, str],
                   flag_values: dict[str, object]) -> dict[str, object]:
    """Defaults, overridden by the config file, overridden by flags."""
    fields = {f.name: f for f in _COMMAND_FIELDS[command]}
    effective: dict[str, object] = {f.name: f.default for f in fields.values()}
    for key, raw in file_values.items():
        if key not in fields:
            raise ParseError(f"unknown config key {key!r} for command {command!r}")
        try:
            effective[key] = fields[key].type(raw)
        except (ValueError, TypeError) as exc:
            raise ParseError(f"config key {key!r}: {exc}") from None
    for key, value in flag_values.items():
        if value is not None:
            effective[key] = value
    for f in fields.values():
        if f.required and effective[f.name] is None:
            raise ParseError(f"missing required option --{f.name.replace('_', '-')}")
    return effective


def config_echo(command: str, values: dict[str, object]) -> list[str]:
    lines = [f"command = {command}"]
    for key in sorted(values):
        if values[key] is not None:
            lines.append(f"{key} = {values[key]}")
    return lines


def read_embedded_config(path) -> dict[str, str]:
    """Recover the `key = value` lines echoed into a text artifact."""
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for raw in f:
            if not raw.startswith("#"):
                break
            line = raw[1:].strip()
            key, sep, value = line.partition("=")
            if sep:
                values[key.strip()] = value.strip()
    return values


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ContractError(f"{what} file not found: {path}")
    return p


# ---------------------------------------------------------------------------
# command implementations


def _synth_config(v: dict) -> ds.SyntheticConfig:
    return ds.SyntheticConfig(
        num_speakers=v["num_speakers"],
        num_languages=v["num_languages"],
        languages_per_speaker=v["languages_per_speaker"],
        utts_per_speaker_per_language=v["utts_per_speaker_per_language"],
        frames_per_utt=v["frames_per_utt"],
        feat_dim=v["feat_dim"],
        confound_strength=v["confound_strength"],
        noise_std=v["noise_std"],
        pseudo_label_error_rate=v["pseudo_label_error_rate"],
        eval_utts_per_speaker_per_language=v["eval_utts_per_speaker_per_language"],
        seed=v["seed"],
    )


def _write_corpus(out_dir: Path, store: ds.FeatureStore,
                  metadata: list[ds.UtteranceMeta], true_language: dict[str, str],
                  echo: list[str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    store.save(out_dir / "features.bin", header={"config": echo})
    ds.save_metadata(out_dir / "metadata.csv", metadata, config_echo=echo)
    true_meta = [ds.UtteranceMeta(m.utterance_id, m.speaker_id,
                                  true_language[m.utterance_id], m.split)
                 for m in metadata]
    ds.save_metadata(out_dir / "metadata.true.csv", true_meta, config_echo=echo)


def cmd_synth(v: dict) -> int:
    store, metadata, true_language = ds.generate_synthetic(_synth_config(v))
    echo = config_echo("synth", v)
    _write_corpus(Path(v["out"]), store, metadata, true_language, echo)
    print(f"wrote {len(metadata)} utterances to {v['out']}")
    return 0


def _protocol_config(v: dict) -> tl.ProtocolConfig:
    return tl.ProtocolConfig(
        max_speakers_per_language=v["max_speakers_per_language"],
        max_samples_per_speaker=v["max_samples_per_speaker"],
        pairs_budget=v["pairs_budget"],
        seed=v.get("seed", 0),
    )


def cmd_build_trials(v: dict) -> int:
    metadata = ds.load_metadata(_require_file(v["metadata"], "metadata"))
    trials = tl.build_bilingual_protocol(metadata, _protocol_config(v))
    tl.save_trials(v["out"], trials, config_echo=config_echo("build-trials", v))
    stats = tl.protocol_stats(trials, metadata)
    print(f"wrote {len(trials)} trials "
          f"({stats.n_target} target / {stats.n_nontarget} nontarget) to {v['out']}")
    return 0


def cmd_validate_trials(v: dict) -> int:
    metadata = ds.load_metadata(_require_file(v["metadata"], "metadata"))
    trials = tl.load_trials(_require_file(v["trials"], "trials"))
    report = tl.validate_protocol(trials, metadata, _protocol_config(v))
    if report.ok:
        print(f"{len(trials)} trials, zero violations")
        return 0
    for index, message in report.violations:
        where = f"trial {index}" if index >= 0 else "protocol"
        print(f"{where}: {message}", file=sys.stderr)
    print(f"{len(report.violations)} violations", file=sys.stderr)
    return 1


def _train_one(v: dict, corpus: ds.Corpus, mode: str, seed: int
               ) -> tuple[mo.ModelBundle, list[tr.TrainLogEntry], tr.TrainConfig]:
    train_corpus = corpus.subset("train")
    if not train_corpus.metadata:
        raise ContractError("no utterances with split=train")
    frames = v["frames_per_utt"]
    if not frames:
        frames = min(train_corpus.features[m.utterance_id].shape[0]
                     for m in train_corpus.metadata)
    config = tr.TrainConfig(
        mode=mode, epochs=v["epochs"], speakers_per_batch=v["speakers_per_batch"],
        frames_per_utt=frames, utts_per_speaker=v["utts_per_speaker"],
        lam=v["lam"], lr0=v["lr0"], decay_per_epoch=v["decay_per_epoch"],
        seed=seed, steps_per_epoch=v["steps_per_epoch"], grad_clip=v["grad_clip"],
        train_language_head=v["train_language_head"],
    )
    feat_dim = train_corpus.features[train_corpus.metadata[0].utterance_id].shape[1]
    model_config = mo.ModelConfig(
        feat_dim=feat_dim,
        num_speakers=len({m.speaker_id for m in train_corpus.metadata}),
        num_languages=len(train_corpus.languages),
        hidden_dim=v["hidden_dim"], embed_dim=v["embed_dim"],
        encoder_layers=v["encoder_layers"],
    )
    bundle, log = tr.fit(config, train_corpus, model_config=model_config)
    return bundle, log, config


def cmd_train(v: dict) -> int:
    store, _ = ds.FeatureStore.load(_require_file(v["features"], "features"))
    metadata = ds.load_metadata(_require_file(v["metadata"], "metadata"))
    corpus = ds.Corpus(store, metadata)
    bundle, log, config = _train_one(v, corpus, v["mode"], v["seed"])
    echo = config_echo("train", v)
    rng_state = {"seed": config.seed,
                 "next_step": config.epochs * (config.steps_per_epoch or
                                               max(1, bundle.config.num_speakers
                                                   // config.speakers_per_batch))}
    mo.save_checkpoint(v["out"], bundle, rng_state=rng_state,
                       extra={"config": echo})
    if v["log"]:
        tr.save_train_log(v["log"], log, config_echo=echo)
    final = log[-1].l_total if log else float("nan")
    print(f"trained mode={v['mode']} epochs={v['epochs']} "
          f"final_total={final:.4f} -> {v['out']}")
    return 0


def cmd_evaluate(v: dict) -> int:
    bundle, _, _ = mo.load_checkpoint(_require_file(v["checkpoint"], "checkpoint"))
    store, _ = ds.FeatureStore.load(_require_file(v["features"], "features"))
    trials = tl.load_trials(_require_file(v["trials"], "trials"))
    report, scores = ev.evaluate_protocol(
        bundle, trials, store, num_segments=v["num_segments"],
        seg_frames=v["seg_frames"], p_target=v["p_target"],
        c_miss=v["c_miss"], c_fa=v["c_fa"])
    echo = config_echo("evaluate", v)
    if v["report"]:
        ev.save_report(v["report"], report, config_echo=echo)
    if v["scores"]:
        ev.save_scores(v["scores"], trials, scores, config_echo=echo)
    print(f"eer={report.eer:.4f} min_dcf={report.min_dcf:.4f} "
          f"trials={report.trials_evaluated}")
    return 0


def _probe_config(v: dict, seed: int, hidden_dim: int) -> ev.ProbeConfig:
    return ev.ProbeConfig(epochs=v["probe_epochs"], lr=v["probe_lr"],
                          batch_size=v["probe_batch_size"],
                          holdout_fraction=v["probe_holdout_fraction"],
                          hidden_dim=hidden_dim, seed=seed)


def cmd_probe(v: dict) -> int:
    bundle, _, _ = mo.load_checkpoint(_require_file(v["checkpoint"], "checkpoint"))
    store, _ = ds.FeatureStore.load(_require_file(v["features"], "features"))
    metadata = ds.load_metadata(_require_file(v["metadata"], "metadata"))
    known = [m for m in metadata if m.language_id != ds.UNKNOWN_LANGUAGE]
    feats = {m.utterance_id: store[m.utterance_id] for m in known}
    langs = {m.utterance_id: m.language_id for m in known}
    acc = ev.slr_probe(bundle, feats, langs,
                       _probe_config(v, v["seed"], bundle.config.hidden_dim))
    print(f"slr_accuracy={acc:.4f} utterances={len(known)}")
    return 0


def cmd_compare(v: dict) -> int:
    """Train every requested mode on one corpus, evaluate on the
    cross-lingual protocol (built from true labels), probe for residual
    language information, and emit a per-mode summary table."""
    modes = [m.strip() for m in v["modes"].split(",") if m.strip()]
    for m in modes:
        if m not in lo.MODES:
            raise ParseError(f"unknown mode {m!r}")
    if v["report_format"] not in ("text", "csv"):
        raise ParseError(f"report_format must be text or csv")
    out_dir = Path(v["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    echo = config_echo("compare", v)

    store, metadata, true_language = ds.generate_synthetic(_synth_config(v))
    _write_corpus(out_dir, store, metadata, true_language, echo)
    true_meta = [ds.UtteranceMeta(m.utterance_id, m.speaker_id,
                                  true_language[m.utterance_id], m.split)
                 for m in metadata]
    eval_meta = [m for m in true_meta if m.split == "eval"]
    trials = tl.build_bilingual_protocol(eval_meta, _protocol_config(v))
    tl.save_trials(out_dir / "trials.txt", trials, config_echo=echo)

    corpus = ds.Corpus(store, metadata)
    probe_feats = {m.utterance_id: store[m.utterance_id] for m in true_meta}
    probe_langs = {m.utterance_id: m.language_id for m in true_meta}
    train_seeds = [v["seed"] + i for i in range(v["seeds"])]

    rows: list[dict] = []
    for mode in modes:
        metrics = {"eer": [], "min_dcf": [], "slr_acc": []}
        for seed in train_seeds:
            tag = f"{mode}-seed{seed}"
            bundle, log, _ = _train_one(v, corpus, mode, seed)
            mo.save_checkpoint(out_dir / f"{tag}.ckpt", bundle,
                               rng_state={"seed": seed}, extra={"config": echo})
            tr.save_train_log(out_dir / f"{tag}.log", log, config_echo=echo)
            report, scores = ev.evaluate_protocol(
                bundle, trials, store, num_segments=v["num_segments"],
                seg_frames=v["seg_frames"], p_target=v["p_target"],
                c_miss=v["c_miss"], c_fa=v["c_fa"])
            acc = ev.slr_probe(bundle, probe_feats, probe_langs,
                               _probe_config(v, seed, v["hidden_dim"]))
            ev.save_report(out_dir / f"{tag}.report.txt",
                           ev.EvalReport(**{**report.__dict__, "slr_accuracy": acc}),
                           config_echo=echo)
            ev.save_scores(out_dir / f"{tag}.scores.txt", trials, scores,
                           config_echo=echo)
            metrics["eer"].append(report.eer)
            metrics["min_dcf"].append(report.min_dcf)
            metrics["slr_acc"].append(acc)
        row = {"mode": mode}
        for key, vals in metrics.items():
            arr = np.asarray(vals)
            row[f"{key}_mean"] = float(arr.mean())
            row[f"{key}_std"] = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        rows.append(row)

    lines = _comparison_lines(rows, v["report_format"])
    report_name = "report.csv" if v["report_format"] == "csv" else "report.txt"
    with open(out_dir / report_name, "w", encoding="utf-8", newline="\n") as f:
        for line in echo:
            f.write(f"# {line}\n")
        for line in lines:
            f.write(line + "\n")
    for line in lines:
        print(line)
    return 0


def _comparison_lines(rows: list[dict], fmt: str) -> list[str]:
    cols = ["mode", "eer_mean", "eer_std", "min_dcf_mean", "min_dcf_std",
            "slr_acc_mean", "slr_acc_std"]
    if fmt == "csv":
        lines = [",".join(cols)]
        for r in rows:
            lines.append(",".join(
                r["mode"] if c == "mode" else f"{r[c]:.6f}" for c in cols))
        return lines
    header = f"{'mode':<10}" + "".join(f"{c:>14}" for c in cols[1:])
    lines = [header]
    for r in rows:
        lines.append(f"{r['mode']:<10}" + "".join(f"{r[c]:>14.4f}" for c in cols[1:]))
    return lines


_HANDLERS = {
    "synth": cmd_synth,
    "build-trials": cmd_build_trials,
    "validate-trials": cmd_validate_trials,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "probe": cmd_probe,
    "compare": cmd_compare,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="langsep",
        description="language-disentangled speaker embedding laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, fields in _COMMAND_FIELDS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", default=None, help="flat key = value file")
        for f in fields:
            flag = "--" + f.name.replace("_", "-")
            if f.type is _bool:
                p.add_argument(flag, default=None, type=_bool, help=f.help,
                               metavar="BOOL")
            else:
                p.add_argument(flag, default=None, type=str, help=f.help)
    return parser


def run(argv: Sequence[str]) -> int:
    """Parse argv, run the command, and return the exit status."""
    parser = _build_parser()
    buffer = io.StringIO()
    try:
        with redirect_stderr(buffer):
            args = parser.parse_args(list(argv))
    except SystemExit as exc:
        sys.stderr.write(buffer.getvalue())
        return int(exc.code or 0)
    command = args.command
    fields = {f.name: f for f in _COMMAND_FIELDS[command]}
    try:
        file_values = parse_config_file(args.config) if args.config else {}
        flag_values: dict[str, object] = {}
        for name, f in fields.items():
            raw = getattr(args, name)
            if raw is None:
                continue
            try:
                flag_values[name] = raw if f.type is _bool else f.type(raw)
            except (ValueError, TypeError) as exc:
                raise ParseError(f"flag --{name.replace('_', '-')}: {exc}") from None
        effective = resolve_config(command, file_values, flag_values)
        return _HANDLERS[command](effective)
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> int:
    return run(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
