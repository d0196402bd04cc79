"""End-to-end pipelines: features, training runs, prediction, evaluation,
and the branch-combination ablation table.

Every artifact-producing step is deterministic given its config and seed;
repeated runs rewrite byte-identical files.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import load_audio, logmel, read_features, write_features
from .config import RunConfig, parse_branches, resolved_text
from .events import (
    EventAnnotation,
    read_events_tsv,
    read_weak_labels_tsv,
    sort_events,
    write_events_tsv,
)
from .metrics import EvalReport, event_based_f1, segment_based_f1
from .model import (
    BranchSpec,
    Model,
    ModelConfig,
    large_config,
    load_checkpoint,
    save_checkpoint,
    small_config,
    train_model,
)
from .postprocess import PostConfig, adaptive_window, probs_to_events
from .synth import WEAK_NAME

WORKERS_ENV = "MBSED_WORKERS"
FEATURE_DIR = "features"

# default ablation grid: each main branch alone and with every
# combination of the two instance-level auxiliaries
ABLATION_ROWS = [
    ("E-GMP",),
    ("E-GMP", "I-GMP"),
    ("E-GMP", "I-GAP"),
    ("E-GMP", "I-GAP", "I-GMP"),
    ("E-GAP",),
    ("E-GAP", "I-GMP"),
    ("E-GAP", "I-GAP"),
    ("E-GAP", "I-GAP", "I-GMP"),
    ("E-ATP",),
    ("E-ATP", "I-GMP"),
    ("E-ATP", "I-GAP"),
    ("E-ATP", "I-GAP", "I-GMP"),
]


class PipelineError(RuntimeError):
    """Missing dataset files or inconsistent pipeline inputs."""


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        workers = int(raw)
    except ValueError:
        raise PipelineError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if workers < 1:
        raise PipelineError(f"{WORKERS_ENV} must be at least 1, got {workers}")
    return workers


@dataclass
class Dataset:
    """Features plus weak labels for one directory of synthesized clips."""

    clip_ids: list[str]
    features: list[np.ndarray]
    labels: np.ndarray  # (n_clips, n_classes) binary
    class_labels: list[str]
    hop_seconds: float


def clip_features(dataset_dir: Path, clip_id: str, cache: bool, rate: int) -> np.ndarray:
    """Log-mel features for one clip, cached beside the audio when asked."""
    cache_path = dataset_dir / FEATURE_DIR / f"{clip_id}.mel"
    if cache and cache_path.exists():
        return read_features(cache_path)
    wav_path = dataset_dir / f"{clip_id}.wav"
    if not wav_path.exists():
        raise PipelineError(f"missing audio file {wav_path}")
    feats = logmel(load_audio(wav_path, rate), clip_id=clip_id).features
    if cache:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        write_features(cache_path, feats)
    return feats


def load_dataset(
    dataset_dir,
    rate: int = 22050,
    cache: bool = True,
    class_labels: list[str] | None = None,
) -> Dataset:
    """Read weak labels and features; class order is sorted label names."""
    dataset_dir = Path(dataset_dir)
    weak_path = dataset_dir / WEAK_NAME
    if not weak_path.exists():
        raise PipelineError(f"missing weak label file {weak_path}")
    weak = read_weak_labels_tsv(weak_path)
    clip_ids = sorted(weak)
    if class_labels is None:
        class_labels = sorted({label for labels in weak.values() for label in labels})
    labels = np.zeros((len(clip_ids), len(class_labels)))
    index = {label: i for i, label in enumerate(class_labels)}
    for row, clip_id in enumerate(clip_ids):
        for label in weak[clip_id]:
            if label not in index:
                raise PipelineError(
                    f"clip {clip_id} has label {label!r} outside the class list {class_labels}"
                )
            labels[row, index[label]] = 1.0
    features = [clip_features(dataset_dir, cid, cache, rate) for cid in clip_ids]
    hop = round(0.020 * rate) / rate  # frontend hop in seconds
    return Dataset(clip_ids, features, labels, list(class_labels), hop)


def build_model_config(
    run: RunConfig, num_classes: int, branches: tuple[BranchSpec, ...], seed: int,
    class_labels: tuple[str, ...] = (),
) -> ModelConfig:
    factory = small_config if run.model.preset == "small" else large_config
    base = factory(num_classes, branches, seed=seed)
    return dataclasses.replace(
        base,
        learning_rate=run.training.learning_rate,
        batch_size=run.training.batch_size,
        epochs=run.training.epochs,
        class_labels=class_labels,
    )


@dataclass
class TrainArtifacts:
    checkpoint_path: Path
    loss_path: Path
    seed: int
    final_loss: float


def run_training(
    run: RunConfig,
    out_dir,
    model_config: ModelConfig | None = None,
    log_fn=None,
) -> list[TrainArtifacts]:
    """Train `repeats` models with seeds seed+0..; write checkpoints and logs.

    A fully resolved copy of the run config lands beside the checkpoints.
    When an explicit model_config is given its seed field is overridden per
    repeat and the run config's model/training sections are ignored.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(run.data.train_dir, run.data.sample_rate, run.data.cache_features)
    branches = run.branch_specs()
    artifacts = []
    for r in range(run.training.repeats):
        seed = run.training.seed + r
        if model_config is None:
            cfg = build_model_config(
                run, len(dataset.class_labels), branches, seed, tuple(dataset.class_labels)
            )
        else:
            cfg = dataclasses.replace(
                model_config, seed=seed, class_labels=tuple(dataset.class_labels)
            )
        model = Model(cfg)
        curve = train_model(model, dataset.features, dataset.labels, log_fn=log_fn)
        ckpt = out_dir / f"model_seed{seed}.ckpt"
        save_checkpoint(model, ckpt)
        loss_path = out_dir / f"loss_seed{seed}.csv"
        with open(loss_path, "w", encoding="utf-8") as fh:
            fh.write("epoch,loss\n")
            for epoch, value in enumerate(curve):
                fh.write(f"{epoch},{value:.6f}\n")
        artifacts.append(TrainArtifacts(ckpt, loss_path, seed, curve[-1]))
    (out_dir / "config_resolved.ini").write_text(resolved_text(run), encoding="utf-8")
    return artifacts


def predict_events(
    model: Model,
    features: np.ndarray,
    clip_id: str,
    hop_seconds: float,
    post: PostConfig,
) -> tuple[np.ndarray, list[EventAnnotation]]:
    """Clip tag probabilities and post-processed events for one clip.

    Classes rejected at clip level are gated out of the frame output, so
    detection never contradicts tagging.
    """
    clip_probs, frame_probs = model.predict(features)
    frame_probs = frame_probs * (clip_probs > post.tag_threshold)[None, :]
    hop_out = hop_seconds * model.config.time_pool_total
    labels = list(model.config.class_labels)
    if not labels:
        labels = [f"class_{i}" for i in range(model.config.num_classes)]
    events = probs_to_events(frame_probs, hop_out, labels, post, clip_id=clip_id)
    return clip_probs, events


def run_prediction(
    checkpoint_path,
    audio_dir,
    out_tsv,
    post: PostConfig | None = None,
    rate: int = 22050,
    cache: bool = False,
) -> tuple[Path, Path]:
    """Predict events for every WAV in a directory; returns (events, tags) paths."""
    model = load_checkpoint(checkpoint_path)
    audio_dir = Path(audio_dir)
    wavs = sorted(audio_dir.glob("*.wav"))
    if not wavs:
        raise PipelineError(f"no .wav files found in {audio_dir}")
    post = post or PostConfig()
    labels = list(model.config.class_labels) or [
        f"class_{i}" for i in range(model.config.num_classes)
    ]
    hop = round(0.020 * rate) / rate
    all_events = []
    tag_rows = []
    for wav in wavs:
        clip_id = wav.stem
        feats = clip_features(audio_dir, clip_id, cache, rate)
        clip_probs, events = predict_events(model, feats, clip_id, hop, post)
        all_events.extend(events)
        for label, prob in zip(labels, clip_probs):
            tag_rows.append(f"{clip_id}\t{label}\t{prob:.6f}")
    out_tsv = Path(out_tsv)
    out_tsv.parent.mkdir(parents=True, exist_ok=True)
    write_events_tsv(out_tsv, all_events)
    tags_path = out_tsv.with_suffix(".tags.tsv")
    tags_path.write_text("\n".join(tag_rows) + "\n", encoding="utf-8")
    return out_tsv, tags_path


def run_evaluation(refs_tsv, preds_tsv, run: RunConfig) -> dict[str, EvalReport]:
    refs = read_events_tsv(refs_tsv)
    preds = read_events_tsv(preds_tsv)
    reports = {}
    protocols = ("event", "segment") if run.eval.protocol == "both" else (run.eval.protocol,)
    for protocol in protocols:
        if protocol == "event":
            reports["event"] = event_based_f1(
                refs, preds, run.eval.onset_collar, run.eval.offset_tolerance
            )
        else:
            clip_duration = max(
                [e.offset for e in refs] + [e.offset for e in preds] + [10.0]
            )
            reports["segment"] = segment_based_f1(
                refs, preds, run.eval.segment_length, clip_duration
            )
    return reports


def post_config_from_run(run: RunConfig, train_refs: list[EventAnnotation] | None, hop: float) -> PostConfig:
    """Postprocess settings; adaptive windows need training-set durations."""
    if run.postprocess.window == "adaptive":
        windows = {}
        if train_refs:
            by_label: dict[str, list[float]] = {}
            for e in train_refs:
                by_label.setdefault(e.label, []).append(e.duration)
            windows = {
                label: adaptive_window(float(np.median(durs)), hop)
                for label, durs in by_label.items()
            }
        return PostConfig(
            threshold=run.postprocess.threshold,
            median_windows=windows,
            tag_threshold=run.postprocess.tag_threshold,
        )
    return PostConfig(
        threshold=run.postprocess.threshold,
        median_windows={},
        default_window=int(run.postprocess.window),
        tag_threshold=run.postprocess.tag_threshold,
    )


@dataclass
class AblationRow:
    branches: tuple[str, ...]
    scores: list[float]

    @property
    def name(self) -> str:
        return " + ".join(self.branches)

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores))

    @property
    def std(self) -> float:
        return float(np.std(self.scores, ddof=1)) if len(self.scores) > 1 else 0.0

    @property
    def best(self) -> float:
        return float(np.max(self.scores))


def _ablation_run(args) -> float:
    """One train+evaluate pass; module-level so worker processes can import it."""
    (run, branches, seed, train_set, test_set, test_refs, train_refs, model_config) = args
    specs = parse_branches(branches)
    if model_config is None:
        cfg = build_model_config(
            run, len(train_set.class_labels), specs, seed, tuple(train_set.class_labels)
        )
    else:
        cfg = dataclasses.replace(
            model_config,
            branches=specs,
            seed=seed,
            class_labels=tuple(train_set.class_labels),
        )
    model = Model(cfg)
    train_model(model, train_set.features, train_set.labels)
    hop_out = train_set.hop_seconds * cfg.time_pool_total
    post = post_config_from_run(run, train_refs, hop_out)
    predictions = []
    for clip_id, feats in zip(test_set.clip_ids, test_set.features):
        _, events = predict_events(model, feats, clip_id, test_set.hop_seconds, post)
        predictions.extend(events)
    if run.eval.protocol == "event":
        report = event_based_f1(
            test_refs, predictions, run.eval.onset_collar, run.eval.offset_tolerance
        )
    else:
        report = segment_based_f1(test_refs, predictions, run.eval.segment_length, 10.0)
    return report.macro_f1


def run_ablation(
    run: RunConfig,
    rows: list[tuple[str, ...]] | None = None,
    model_config: ModelConfig | None = None,
    log_fn=None,
) -> list[AblationRow]:
    """Train every branch combination `repeats` times and score the test set."""
    if run.training.repeats < 2:
        raise PipelineError("ablation needs repeats >= 2 for a standard deviation")
    if not run.data.test_dir:
        raise PipelineError("ablation needs [data] test_dir")
    rows = rows or ABLATION_ROWS
    train_set = load_dataset(run.data.train_dir, run.data.sample_rate, run.data.cache_features)
    test_set = load_dataset(
        run.data.test_dir, run.data.sample_rate, run.data.cache_features,
        class_labels=train_set.class_labels,
    )
    strong_path = Path(run.data.test_dir) / "strong.tsv"
    if not strong_path.exists():
        raise PipelineError(f"missing reference annotations {strong_path}")
    test_refs = read_events_tsv(strong_path)
    train_refs = None
    if run.postprocess.window == "adaptive":
        train_strong = Path(run.data.train_dir) / "strong.tsv"
        if train_strong.exists():
            train_refs = read_events_tsv(train_strong)

    jobs = []
    for branches in rows:
        for r in range(run.training.repeats):
            jobs.append(
                (run, branches, run.training.seed + r, train_set, test_set,
                 test_refs, train_refs, model_config)
            )
    workers = worker_count()
    if workers > 1:
        import multiprocessing

        with multiprocessing.Pool(workers) as pool:
            scores = pool.map(_ablation_run, jobs)
    else:
        scores = []
        for i, job in enumerate(jobs):
            scores.append(_ablation_run(job))
            if log_fn is not None:
                log_fn(i + 1, len(jobs), job[1], scores[-1])
    results = []
    for i, branches in enumerate(rows):
        chunk = scores[i * run.training.repeats : (i + 1) * run.training.repeats]
        results.append(AblationRow(branches, chunk))
    return results


def format_ablation_table(rows: list[AblationRow], protocol: str) -> str:
    """Markdown table, mean +- (n-1)-std and best over repeats, 3 decimals."""
    header = f"| Branches | Average {protocol} F1 | Best {protocol} F1 |"
    rule = "| --- | --- | --- |"
    lines = [header, rule]
    for row in rows:
        lines.append(f"| {row.name} | {row.mean:.3f} +- {row.std:.3f} | {row.best:.3f} |")
    return "\n".join(lines) + "\n"
