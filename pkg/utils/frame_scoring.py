"""
Frame difficulty scoring and split construction.

A frame's score is the mean over its questions of the mean over scoring models of the
mean over sampled responses. Mid-range frames feed training (with rare actions
oversampled); low-scoring frames form the held-out hard split.
"""

import logging
import math
from collections import Counter
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field, model_validator

from utils.schemas import TASK_ORDER, Frame, FrameScore

logger = logging.getLogger(__name__)

ScoreKey = Tuple[str, str, int]


class DatasetError(ValueError):
    """Raised for malformed corpora, incomplete score tables and impossible curation requests"""


class SampleScoreTable:
    """Scores s[question, model, sample] in [0, 100] collected from M models with K samples each"""

    def __init__(self, entries: Mapping[ScoreKey, float]):
        self.entries: Dict[ScoreKey, float] = {}
        for key, score in entries.items():
            question_id, model_id, sample_index = key
            score = float(score)
            if not 0.0 <= score <= 100.0 or math.isnan(score):
                raise DatasetError(
                    f"score {score} for question {question_id}, model {model_id}, sample {sample_index} outside [0, 100]"
                )
            if sample_index < 0:
                raise DatasetError(f"negative sample_index {sample_index} for question {question_id}")
            self.entries[(str(question_id), str(model_id), int(sample_index))] = score

        self.model_ids: Tuple[str, ...] = tuple(sorted({key[1] for key in self.entries}))
        self.samples_per_model = max((key[2] for key in self.entries), default=-1) + 1
        self.question_ids: FrozenSet[str] = frozenset(key[0] for key in self.entries)

    @property
    def model_count(self) -> int:
        return len(self.model_ids)

    @classmethod
    def from_records(cls, records: Iterable[Mapping]) -> "SampleScoreTable":
        """Build from rows with question_id, model_id, sample_index and score"""
        entries = {}
        for row_no, row in enumerate(records, start=1):
            raw_index = row["sample_index"]
            try:
                index = float(raw_index)
            except (TypeError, ValueError):
                index = math.nan
            if isinstance(raw_index, bool) or not index.is_integer():
                raise DatasetError(
                    f"row {row_no}: sample_index {raw_index!r} for question {row['question_id']}, "
                    f"model {row['model_id']} is not an integer"
                )
            key = (str(row["question_id"]), str(row["model_id"]), int(index))
            if key in entries:
                raise DatasetError(f"duplicate score entry for {key}")
            entries[key] = row["score"]
        return cls(entries)

    def restrict(self, model_ids: Sequence[str]) -> "SampleScoreTable":
        """Keep only the given scoring models"""
        wanted = set(model_ids)
        unknown = wanted.difference(self.model_ids)
        if unknown:
            raise DatasetError(f"unknown model ids: {sorted(unknown)}")
        return SampleScoreTable({key: score for key, score in self.entries.items() if key[1] in wanted})

    def question_matrix(self, question_id: str) -> np.ndarray:
        """Scores of one question as an (M, K) array; a missing cell is an error, never imputed"""
        matrix = np.empty((self.model_count, self.samples_per_model), dtype=np.float64)
        for m, model_id in enumerate(self.model_ids):
            for k in range(self.samples_per_model):
                key = (question_id, model_id, k)
                if key not in self.entries:
                    raise DatasetError(
                        f"missing score for question {question_id}, model {model_id}, sample {k}"
                    )
                matrix[m, k] = self.entries[key]
        return matrix


def frame_score(frame: Frame, scores: SampleScoreTable) -> FrameScore:
    """Triple-nested mean over questions, models and samples"""
    if scores.model_count == 0 or scores.samples_per_model == 0:
        raise DatasetError(f"score table is empty; cannot score frame {frame.frame_id}")
    question_means = []
    for question in frame.questions:
        matrix = scores.question_matrix(question.question_id)
        question_means.append(matrix.mean(axis=1).mean())
    value = float(np.mean(question_means))
    return FrameScore(frame_id=frame.frame_id, score=min(max(value, 0.0), 100.0))


def score_frames(frames: Sequence[Frame], scores: SampleScoreTable, n_jobs: int = 1) -> List[FrameScore]:
    """Score many frames; results come back in frame_id order regardless of n_jobs"""
    if n_jobs == 1:
        results = [frame_score(frame, scores) for frame in frames]
    else:
        results = Parallel(n_jobs=n_jobs)(delayed(frame_score)(frame, scores) for frame in frames)
    return sorted(results, key=lambda item: item.frame_id)


def filter_by_score_range(frames: Sequence[FrameScore], lo: float, hi: float) -> List[str]:
    """Frame ids with lo <= D <= hi, ascending by score then frame_id"""
    if lo > hi:
        raise DatasetError(f"empty score range [{lo}, {hi}]")
    kept = [item for item in frames if lo <= item.score <= hi]
    kept.sort(key=lambda item: (item.score, item.frame_id))
    return [item.frame_id for item in kept]


def exclude_overlap(ids: Sequence[str], exclusion: Iterable[str]) -> List[str]:
    excluded = set(exclusion)
    return [frame_id for frame_id in ids if frame_id not in excluded]


def action_counts(frames: Iterable[Frame]) -> Dict[str, int]:
    """Frames per action class, classless frames not counted"""
    counts = Counter(frame.action_class for frame in frames)
    counts.pop(None, None)
    return dict(sorted(counts.items()))


def balance_actions(frames: Sequence[Frame], alpha: float, seed: int) -> List[Frame]:
    """
    Oversample rare action classes by duplicating frames.

    Each class is raised to ceil(alpha * largest class count) frames by drawing
    existing frames of that class uniformly with replacement. Input frames are kept
    in order, duplicates follow grouped by class name.
    """
    if not 0.0 < alpha <= 1.0:
        raise DatasetError(f"balance alpha must be in (0, 1], got {alpha}")
    by_class: Dict[str, List[Frame]] = {}
    for frame in frames:
        label = frame.action_class
        if label is not None:
            by_class.setdefault(label, []).append(frame)
    if not by_class:
        raise DatasetError("nothing to balance: no frame carries an action label")

    largest = max(len(members) for members in by_class.values())
    target = math.ceil(round(alpha * largest, 9))
    rng = np.random.default_rng(seed)

    balanced = list(frames)
    for label in sorted(by_class):
        members = by_class[label]
        shortfall = target - len(members)
        if shortfall <= 0:
            continue
        picks = rng.integers(0, len(members), size=shortfall)
        balanced.extend(members[int(index)] for index in picks)
        logger.debug(f"Action class '{label}': {len(members)} -> {target} frames")
    return balanced


class SplitSpec(BaseModel):
    """Score range, exclusions and balancing settings for one split"""

    model_config = ConfigDict(frozen=True)

    lo: float = Field(ge=0.0, le=100.0)
    hi: float = Field(ge=0.0, le=100.0)
    exclusion_ids: FrozenSet[str] = frozenset()
    balance_alpha: float = Field(default=0.5, gt=0.0, le=1.0)
    seed: int = 0
    sample_size: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _check_range(self):
        if self.lo > self.hi:
            raise ValueError(f"lo ({self.lo}) must not exceed hi ({self.hi})")
        return self


def _frames_for(ids: Sequence[str], frames_by_id: Mapping[str, Frame]) -> List[Frame]:
    missing = [frame_id for frame_id in ids if frame_id not in frames_by_id]
    if missing:
        raise DatasetError(f"scored frames missing from the corpus: {missing[:5]}")
    return [frames_by_id[frame_id] for frame_id in ids]


def build_splits(
    frames: Sequence[Frame],
    scores: Sequence[FrameScore],
    train_spec: SplitSpec,
    hard_spec: SplitSpec,
    hard_scores: Optional[Sequence[FrameScore]] = None,
) -> Tuple[List[Frame], List[Frame]]:
    """
    Build the balanced training split and the hard evaluation split.

    hard_scores lets the hard split use a different scoring-model pool; it defaults
    to scores. Hard frames never overlap training frames and are never balanced.
    """
    frames_by_id = {frame.frame_id: frame for frame in frames}

    train_ids = exclude_overlap(filter_by_score_range(scores, train_spec.lo, train_spec.hi), train_spec.exclusion_ids)
    if train_spec.sample_size is not None and len(train_ids) > train_spec.sample_size:
        rng = np.random.default_rng(train_spec.seed)
        chosen = set(rng.choice(len(train_ids), size=train_spec.sample_size, replace=False).tolist())
        train_ids = [frame_id for index, frame_id in enumerate(train_ids) if index in chosen]
    train_frames = _frames_for(train_ids, frames_by_id)
    if train_frames:
        train_frames = balance_actions(train_frames, train_spec.balance_alpha, train_spec.seed)

    hard_pool = hard_scores if hard_scores is not None else scores
    hard_ids = exclude_overlap(filter_by_score_range(hard_pool, hard_spec.lo, hard_spec.hi), hard_spec.exclusion_ids)
    train_id_set = set(train_ids)
    hard_ids = [frame_id for frame_id in hard_ids if frame_id not in train_id_set]
    hard_frames = _frames_for(hard_ids, frames_by_id)

    logger.info(f"Built splits: {len(train_ids)} train frames ({len(train_frames)} after balancing), {len(hard_frames)} hard frames")
    return train_frames, hard_frames


def score_histogram(values: Iterable[float], bins: int = 10) -> List[int]:
    counts, _ = np.histogram(np.asarray(list(values), dtype=np.float64), bins=bins, range=(0.0, 100.0))
    return counts.astype(int).tolist()


def task_counts(frames: Iterable[Frame]) -> Dict[str, int]:
    counts = Counter(question.task.kind for frame in frames for question in frame.questions)
    return {task.value: counts[task] for task in TASK_ORDER if counts[task]}


def build_manifest(
    train_spec: SplitSpec,
    hard_spec: SplitSpec,
    scores: Sequence[FrameScore],
    train_frames: Sequence[Frame],
    hard_frames: Sequence[Frame],
    hard_scores: Optional[Sequence[FrameScore]] = None,
) -> Dict:
    """Sidecar record of how the splits were made"""
    score_by_id = {item.frame_id: item.score for item in scores}
    hard_score_by_id = {item.frame_id: item.score for item in (hard_scores if hard_scores is not None else scores)}
    unique_train = {frame.frame_id: frame for frame in train_frames}

    def spec_record(spec: SplitSpec) -> Dict:
        return {
            "range": [spec.lo, spec.hi],
            "exclusion_count": len(spec.exclusion_ids),
            "balance_alpha": spec.balance_alpha,
            "seed": spec.seed,
            "sample_size": spec.sample_size,
        }

    return {
        "train_spec": spec_record(train_spec),
        "hard_spec": spec_record(hard_spec),
        "seed": train_spec.seed,
        "counts": {
            "scored_frames": len(scores),
            "train_frames_unique": len(unique_train),
            "train_frames": len(train_frames),
            "hard_frames": len(hard_frames),
        },
        "action_counts": {
            "before_balancing": action_counts(unique_train.values()),
            "after_balancing": action_counts(train_frames),
        },
        "task_counts": {
            "train": task_counts(train_frames),
            "hard": task_counts(hard_frames),
        },
        "score_histogram": {
            "bin_edges": [float(edge) for edge in np.linspace(0.0, 100.0, 11)],
            "scored": score_histogram(score_by_id.values()),
            "train": score_histogram(score_by_id[frame_id] for frame_id in unique_train),
            "hard": score_histogram(hard_score_by_id[frame.frame_id] for frame in hard_frames),
        },
    }
