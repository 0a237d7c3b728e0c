"""Interaction encoding, windowing, CSV ingestion and synthetic IRT data."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit

log = logging.getLogger(__name__)

SIDECAR_VERSION = 1


class DataError(ValueError):
    """Malformed input data (bad rows, missing columns, empty files)."""


# ---------------------------------------------------------------------------
# core types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InteractionSequence:
    student_id: str
    events: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.events)

    @property
    def exercises(self) -> list[int]:
        return [e for e, _ in self.events]

    @property
    def correct(self) -> list[int]:
        return [r for _, r in self.events]


@dataclass(frozen=True)
class Dataset:
    num_exercises: int
    sequences: tuple[InteractionSequence, ...]
    concept_of: tuple[int, ...] | None = None
    # raw exercise label for each dense id
    id_map: tuple[str, ...] | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        E = self.num_exercises
        for seq in self.sequences:
            for e, r in seq.events:
                if not 0 <= e < E:
                    raise DataError(
                        f"student {seq.student_id}: exercise {e} outside [0, {E})"
                    )
                if r not in (0, 1):
                    raise DataError(f"student {seq.student_id}: correctness {r}")
        if self.concept_of is not None and len(self.concept_of) != E:
            raise DataError("concept_of must have one entry per exercise")
        if self.id_map is not None and len(self.id_map) != E:
            raise DataError("id_map must have one entry per exercise")

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def num_interactions(self) -> int:
        return sum(len(s) for s in self.sequences)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return replace(self, sequences=tuple(self.sequences[i] for i in indices))


@dataclass(frozen=True)
class EncodedWindow:
    interaction_ids: np.ndarray  # (n,) ints in [0, 2E], 2E = padding
    query_exercise_ids: np.ndarray  # (n,) ints in [0, E], E = padding
    targets: np.ndarray  # (n,) 0/1, 0 at padding
    valid: np.ndarray  # (n,) bool, contiguous suffix

    @property
    def length(self) -> int:
        return int(self.valid.shape[0])


@dataclass
class WindowBatch:
    """Windows stacked along a leading axis."""

    interaction_ids: np.ndarray  # (B, n)
    query_exercise_ids: np.ndarray  # (B, n)
    targets: np.ndarray  # (B, n)
    valid: np.ndarray  # (B, n)

    def __len__(self) -> int:
        return self.valid.shape[0]

    def take(self, idx) -> "WindowBatch":
        return WindowBatch(
            self.interaction_ids[idx],
            self.query_exercise_ids[idx],
            self.targets[idx],
            self.valid[idx],
        )


def stack_windows(windows: Sequence[EncodedWindow]) -> WindowBatch:
    if not windows:
        raise DataError("no windows to stack")
    return WindowBatch(
        np.stack([w.interaction_ids for w in windows]),
        np.stack([w.query_exercise_ids for w in windows]),
        np.stack([w.targets for w in windows]),
        np.stack([w.valid for w in windows]),
    )


# ---------------------------------------------------------------------------
# encoding and windows
# ---------------------------------------------------------------------------


def encode_interaction(e: int, r: int, num_exercises: int) -> int:
    if not 0 <= e < num_exercises:
        raise DataError(f"exercise {e} outside [0, {num_exercises})")
    if r not in (0, 1):
        raise DataError(f"correctness must be 0 or 1, got {r}")
    return e + r * num_exercises


def decode_interaction(y: int, num_exercises: int) -> tuple[int, int]:
    if not 0 <= y < 2 * num_exercises:
        raise DataError(f"interaction id {y} outside [0, {2 * num_exercises})")
    return y % num_exercises, y // num_exercises


def make_windows(
    seq: InteractionSequence, n: int, num_exercises: int
) -> list[EncodedWindow]:
    """Split one student's shifted interaction stream into length-``n`` windows.

    Position ``k`` of the stream holds interaction ``x_k`` as input and exercise
    ``e_{k+1}`` as the query, with ``r_{k+1}`` as target. Streams longer than
    ``n`` are cut into ceil((t-1)/n) windows; only the first is left-padded.
    Sequences shorter than two events yield no windows.
    """
    if n < 2:
        raise ValueError(f"window length must be >= 2, got {n}")
    E = num_exercises
    t = len(seq.events)
    if t < 2:
        log.warning("skipping student %s: %d interaction(s)", seq.student_id, t)
        return []
    ex = np.fromiter((e for e, _ in seq.events), dtype=np.int64, count=t)
    rr = np.fromiter((r for _, r in seq.events), dtype=np.int64, count=t)
    inter = ex[:-1] + rr[:-1] * E
    query = ex[1:]
    target = rr[1:]
    L = t - 1
    count = math.ceil(L / n)
    pad = count * n - L

    def padded(arr, fill):
        return np.concatenate([np.full(pad, fill, dtype=arr.dtype), arr])

    inter = padded(inter, 2 * E)
    query = padded(query, E)
    target = padded(target, 0)
    valid = np.concatenate([np.zeros(pad, dtype=bool), np.ones(L, dtype=bool)])
    return [
        EncodedWindow(
            inter[k * n : (k + 1) * n].copy(),
            query[k * n : (k + 1) * n].copy(),
            target[k * n : (k + 1) * n].copy(),
            valid[k * n : (k + 1) * n].copy(),
        )
        for k in range(count)
    ]


def dataset_windows(dataset: Dataset, n: int) -> WindowBatch:
    windows: list[EncodedWindow] = []
    skipped = 0
    for seq in dataset.sequences:
        w = make_windows(seq, n, dataset.num_exercises)
        skipped += not w
        windows.extend(w)
    if skipped:
        log.info("%d sequence(s) too short to form a window", skipped)
    return stack_windows(windows)


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def _sort_labels(labels: Iterable[str]) -> list[str]:
    labels = list(labels)
    try:
        return sorted(labels, key=lambda s: (float(s), s))
    except ValueError:
        return sorted(labels)


def _parse_correct(raw: str, lineno: int) -> int:
    try:
        val = float(raw)
    except ValueError:
        raise DataError(f"line {lineno}: correctness {raw!r} is not a number") from None
    if val not in (0.0, 1.0):
        raise DataError(f"line {lineno}: correctness must be 0 or 1, got {raw!r}")
    return int(val)


def load_csv(
    path: str | Path,
    student_col: str = "user_id",
    exercise_col: str = "skill_id",
    correct_col: str = "correct",
    order_by: str | None = None,
    id_map: Sequence[str] | None = None,
    skip_invalid: bool = False,
) -> Dataset:
    """Read an ASSISTments-style interaction log.

    Rows are grouped by student in order of first appearance. Within a student,
    events keep file order unless ``order_by`` names a column to sort on
    (stable; numeric when every value parses as a number). Exercise labels are
    mapped densely to ``0..E-1``; pass ``id_map`` to reuse an existing mapping.
    With ``skip_invalid`` bad rows are logged and dropped instead of raising.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        needed = [student_col, exercise_col, correct_col]
        if order_by:
            needed.append(order_by)
        missing = [c for c in needed if c not in reader.fieldnames]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")

        rows: dict[str, list[tuple[object, str, int]]] = {}
        for lineno, row in enumerate(reader, start=2):
            try:
                student = (row[student_col] or "").strip()
                label = (row[exercise_col] or "").strip()
                if not student or not label:
                    raise DataError(f"line {lineno}: blank student or exercise id")
                r = _parse_correct((row[correct_col] or "").strip(), lineno)
                key: object = lineno
                if order_by:
                    key = (row[order_by] or "").strip()
            except DataError:
                if skip_invalid:
                    log.warning("skipping malformed row at line %d", lineno)
                    continue
                raise
            rows.setdefault(student, []).append((key, label, r))

    if not rows:
        raise DataError(f"{path}: no data rows")

    if order_by:
        for student, events in rows.items():
            keys = [k for k, _, _ in events]
            try:
                numeric = [float(k) for k in keys]
                order = sorted(range(len(events)), key=lambda i: numeric[i])
            except ValueError:
                order = sorted(range(len(events)), key=lambda i: keys[i])
            rows[student] = [events[i] for i in order]

    if id_map is None:
        id_map = _sort_labels({lab for ev in rows.values() for _, lab, _ in ev})
    index = {lab: i for i, lab in enumerate(id_map)}
    sequences = []
    for student, events in rows.items():
        try:
            evs = tuple((index[lab], r) for _, lab, r in events)
        except KeyError as exc:
            raise DataError(f"exercise {exc.args[0]!r} not present in id map") from None
        sequences.append(InteractionSequence(student, evs))
    return Dataset(
        num_exercises=len(id_map),
        sequences=tuple(sequences),
        id_map=tuple(id_map),
        meta={"source": str(path)},
    )


def write_csv(dataset: Dataset, path: str | Path) -> None:
    labels = dataset.id_map or tuple(str(i) for i in range(dataset.num_exercises))
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "skill_id", "correct"])
        for seq in dataset.sequences:
            for e, r in seq.events:
                w.writerow([seq.student_id, labels[e], r])


def sidecar_path(csv_path: str | Path) -> Path:
    return Path(csv_path).with_suffix(".json")


def save_dataset(dataset: Dataset, csv_path: str | Path) -> tuple[Path, Path]:
    """Write the interaction CSV plus a JSON sidecar holding E, id map and meta."""
    csv_path = Path(csv_path)
    write_csv(dataset, csv_path)
    side = sidecar_path(csv_path)
    payload = {
        "version": SIDECAR_VERSION,
        "num_exercises": dataset.num_exercises,
        "id_map": list(dataset.id_map)
        if dataset.id_map
        else [str(i) for i in range(dataset.num_exercises)],
        "concept_of": list(dataset.concept_of) if dataset.concept_of else None,
        "meta": dataset.meta,
    }
    side.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return csv_path, side


def load_dataset(csv_path: str | Path, **csv_kwargs) -> Dataset:
    """Load a CSV, honouring its sidecar (id map, concepts) when one exists."""
    side = sidecar_path(csv_path)
    if not side.exists():
        return load_csv(csv_path, **csv_kwargs)
    try:
        payload = json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{side}: invalid sidecar ({exc})") from None
    if payload.get("version") != SIDECAR_VERSION:
        raise DataError(f"{side}: unsupported sidecar version {payload.get('version')}")
    ds = load_csv(csv_path, id_map=payload["id_map"], **csv_kwargs)
    concept = payload.get("concept_of")
    meta = dict(payload.get("meta") or {})
    meta.setdefault("source", str(csv_path))
    return replace(
        ds, concept_of=tuple(concept) if concept is not None else None, meta=meta
    )


# ---------------------------------------------------------------------------
# synthetic IRT data
# ---------------------------------------------------------------------------


def irt_prob(alpha, beta, guess):
    """c + (1-c) / (1 + exp(beta - alpha)); broadcasts over array inputs."""
    guess = np.asarray(guess, dtype=float)
    if np.any(guess < 0) or np.any(guess >= 1):
        raise ValueError(f"guess probability must lie in [0, 1), got {guess}")
    out = guess + (1.0 - guess) * expit(np.asarray(alpha, float) - np.asarray(beta, float))
    return float(out) if out.ndim == 0 else out


def simulate_responses(alpha, beta, concept_of, guess, rng) -> np.ndarray:
    """Bernoulli draws for every student on every exercise, shape (N, E)."""
    p = irt_prob(alpha[:, concept_of], beta[None, :], guess)
    return (rng.random(p.shape) < p).astype(np.int8)


def generate_synthetic(
    num_students: int = 4000,
    num_exercises: int = 50,
    num_concepts: int = 5,
    guess: float = 0.0,
    seed: int = 0,
    ability_std: float = 2.0,
    difficulty_std: float = 1.0,
) -> Dataset:
    """Simulate students answering exercises 0..E-1 in order under an IRT model.

    Exercises are split as evenly as possible over the concepts in a random
    order; each student holds one ability per concept and each exercise one
    difficulty, both zero-mean normal with the given spreads.
    """
    if num_concepts < 1 or num_concepts > num_exercises:
        raise ValueError("need 1 <= num_concepts <= num_exercises")
    if num_students < 1:
        raise ValueError("need at least one student")
    if not 0 <= guess < 1:
        raise ValueError(f"guess probability must lie in [0, 1), got {guess}")
    rng = np.random.default_rng(seed)
    concept_of = rng.permutation(np.arange(num_exercises) % num_concepts)
    beta = difficulty_std * rng.standard_normal(num_exercises)
    alpha = ability_std * rng.standard_normal((num_students, num_concepts))
    answers = simulate_responses(alpha, beta, concept_of, guess, rng)
    sequences = tuple(
        InteractionSequence(
            f"s{i:05d}",
            tuple((e, int(answers[i, e])) for e in range(num_exercises)),
        )
        for i in range(num_students)
    )
    return Dataset(
        num_exercises=num_exercises,
        sequences=sequences,
        concept_of=tuple(int(c) for c in concept_of),
        id_map=tuple(str(e) for e in range(num_exercises)),
        meta={
            "generator": "irt",
            "num_students": num_students,
            "num_concepts": num_concepts,
            "guess": guess,
            "ability_std": ability_std,
            "difficulty_std": difficulty_std,
            "seed": seed,
            "difficulty": [float(b) for b in beta],
        },
    )


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


def split_train_test(
    dataset: Dataset, fraction: float = 0.8, seed: int = 0
) -> tuple[Dataset, Dataset]:
    """Student-level random split; the train side gets round(fraction * N)."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    N = len(dataset)
    if N < 2:
        raise DataError("need at least two sequences to split")
    n_train = int(math.floor(fraction * N + 0.5))
    n_train = min(max(n_train, 1), N - 1)
    perm = np.random.default_rng(seed).permutation(N)
    train_idx = np.sort(perm[:n_train])
    test_idx = np.sort(perm[n_train:])
    return dataset.subset(train_idx.tolist()), dataset.subset(test_idx.tolist())
