import hashlib
import logging
import re
import threading
from abc import ABC, abstractmethod
from pathlib import Path
from typing import TYPE_CHECKING, Dict, FrozenSet, Iterable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import InvalidInputError, RolloutError, WorldValidationError
from .skill_model import Skill
from .utils import append_json_line, dumps_json, read_json, write_json

if TYPE_CHECKING:
    from .replay_cache import ReplayCache

logger = logging.getLogger(__name__)

Split = Literal['support', 'query', 'test']
SPLITS: Tuple[str, ...] = ('support', 'query', 'test')

_TAG_PATTERN = re.compile(r'tags:\s*helpful=([^;]*);\s*harmful=([^\n]*)', re.IGNORECASE)

# Vocabulary for generated worlds; extra tags fall back to tag<i>
TAG_VOCABULARY = ('heat', 'cool', 'clean', 'slice', 'examine', 'stack', 'open', 'fill',
                  'toggle', 'sort', 'pour', 'wrap')
OBJECTS = ('mug', 'apple', 'plate', 'lettuce', 'book', 'kettle', 'towel', 'bowl')
RECEPTACLES = ('countertop', 'shelf', 'cabinet', 'drawer', 'table', 'sinkbasin')


class TaskQuery(BaseModel):
    model_config = ConfigDict(frozen=True)

    task_id: str
    text: str
    split: Split

    @field_validator('task_id', 'text')
    @classmethod
    def _check_text(cls, value: str) -> str:
        value = value.strip()
        if not value:
            raise ValueError("task id and text must be non-empty after trimming")
        return value


class SyntheticTask(TaskQuery):
    """Task of the synthetic world with its ground-truth capability requirement"""
    required_tag: str
    base_solvable: bool


class Trajectory(BaseModel):
    """One rollout record; retrieved holds skill ids in retrieval rank order"""
    model_config = ConfigDict(frozen=True)

    task_id: str
    retrieved: Tuple[str, ...] = ()
    reward: float = Field(ge=0.0, le=1.0)
    success: bool
    steps: int = Field(default=0, ge=0)


class EpisodeOutcome(BaseModel):
    model_config = ConfigDict(frozen=True)

    reward: float = Field(ge=0.0, le=1.0)
    steps: int = Field(default=0, ge=0)


class QuadrantPartition(BaseModel):
    """Trajectories split by outcome x retrieval emptiness"""
    model_config = ConfigDict(frozen=True)

    succ_no_ret: Tuple[Trajectory, ...] = ()
    fail_no_ret: Tuple[Trajectory, ...] = ()
    succ_ret: Tuple[Trajectory, ...] = ()
    fail_ret: Tuple[Trajectory, ...] = ()

    @property
    def total(self) -> int:
        return len(self.succ_no_ret) + len(self.fail_no_ret) + len(self.succ_ret) + len(self.fail_ret)

    @property
    def with_retrieval(self) -> Tuple[Trajectory, ...]:
        return self.succ_ret + self.fail_ret


class Worker(ABC):
    """Frozen task-executing agent

    A deterministic worker returns the same outcome for the same (task, retrieved skills).
    Implementations must tolerate concurrent calls.
    """

    def __init__(self, success_threshold: float = 1.0, max_steps: int = 1):
        if not 0.0 <= success_threshold <= 1.0:
            raise InvalidInputError(f"success_threshold must be in [0, 1], got {success_threshold}")
        self.success_threshold = success_threshold
        self.max_steps = max_steps
        self._calls = 0
        self._lock = threading.Lock()

    @property
    @abstractmethod
    def version_tag(self) -> str:
        ...

    @abstractmethod
    def run_episode(self, task: TaskQuery, retrieved_skills: Sequence[Skill]) -> EpisodeOutcome:
        ...

    @property
    def calls(self) -> int:
        with self._lock:
            return self._calls

    def _count_call(self) -> None:
        with self._lock:
            self._calls += 1


def parse_skill_tags(when_to_apply: str) -> Tuple[FrozenSet[str], FrozenSet[str]]:
    """Read the 'tags: helpful=<tag,...>; harmful=<tag,...>' annotation

    Returns:
        (helpful_tags, harmful_tags); both empty when the annotation is absent
    """
    match = _TAG_PATTERN.search(when_to_apply)
    if not match:
        return frozenset(), frozenset()

    def split_tags(raw: str) -> FrozenSet[str]:
        return frozenset(tag.strip().lower() for tag in raw.split(',') if tag.strip())

    return split_tags(match.group(1)), split_tags(match.group(2))


def format_tag_annotation(helpful: Iterable[str], harmful: Iterable[str] = ()) -> str:
    return f"tags: helpful={','.join(sorted(set(helpful)))}; harmful={','.join(sorted(set(harmful)))}"


class SyntheticWorld(BaseModel):
    """Deterministic stand-in environment with analytically known skill utility"""
    model_config = ConfigDict(frozen=True)

    tags: Tuple[str, ...]
    tasks: Tuple[SyntheticTask, ...]
    seed: Optional[int] = None

    @model_validator(mode='after')
    def _check_world(self) -> 'SyntheticWorld':
        known = set(self.tags)
        seen: Dict[str, str] = {}
        for task in self.tasks:
            if task.required_tag not in known:
                raise ValueError(f"task {task.task_id} requires unknown tag {task.required_tag}")
            if task.task_id in seen:
                # one id in two splits breaks disjointness, twice in one split breaks uniqueness
                raise ValueError(
                    f"task id {task.task_id} appears in splits {seen[task.task_id]} and {task.split}"
                )
            seen[task.task_id] = task.split
        return self

    def split(self, name: str) -> List[SyntheticTask]:
        if name not in SPLITS:
            raise InvalidInputError(f"Unknown split: {name}")
        return sorted((task for task in self.tasks if task.split == name), key=lambda t: t.task_id)

    def task(self, task_id: str) -> SyntheticTask:
        for task in self.tasks:
            if task.task_id == task_id:
                return task
        raise InvalidInputError(f"Unknown task id: {task_id}")

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(dumps_json(self.to_record(), indent=False)).hexdigest()

    def to_record(self) -> Dict:
        return {
            'tags': list(self.tags),
            'seed': self.seed,
            'tasks': [
                {
                    'task_id': task.task_id,
                    'text': task.text,
                    'split': task.split,
                    'required_tag': task.required_tag,
                    'base_solvable': task.base_solvable,
                }
                for task in self.tasks
            ],
        }


def load_world(path: Union[str, Path]) -> SyntheticWorld:
    try:
        payload = read_json(path)
    except FileNotFoundError:
        raise
    except ValueError as e:
        raise WorldValidationError(f"World file {path} is not valid JSON: {e}") from e
    try:
        return SyntheticWorld.model_validate(payload)
    except ValidationError as e:
        raise WorldValidationError(f"Invalid world file {path}: {e}") from e


def save_world(world: SyntheticWorld, path: Union[str, Path]) -> Path:
    return write_json(path, world.to_record())


def generate_world(n_tags: int,
                   n_tasks_per_split: int,
                   solvable_fraction: float,
                   seed: int = 42) -> SyntheticWorld:
    """Generate a world with pairwise disjoint support/query/test splits

    Tags are assigned round-robin so every split covers every tag when
    n_tasks_per_split >= n_tags; round(solvable_fraction * n) tasks per split
    are base-solvable, picked by the seeded generator.
    """
    if n_tags < 1:
        raise InvalidInputError(f"n_tags must be positive, got {n_tags}")
    if n_tasks_per_split < 1:
        raise InvalidInputError(f"n_tasks_per_split must be positive, got {n_tasks_per_split}")
    if not 0.0 <= solvable_fraction <= 1.0:
        raise InvalidInputError(f"solvable_fraction must be in [0, 1], got {solvable_fraction}")

    rng = np.random.default_rng(seed)
    tags = [TAG_VOCABULARY[i] if i < len(TAG_VOCABULARY) else f"tag{i}" for i in range(n_tags)]
    n_solvable = int(round(solvable_fraction * n_tasks_per_split))

    tasks = []
    for split in SPLITS:
        solvable = set(rng.permutation(n_tasks_per_split)[:n_solvable].tolist())
        for i in range(n_tasks_per_split):
            tag = tags[i % n_tags]
            obj = OBJECTS[int(rng.integers(len(OBJECTS)))]
            receptacle = RECEPTACLES[int(rng.integers(len(RECEPTACLES)))]
            tasks.append(SyntheticTask(
                task_id=f"{split}-{i:04d}",
                text=f"You need to {tag} the {obj}, then put it on the {receptacle}.",
                split=split,
                required_tag=tag,
                base_solvable=i in solvable,
            ))
    return SyntheticWorld(tags=tuple(tags), tasks=tuple(tasks), seed=seed)


class SyntheticWorker(Worker):
    """Worker whose reward is a fixed rule over skill tag annotations

    reward = 1 if the task is base-solvable, or some retrieved skill is helpful for
    the required tag and no retrieved skill is harmful for it; otherwise 0.
    Skill text beyond the tag annotation is ignored.
    """

    def __init__(self, world: SyntheticWorld, success_threshold: float = 1.0, max_steps: int = 1):
        super().__init__(success_threshold=success_threshold, max_steps=max_steps)
        self.world = world
        self._tasks = {task.task_id: task for task in world.tasks}
        self._version_tag = (
            f"synthetic-worker/v1/world={world.fingerprint[:16]}"
            f"/success>={success_threshold}/max_steps={max_steps}"
        )

    @property
    def version_tag(self) -> str:
        return self._version_tag

    def run_episode(self, task: TaskQuery, retrieved_skills: Sequence[Skill]) -> EpisodeOutcome:
        self._count_call()
        world_task = self._tasks.get(task.task_id)
        if world_task is None:
            raise RolloutError(task.task_id, "task is not part of the synthetic world")

        tag = world_task.required_tag
        helped = harmed = False
        for skill in retrieved_skills:
            helpful, harmful = parse_skill_tags(skill.when_to_apply)
            helped = helped or tag in helpful
            harmed = harmed or tag in harmful
        solved = world_task.base_solvable or (helped and not harmed)
        return EpisodeOutcome(reward=1.0 if solved else 0.0, steps=1)


def rollout(worker: Worker, task: TaskQuery, retrieved_skills: Sequence[Skill]) -> Trajectory:
    """Run the worker on a task conditioned on rank-ordered retrieved skills

    Raises:
        RolloutError: If the worker fails; the caller decides on retries
    """
    try:
        outcome = worker.run_episode(task, list(retrieved_skills))
    except RolloutError:
        raise
    except Exception as e:
        logger.error(f"Worker {worker.version_tag} failed on task {task.task_id}: {e}")
        raise RolloutError(task.task_id, str(e)) from e

    trajectory = Trajectory(
        task_id=task.task_id,
        retrieved=tuple(skill.id for skill in retrieved_skills),
        reward=outcome.reward,
        success=outcome.reward >= worker.success_threshold,
        steps=min(outcome.steps, worker.max_steps),
    )
    logger.debug(f"Rollout {task.task_id} with {len(retrieved_skills)} skills -> reward {trajectory.reward}")
    return trajectory


def cached_rollout(worker: Worker,
                   task: TaskQuery,
                   retrieved_skills: Sequence[Skill],
                   cache: Optional['ReplayCache'] = None,
                   kind: str = 'factual') -> Trajectory:
    """Rollout served from the replay cache when a matching entry exists"""
    skills = list(retrieved_skills)
    if cache is None:
        return rollout(worker, task, skills)
    return cache.fetch_or_run(
        worker_version=worker.version_tag,
        task_id=task.task_id,
        retrieved_skills=skills,
        run=lambda: rollout(worker, task, skills),
        kind=kind,
    )


def loo_replay(worker: Worker,
               task: TaskQuery,
               retrieved_skills: Sequence[Skill],
               excluded_skill: Skill,
               cache: Optional['ReplayCache'] = None) -> Trajectory:
    """Replay the task with one retrieved skill removed, survivors keeping their rank order"""
    if all(skill.id != excluded_skill.id for skill in retrieved_skills):
        raise InvalidInputError(
            f"Skill {excluded_skill.id} is not in the retrieval set of task {task.task_id}"
        )
    remaining = [skill for skill in retrieved_skills if skill.id != excluded_skill.id]
    return cached_rollout(worker, task, remaining, cache, kind='loo')


def partition_quadrants(trajectories: Iterable[Trajectory]) -> QuadrantPartition:
    buckets: Dict[str, List[Trajectory]] = {
        'succ_no_ret': [], 'fail_no_ret': [], 'succ_ret': [], 'fail_ret': []
    }
    for trajectory in trajectories:
        outcome = 'succ' if trajectory.success else 'fail'
        retrieval = 'ret' if trajectory.retrieved else 'no_ret'
        buckets[f"{outcome}_{retrieval}"].append(trajectory)
    return QuadrantPartition(**{name: tuple(items) for name, items in buckets.items()})


def append_trajectory_log(path: Union[str, Path], trajectory: Trajectory, round: int, split: str) -> None:
    record = {'round': round, 'split': split}
    record.update(trajectory.model_dump(mode='json'))
    append_json_line(path, record)
