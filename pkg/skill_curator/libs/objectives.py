import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import InvalidInputError, RolloutError
from .replay_cache import ReplayCache
from .retrieval import HybridRetriever, RetrievalResult
from .rollout import TaskQuery, Trajectory, Worker, cached_rollout, loo_replay
from .skill_model import NORM_TOLERANCE, SkillBank

logger = logging.getLogger(__name__)

OBJECTIVE_NAMES: Tuple[str, ...] = ('util', 'div', 'cov')
DEFAULT_EPSILON_REG = 1e-6


class ObjectiveProfile(BaseModel):
    """Bank-level objective triple (utility, diversity, coverage)

    util stays in [-1, 1] for binary-reward workers; literal co-retrieval weights can
    push scalar-reward workers outside it, so only finiteness is enforced.
    """
    model_config = ConfigDict(frozen=True)

    util: float = Field(allow_inf_nan=False)
    div: float = Field(ge=0.0, le=1.0, allow_inf_nan=False)
    cov: float = Field(ge=0.0, le=1.0, allow_inf_nan=False)

    def get(self, name: str) -> float:
        if name not in OBJECTIVE_NAMES:
            raise InvalidInputError(f"Unknown objective: {name}")
        return getattr(self, name)

    def values(self, objectives: Sequence[str] = OBJECTIVE_NAMES) -> Tuple[float, ...]:
        return tuple(self.get(name) for name in objectives)

    def to_record(self) -> Dict[str, float]:
        return {'util': self.util, 'div': self.div, 'cov': self.cov}


EMPTY_PROFILE = ObjectiveProfile(util=0.0, div=0.0, cov=0.0)


class UtilityEvidence(BaseModel):
    """Per-skill (reward with, reward without) pairs gathered on the query split

    pairs maps skill id to one pair per retrieving trajectory, in task id order.
    n_retrieving is the number of trajectories whose retrieval set was non-empty.
    """
    model_config = ConfigDict(frozen=True)

    pairs: Dict[str, Tuple[Tuple[float, float], ...]] = Field(default_factory=dict)
    n_retrieving: int = Field(default=0, ge=0)

    @model_validator(mode='after')
    def _check_counts(self) -> 'UtilityEvidence':
        for skill_id, skill_pairs in self.pairs.items():
            if len(skill_pairs) > self.n_retrieving:
                raise ValueError(
                    f"skill {skill_id} has {len(skill_pairs)} pairs but only {self.n_retrieving} "
                    f"trajectories retrieved anything"
                )
            for r_with, r_without in skill_pairs:
                if not (0.0 <= r_with <= 1.0 and 0.0 <= r_without <= 1.0):
                    raise ValueError(f"reward pair ({r_with}, {r_without}) for skill {skill_id} is outside [0, 1]")
        return self

    def count(self, skill_id: str) -> int:
        return len(self.pairs.get(skill_id, ()))


class TaskEvidence(BaseModel):
    """Retrieval, factual rollout and one leave-one-out replay per retrieved skill for a query task"""
    model_config = ConfigDict(frozen=True)

    task_id: str
    retrieval: RetrievalResult
    factual: Trajectory
    loo: Tuple[Trajectory, ...] = ()


class ProfileEvaluation(BaseModel):
    model_config = ConfigDict(frozen=True)

    bank_id: str
    profile: ObjectiveProfile
    evidence: UtilityEvidence
    tasks: Tuple[TaskEvidence, ...] = ()
    enabled_objectives: Tuple[str, ...] = OBJECTIVE_NAMES

    @property
    def task_ids(self) -> List[str]:
        return [task.task_id for task in self.tasks]

    @property
    def retrieval_results(self) -> List[RetrievalResult]:
        return [task.retrieval for task in self.tasks]


def delta(r_with: float, r_without: float) -> float:
    """Counterfactual contribution of a skill to one trajectory's reward"""
    for reward in (r_with, r_without):
        if not 0.0 <= reward <= 1.0:
            raise InvalidInputError(f"Reward must be in [0, 1], got {reward}")
    return r_with - r_without


def skill_utility(pairs: Sequence[Tuple[float, float]]) -> Optional[float]:
    """Mean delta over the trajectories retrieving a skill; None without evidence"""
    if not pairs:
        return None
    return math.fsum(delta(r_with, r_without) for r_with, r_without in pairs) / len(pairs)


def bank_utility(evidence: UtilityEvidence) -> float:
    """Sum over skills of (|T_s| / N_R) * mean delta

    Weights are taken literally and may sum above 1 when skills are co-retrieved.
    Returns 0 when no trajectory retrieved anything.
    """
    if evidence.n_retrieving == 0:
        return 0.0
    terms = []
    for skill_id in sorted(evidence.pairs):
        pairs = evidence.pairs[skill_id]
        mean = skill_utility(pairs)
        if mean is None:
            continue
        terms.append(len(pairs) / evidence.n_retrieving * mean)
    return math.fsum(terms)


def _log_det(matrix: np.ndarray) -> float:
    try:
        factor = np.linalg.cholesky(matrix)
        return float(2.0 * np.sum(np.log(np.diag(factor))))
    except np.linalg.LinAlgError:
        sign, log_det = np.linalg.slogdet(matrix)
        if sign <= 0:
            return -math.inf
        return float(log_det)


def diversity(bank: SkillBank, epsilon_reg: float = DEFAULT_EPSILON_REG) -> float:
    """det(G + eps*I)^(1/|B|) over the Gram matrix of skill embeddings, clamped to 1

    Empty bank -> 0.

    Raises:
        InvalidInputError: If an embedding is not unit-norm
    """
    if bank.size == 0:
        return 0.0
    embeddings = np.array([skill.embedding for skill in bank.skills], dtype=np.float64)
    norms = np.linalg.norm(embeddings, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOLERANCE)
    if bad.size:
        raise InvalidInputError(f"Skill {bank.skills[int(bad[0])].id} has non-unit embedding norm {norms[bad[0]]}")

    gram = embeddings @ embeddings.T + epsilon_reg * np.eye(bank.size)
    log_det = _log_det(gram)
    if log_det == -math.inf:
        return 0.0
    return min(1.0, math.exp(log_det / bank.size))


def coverage(retrieval_results: Sequence[RetrievalResult], bank: SkillBank, k_top: int) -> float:
    """Retrieval density times skill usage over the query tasks

    density = mean |R_t| / k_top, usage = fraction of bank skills retrieved at least once.
    """
    if k_top < 1:
        raise InvalidInputError(f"k_top must be at least 1, got {k_top}")
    if bank.size == 0 or not retrieval_results:
        return 0.0
    density = sum(result.size for result in retrieval_results) / (len(retrieval_results) * k_top)
    used = {skill_id for result in retrieval_results for skill_id in result.skill_ids}
    usage = sum(1 for skill_id in bank.skill_ids if skill_id in used) / bank.size
    return min(1.0, density * usage)


def collect_task_evidence(task: TaskQuery,
                          bank: SkillBank,
                          worker: Worker,
                          retriever: HybridRetriever,
                          cache: Optional[ReplayCache] = None) -> TaskEvidence:
    """Retrieve for one task, roll it out, and replay it once per retrieved skill left out"""
    retrieval, skills = retriever.retrieve_skills(task.text, bank)
    factual = cached_rollout(worker, task, skills, cache)
    loo = tuple(loo_replay(worker, task, skills, skill, cache) for skill in skills)
    return TaskEvidence(task_id=task.task_id, retrieval=retrieval, factual=factual, loo=loo)


def utility_evidence(tasks: Iterable[TaskEvidence]) -> UtilityEvidence:
    pairs: Dict[str, List[Tuple[float, float]]] = {}
    n_retrieving = 0
    for task in sorted(tasks, key=lambda t: t.task_id):
        if task.retrieval.is_empty:
            continue
        n_retrieving += 1
        for skill_id, replay in zip(task.retrieval.skill_ids, task.loo):
            pairs.setdefault(skill_id, []).append((task.factual.reward, replay.reward))
    return UtilityEvidence(pairs={k: tuple(v) for k, v in pairs.items()}, n_retrieving=n_retrieving)


def _check_objectives(enabled_objectives: Sequence[str]) -> Tuple[str, ...]:
    unknown = [name for name in enabled_objectives if name not in OBJECTIVE_NAMES]
    if unknown:
        raise InvalidInputError(f"Unknown objectives: {', '.join(unknown)}")
    if 'util' not in enabled_objectives:
        raise InvalidInputError("util must always be an enabled objective")
    return tuple(name for name in OBJECTIVE_NAMES if name in enabled_objectives)


def evaluate_bank(bank: SkillBank,
                  query_tasks: Sequence[TaskQuery],
                  worker: Worker,
                  retriever: HybridRetriever,
                  cache: Optional[ReplayCache] = None,
                  enabled_objectives: Sequence[str] = OBJECTIVE_NAMES,
                  epsilon_reg: float = DEFAULT_EPSILON_REG,
                  max_workers: Optional[int] = None) -> ProfileEvaluation:
    """Evaluate a bank on the query split, keeping all evidence behind the profile

    Per-task work fans out over a thread pool; reduction runs in task id order.
    All three objectives are computed; enabled_objectives is recorded for selection.

    Raises:
        InvalidInputError: If the query split is empty
        RolloutError: If any rollout fails
    """
    if not query_tasks:
        raise InvalidInputError("Query split must be non-empty")
    enabled = _check_objectives(enabled_objectives)
    ordered = sorted(query_tasks, key=lambda t: t.task_id)

    if bank.size == 0:
        # R_t is empty for every task, so rollouts only feed the trajectory record
        tasks = tuple(
            TaskEvidence(task_id=task.task_id, retrieval=RetrievalResult(query_text=task.text),
                         factual=cached_rollout(worker, task, [], cache))
            for task in ordered
        )
        return ProfileEvaluation(bank_id=bank.bank_id, profile=EMPTY_PROFILE,
                                 evidence=UtilityEvidence(), tasks=tasks, enabled_objectives=enabled)

    try:
        with ThreadPoolExecutor(max_workers=max_workers) as executor:
            tasks = tuple(executor.map(
                lambda task: collect_task_evidence(task, bank, worker, retriever, cache), ordered
            ))
    except RolloutError as e:
        logger.error(f"Evaluation of bank {bank.bank_id} aborted: {e}")
        raise

    evidence = utility_evidence(tasks)
    profile = ObjectiveProfile(
        util=bank_utility(evidence),
        div=diversity(bank, epsilon_reg),
        cov=coverage([task.retrieval for task in tasks], bank, retriever.config.k_top),
    )
    logger.debug(f"Bank {bank.bank_id}: util={profile.util:.4f} div={profile.div:.4f} cov={profile.cov:.4f}")
    return ProfileEvaluation(bank_id=bank.bank_id, profile=profile, evidence=evidence,
                             tasks=tasks, enabled_objectives=enabled)


def evaluate_profile(bank: SkillBank,
                     query_tasks: Sequence[TaskQuery],
                     worker: Worker,
                     retriever: HybridRetriever,
                     cache: Optional[ReplayCache] = None,
                     enabled_objectives: Sequence[str] = OBJECTIVE_NAMES,
                     epsilon_reg: float = DEFAULT_EPSILON_REG,
                     max_workers: Optional[int] = None) -> ObjectiveProfile:
    return evaluate_bank(bank, query_tasks, worker, retriever, cache, enabled_objectives,
                         epsilon_reg, max_workers).profile


def profile_report(evaluation: ProfileEvaluation, bank: SkillBank) -> Dict:
    """Profile report record: objectives, retrieval counts and per-skill mean delta"""
    per_skill = []
    for skill in bank.skills:
        pairs = evaluation.evidence.pairs.get(skill.id, ())
        per_skill.append({
            'skill_id': skill.id,
            'n_retrieved': len(pairs),
            'mean_delta': skill_utility(pairs),
        })
    return {
        'bank_id': evaluation.bank_id,
        'util': evaluation.profile.util,
        'div': evaluation.profile.div,
        'cov': evaluation.profile.cov,
        'n_query_tasks': len(evaluation.tasks),
        'N_R': evaluation.evidence.n_retrieving,
        'per_skill': per_skill,
    }
