import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ConfigError, InvalidInputError, ProposerError, SkillCuratorError
from .objectives import (DEFAULT_EPSILON_REG, OBJECTIVE_NAMES, ObjectiveProfile, ProfileEvaluation,
                         evaluate_bank)
from .pareto_selector import DEFAULT_EPSILON_TOL, Candidate, SelectionOutcome, select
from .proposers import (EDIT_OPS, DiagnoserThresholds, EditPools, EvidencePair, PlannedBank,
                        ProposerBackendConfig, Proposers, TaskOutcome, Verdict, build_proposers)
from .replay_cache import ReplayCache
from .retrieval import HybridRetriever, RetrievalConfig
from .rollout import (SyntheticWorker, SyntheticWorld, TaskQuery, Trajectory, Worker, append_trajectory_log,
                      cached_rollout, generate_world, load_world, loo_replay, partition_quadrants)
from .skill_model import EmbeddingProvider, HashingEmbedder, Skill, SkillBank, save_bank
from .utils import append_json_line, unique_in_order, write_json

logger = logging.getLogger(__name__)

# Objective subsets and edit-operation subsets compared in ablation runs
OBJECTIVE_ABLATIONS: Dict[str, Tuple[str, ...]] = {
    'util': ('util',),
    'util+div': ('util', 'div'),
    'util+cov': ('util', 'cov'),
    'util+div+cov': ('util', 'div', 'cov'),
}
EDIT_OP_ABLATIONS: Dict[str, Tuple[str, ...]] = {
    'add': ('add',),
    'add+rewrite': ('add', 'rewrite'),
    'add+remove': ('add', 'remove'),
    'add+rewrite+remove': ('add', 'rewrite', 'remove'),
}

ROUNDS_FILE = 'rounds.jsonl'
TIMINGS_FILE = 'timings.jsonl'
TRAJECTORIES_FILE = 'trajectories.jsonl'
BANK_FILE = 'bank.json'
CACHE_STATS_FILE = 'cache_stats.json'
TEST_BASELINE_FILE = 'test_baseline.json'


class WorldSettings(BaseModel):
    """Synthetic world generated from the run seed when no world file is configured"""
    model_config = ConfigDict(frozen=True)

    n_tags: int = Field(default=4, ge=1)
    n_tasks_per_split: int = Field(default=8, ge=1)
    solvable_fraction: float = Field(default=0.25, ge=0.0, le=1.0)


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    rounds: int = Field(default=10, ge=0)
    candidates: int = Field(default=4, ge=1)
    epsilon_tol: float = Field(default=DEFAULT_EPSILON_TOL, ge=0.0)
    retrieval: RetrievalConfig = Field(default_factory=RetrievalConfig)
    epsilon_reg: float = Field(default=DEFAULT_EPSILON_REG, gt=0.0)
    enabled_objectives: Tuple[str, ...] = OBJECTIVE_NAMES
    enabled_edit_ops: Tuple[str, ...] = EDIT_OPS
    success_threshold: float = Field(default=1.0, ge=0.0, le=1.0)
    max_steps: int = Field(default=1, ge=0)
    seed: int = 42
    world_path: Optional[str] = None
    world: WorldSettings = Field(default_factory=WorldSettings)
    cache_dir: Optional[str] = None
    use_cache: bool = True
    proposer: ProposerBackendConfig = Field(default_factory=ProposerBackendConfig)
    thresholds: DiagnoserThresholds = Field(default_factory=DiagnoserThresholds)
    embedding_dim: int = Field(default=256, ge=1)
    max_workers: Optional[int] = Field(default=None, ge=1)
    log_trajectories: bool = True

    @field_validator('enabled_objectives', mode='before')
    @classmethod
    def _normalize_objectives(cls, value):
        if isinstance(value, str):
            value = value.split(',')
        names = unique_in_order(str(v).strip().lower() for v in value if str(v).strip())
        unknown = [n for n in names if n not in OBJECTIVE_NAMES]
        if unknown:
            raise ValueError(f"unknown objectives: {', '.join(unknown)}")
        if 'util' not in names:
            raise ValueError("util must always be enabled")
        return tuple(n for n in OBJECTIVE_NAMES if n in names)

    @field_validator('enabled_edit_ops', mode='before')
    @classmethod
    def _normalize_edit_ops(cls, value):
        if isinstance(value, str):
            value = value.split(',')
        ops = unique_in_order(str(v).strip().lower() for v in value if str(v).strip())
        unknown = [op for op in ops if op not in EDIT_OPS]
        if unknown:
            raise ValueError(f"unknown edit operations: {', '.join(unknown)}")
        if 'add' not in ops:
            raise ValueError("add must always be enabled")
        return tuple(op for op in EDIT_OPS if op in ops)

    def with_overrides(self, **overrides) -> 'RunConfig':
        """Copy with the given fields replaced and re-validated; None values are ignored

        Raises:
            ConfigError: If the result is invalid
        """
        data = self.model_dump()
        data.update({key: value for key, value in overrides.items() if value is not None})
        try:
            return RunConfig.model_validate(data)
        except ValidationError as e:
            raise ConfigError(f"Invalid configuration override: {e}") from e


def load_run_config(path: Union[str, Path]) -> RunConfig:
    """Read a RunConfig JSON file

    Raises:
        FileNotFoundError: If the file does not exist
        ConfigError: If the file is not a valid configuration
    """
    raw = Path(path).read_bytes()
    try:
        return RunConfig.model_validate_json(raw)
    except ValidationError as e:
        raise ConfigError(f"Invalid config file {path}: {e}") from e


class EditCounts(BaseModel):
    model_config = ConfigDict(frozen=True)

    added: int = 0
    rewritten: int = 0
    removed: int = 0
    kept: int = 0


class RoundReport(BaseModel):
    """Outcome of one curation round; wall_time_s is kept out of the round record"""
    model_config = ConfigDict(frozen=True)

    round: int
    bank_id: str
    bank_size: int
    profile: ObjectiveProfile
    null_profile: ObjectiveProfile
    winner_is_null: bool
    n_candidates: int
    n_failed_candidates: int = 0
    edit_counts: EditCounts
    applied_ops: Tuple[str, ...] = ()
    cache_hit_rate: float = 0.0
    loo_hit_rate: float = 0.0
    selection: Dict
    candidate_profiles: Tuple[Dict, ...] = ()
    support_task_ids: Tuple[str, ...] = ()
    query_task_ids: Tuple[str, ...] = ()
    test_success_rate: Optional[float] = None
    wall_time_s: Optional[float] = None

    def to_record(self) -> Dict:
        return {
            'round': self.round,
            'bank_id': self.bank_id,
            'bank_size': self.bank_size,
            'util': self.profile.util,
            'div': self.profile.div,
            'cov': self.profile.cov,
            'test_success_rate': self.test_success_rate,
            'winner_is_null': self.winner_is_null,
            'n_candidates': self.n_candidates,
            'n_failed_candidates': self.n_failed_candidates,
            'edit_counts': self.edit_counts.model_dump(),
            'applied_ops': list(self.applied_ops),
            'cache_hit_rate': self.cache_hit_rate,
            'loo_hit_rate': self.loo_hit_rate,
            'null_profile': self.null_profile.to_record(),
            'selection': self.selection,
            'candidate_profiles': list(self.candidate_profiles),
            'support_task_ids': list(self.support_task_ids),
            'query_task_ids': list(self.query_task_ids),
        }


class InnerLoopResult(BaseModel):
    """Candidate banks of one inner loop plus the evidence trail behind them"""
    model_config = ConfigDict(frozen=True)

    candidates: Tuple[PlannedBank, ...] = ()
    pools: EditPools = Field(default_factory=EditPools)
    verdicts: Tuple[Verdict, ...] = ()
    trajectories: Tuple[Trajectory, ...] = ()
    support_task_ids: Tuple[str, ...] = ()


@dataclass
class RunResult:
    bank: SkillBank
    reports: List[RoundReport] = field(default_factory=list)
    initial_bank: Optional[SkillBank] = None
    baseline_success_rate: Optional[float] = None
    initial_success_rate: Optional[float] = None


def _map_ordered(fn, items: Sequence, max_workers: Optional[int]) -> List:
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        return list(executor.map(fn, items))


def support_rollouts(bank: SkillBank,
                     support_tasks: Sequence[TaskQuery],
                     worker: Worker,
                     retriever: Optional[HybridRetriever],
                     cache: Optional[ReplayCache] = None,
                     max_workers: Optional[int] = None) -> List[Tuple[TaskQuery, List[Skill], Trajectory]]:
    """Retrieve and roll out every task, in task id order"""
    def run_task(task: TaskQuery):
        skills = [] if retriever is None or bank.size == 0 else retriever.retrieve_skills(task.text, bank)[1]
        return task, skills, cached_rollout(worker, task, skills, cache)

    ordered = sorted(support_tasks, key=lambda t: t.task_id)
    return _map_ordered(run_task, ordered, max_workers)


def unique_skills(skills: Sequence[Skill]) -> List[Skill]:
    seen, unique = set(), []
    for skill in skills:
        if skill.id not in seen:
            seen.add(skill.id)
            unique.append(skill)
    return unique


def split_success_rate(bank: SkillBank,
                       tasks: Sequence[TaskQuery],
                       worker: Worker,
                       retriever: Optional[HybridRetriever],
                       cache: Optional[ReplayCache] = None,
                       max_workers: Optional[int] = None) -> Tuple[float, List[Trajectory]]:
    """Fraction of tasks the worker solves with the bank; retriever=None measures the no-retrieval baseline

    Raises:
        InvalidInputError: If tasks is empty
    """
    if not tasks:
        raise InvalidInputError("Success rate needs at least one task")
    trajectories = [trajectory for _, _, trajectory in
                    support_rollouts(bank, tasks, worker, retriever, cache, max_workers)]
    return sum(t.success for t in trajectories) / len(trajectories), trajectories


def _outcomes(runs, trajectories: Sequence[Trajectory]) -> List[TaskOutcome]:
    wanted = {t.task_id for t in trajectories}
    return [TaskOutcome(task=task, trajectory=trajectory) for task, _, trajectory in runs if task.task_id in wanted]


def cold_start(worker: Worker,
               support_tasks: Sequence[TaskQuery],
               proposers: Proposers,
               cache: Optional[ReplayCache] = None,
               max_workers: Optional[int] = None) -> Tuple[SkillBank, List[Trajectory]]:
    """Distill the initial bank from support rollouts without retrieval

    Returns:
        (B0, the no-retrieval support trajectories)

    Raises:
        InvalidInputError: If the support split is empty
    """
    if not support_tasks:
        raise InvalidInputError("Support split must be non-empty")
    runs = support_rollouts(SkillBank.empty(), support_tasks, worker, None, cache, max_workers)
    trajectories = [trajectory for _, _, trajectory in runs]
    quadrants = partition_quadrants(trajectories)
    try:
        skills = proposers.distiller.distill(_outcomes(runs, quadrants.fail_no_ret),
                                             _outcomes(runs, quadrants.succ_no_ret),
                                             round_created=0, origin='cold_start')
    except ProposerError as e:
        logger.warning(f"Distiller failed during cold start, starting from an empty bank: {e}")
        skills = []

    bank = SkillBank.from_skills(unique_skills(skills), round=0)
    logger.info(f"Cold start: {len(quadrants.fail_no_ret)} failures -> initial bank {bank.bank_id} "
                f"with {bank.size} skills")
    return bank, trajectories


def inner_loop(bank: SkillBank,
               support_tasks: Sequence[TaskQuery],
               worker: Worker,
               retriever: HybridRetriever,
               cache: Optional[ReplayCache],
               proposers: Proposers,
               k: int,
               enabled_edit_ops: Sequence[str] = EDIT_OPS,
               round: int = 1,
               max_workers: Optional[int] = None) -> InnerLoopResult:
    """Propose candidate banks from support-split evidence

    Rolls out support tasks with retrieval, distills adds from the no-retrieval
    quadrants, replays each retrieved skill left out to build per-skill evidence,
    diagnoses every skill with evidence, then plans up to k candidate banks.
    A proposer role that fails contributes an empty pool this round.
    """
    runs = support_rollouts(bank, support_tasks, worker, retriever, cache, max_workers)
    trajectories = [trajectory for _, _, trajectory in runs]
    quadrants = partition_quadrants(trajectories)

    try:
        adds = proposers.distiller.distill(_outcomes(runs, quadrants.fail_no_ret),
                                           _outcomes(runs, quadrants.succ_no_ret),
                                           round_created=round, origin='add')
    except ProposerError as e:
        logger.warning(f"Round {round}: distiller degraded to an empty add pool: {e}")
        adds = []
    adds = [skill for skill in unique_skills(adds) if not bank.contains(skill.id)]

    retrieving = {t.task_id for t in quadrants.with_retrieval}

    def replay_task(run) -> List[Tuple[str, EvidencePair]]:
        task, skills, factual = run
        return [(skill.id, EvidencePair(task=task, factual=factual,
                                        counterfactual=loo_replay(worker, task, skills, skill, cache)))
                for skill in skills]

    evidence: Dict[str, List[EvidencePair]] = {}
    for pairs in _map_ordered(replay_task, [r for r in runs if r[0].task_id in retrieving], max_workers):
        for skill_id, pair in pairs:
            evidence.setdefault(skill_id, []).append(pair)

    diagnosed = [skill for skill in bank.skills if evidence.get(skill.id)]
    try:
        verdicts = _map_ordered(lambda s: proposers.diagnoser.diagnose(s, evidence[s.id], round_created=round),
                                diagnosed, max_workers)
    except ProposerError as e:
        logger.warning(f"Round {round}: diagnoser degraded to no verdicts: {e}")
        verdicts = []

    pools = EditPools.from_verdicts(adds, verdicts).restrict(enabled_edit_ops)
    try:
        candidates = proposers.planner.plan_edits(bank, pools, k, round=round)
    except ProposerError as e:
        logger.warning(f"Round {round}: planner degraded to no candidates: {e}")
        candidates = []

    logger.info(
        f"Round {round} inner loop: {len(pools.add)} adds, {len(pools.rewrite)} rewrites, "
        f"{len(pools.remove)} removes, {len(pools.keep)} keeps -> {len(candidates)} candidates"
    )
    return InnerLoopResult(
        candidates=tuple(candidates),
        pools=pools,
        verdicts=tuple(verdicts),
        trajectories=tuple(trajectories),
        support_task_ids=tuple(task.task_id for task, _, _ in runs),
    )


def _edit_counts(current_bank: SkillBank, planned: Optional[PlannedBank], next_bank: SkillBank) -> EditCounts:
    if planned is None:
        return EditCounts(kept=current_bank.size)
    kept = sum(1 for skill_id in next_bank.skill_ids if current_bank.contains(skill_id))
    return EditCounts(added=len(planned.added), rewritten=len(planned.rewritten),
                      removed=len(planned.removed), kept=kept)


def outer_step(candidates: Sequence[PlannedBank],
               current_bank: SkillBank,
               query_tasks: Sequence[TaskQuery],
               worker: Worker,
               retriever: HybridRetriever,
               cache: Optional[ReplayCache],
               config: RunConfig,
               round: int = 1) -> Tuple[SkillBank, RoundReport, Dict[str, ProfileEvaluation]]:
    """Evaluate the null candidate and every proposed bank on the query split, then select

    A candidate whose evaluation fails is excluded; the null candidate is always
    evaluated and a failure there aborts the round.

    Returns:
        (next bank, round report, evaluations keyed by bank_id)
    """
    def evaluate(bank: SkillBank) -> ProfileEvaluation:
        return evaluate_bank(bank, query_tasks, worker, retriever, cache, config.enabled_objectives,
                             config.epsilon_reg, config.max_workers)

    evaluations = {current_bank.bank_id: evaluate(current_bank)}
    pool = [Candidate(bank_ref=current_bank.bank_id, profile=evaluations[current_bank.bank_id].profile,
                      is_null=True, bank_size=current_bank.size)]
    plans: Dict[str, PlannedBank] = {}
    n_failed = 0
    for planned in candidates:
        bank_id = planned.bank.bank_id
        if bank_id in plans or bank_id == current_bank.bank_id:
            continue
        try:
            evaluations[bank_id] = evaluate(planned.bank)
        except SkillCuratorError as e:
            n_failed += 1
            logger.warning(f"Round {round}: excluding candidate {bank_id}, evaluation failed: {e}")
            continue
        plans[bank_id] = planned
        pool.append(Candidate(bank_ref=bank_id, profile=evaluations[bank_id].profile,
                              bank_size=planned.bank.size))

    outcome: SelectionOutcome = select(pool, config.epsilon_tol, config.enabled_objectives)
    winner_plan = None if outcome.winner.is_null else plans[outcome.winner.bank_ref]
    next_bank = current_bank.with_round(round) if winner_plan is None else winner_plan.bank

    query_ids = unique_in_order(task_id for evaluation in evaluations.values() for task_id in evaluation.task_ids)
    round_stats = cache.round_stats(round) if cache is not None else None
    report = RoundReport(
        round=round,
        bank_id=next_bank.bank_id,
        bank_size=next_bank.size,
        profile=outcome.winner.profile,
        null_profile=pool[0].profile,
        winner_is_null=outcome.winner.is_null,
        n_candidates=len(candidates),
        n_failed_candidates=n_failed,
        edit_counts=_edit_counts(current_bank, winner_plan, next_bank),
        applied_ops=winner_plan.ops if winner_plan else (),
        cache_hit_rate=round_stats.hit_rate if round_stats else 0.0,
        loo_hit_rate=round_stats.loo_hit_rate if round_stats else 0.0,
        selection=outcome.to_record(),
        candidate_profiles=tuple(c.to_record() for c in pool),
        query_task_ids=tuple(sorted(query_ids)),
    )
    logger.info(
        f"Round {round}: winner {next_bank.bank_id}{' (null, carried forward)' if outcome.winner.is_null else ''} "
        f"util={report.profile.util:.4f} div={report.profile.div:.4f} cov={report.profile.cov:.4f} "
        f"size={next_bank.size}"
    )
    return next_bank, report, evaluations


class CurationLoop:
    """Cold start followed by rounds of inner-loop proposal and outer-loop selection

    When out_dir is set, round records are appended to rounds.jsonl as each round
    finishes; timings go to timings.jsonl and the final bank to bank.json.
    """

    def __init__(self,
                 config: RunConfig,
                 support_tasks: Sequence[TaskQuery],
                 query_tasks: Sequence[TaskQuery],
                 worker: Worker,
                 proposers: Optional[Proposers] = None,
                 embedder: Optional[EmbeddingProvider] = None,
                 cache: Optional[ReplayCache] = None,
                 out_dir: Optional[Union[str, Path]] = None,
                 test_tasks: Optional[Sequence[TaskQuery]] = None):
        if not support_tasks:
            raise InvalidInputError("Support split must be non-empty")
        if not query_tasks:
            raise InvalidInputError("Query split must be non-empty")
        overlap = {t.task_id for t in support_tasks} & {t.task_id for t in query_tasks}
        if overlap:
            raise InvalidInputError(f"Support and query splits share task ids: {', '.join(sorted(overlap))}")
        test_ids = {t.task_id for t in test_tasks or ()}
        leaked = test_ids & ({t.task_id for t in support_tasks} | {t.task_id for t in query_tasks})
        if leaked:
            raise InvalidInputError(f"Test split shares task ids with support or query: {', '.join(sorted(leaked))}")

        self.config = config
        self.support_tasks = sorted(support_tasks, key=lambda t: t.task_id)
        self.query_tasks = sorted(query_tasks, key=lambda t: t.task_id)
        self.test_tasks = sorted(test_tasks or (), key=lambda t: t.task_id)
        self.worker = worker
        self.embedder = embedder or HashingEmbedder(dimension=config.embedding_dim)
        self.retriever = HybridRetriever(config.retrieval, self.embedder)
        self.cache = cache if cache is not None else ReplayCache(config.cache_dir, enabled=config.use_cache)
        self.proposers = proposers or build_proposers(config.proposer, self.embedder, config.thresholds,
                                                      seed=config.seed)
        self.out_dir = Path(out_dir) if out_dir else None

    @classmethod
    def from_config(cls,
                    config: RunConfig,
                    world: Optional[SyntheticWorld] = None,
                    out_dir: Optional[Union[str, Path]] = None,
                    **kwargs) -> 'CurationLoop':
        """Loop over a synthetic world: the given one, the configured file, or one generated from the seed"""
        if world is None:
            world = load_world(config.world_path) if config.world_path else generate_world(
                config.world.n_tags, config.world.n_tasks_per_split, config.world.solvable_fraction, config.seed
            )
        worker = SyntheticWorker(world, success_threshold=config.success_threshold, max_steps=config.max_steps)
        kwargs.setdefault('test_tasks', world.split('test'))
        return cls(config, world.split('support'), world.split('query'), worker, out_dir=out_dir, **kwargs)

    def _reset_outputs(self) -> None:
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        for name in (ROUNDS_FILE, TIMINGS_FILE, TRAJECTORIES_FILE, TEST_BASELINE_FILE):
            (self.out_dir / name).unlink(missing_ok=True)

    def _log_trajectories(self, trajectories: Sequence[Trajectory], round: int, split: str) -> None:
        if self.out_dir is None or not self.config.log_trajectories:
            return
        for trajectory in trajectories:
            append_trajectory_log(self.out_dir / TRAJECTORIES_FILE, trajectory, round, split)

    def cold_start(self) -> SkillBank:
        self.cache.begin_round(0)
        bank, trajectories = cold_start(self.worker, self.support_tasks, self.proposers, self.cache,
                                        self.config.max_workers)
        self._log_trajectories(trajectories, 0, 'support')
        return bank

    def inner_loop(self, bank: SkillBank, round: int) -> InnerLoopResult:
        result = inner_loop(bank, self.support_tasks, self.worker, self.retriever, self.cache, self.proposers,
                            self.config.candidates, self.config.enabled_edit_ops, round, self.config.max_workers)
        self._log_trajectories(result.trajectories, round, 'support')
        return result

    def outer_step(self, inner: InnerLoopResult, bank: SkillBank, round: int) -> Tuple[SkillBank, RoundReport]:
        next_bank, report, evaluations = outer_step(inner.candidates, bank, self.query_tasks, self.worker,
                                                    self.retriever, self.cache, self.config, round)
        self._log_trajectories([t.factual for t in evaluations[bank.bank_id].tasks], round, 'query')
        report = report.model_copy(update={'support_task_ids': inner.support_task_ids})
        return next_bank, report

    def held_out_success_rate(self, bank: SkillBank, round: int, retriever: Optional[HybridRetriever]) -> float:
        """Success rate on the held-out test split; never feeds proposal or selection"""
        rate, trajectories = split_success_rate(bank, self.test_tasks, self.worker, retriever, self.cache,
                                                self.config.max_workers)
        self._log_trajectories(trajectories, round, 'test')
        return rate

    def run(self) -> RunResult:
        """Run cold start and config.rounds rounds

        Raises:
            SkillCuratorError: On an unrecoverable error; reports of finished rounds stay on disk
        """
        self._reset_outputs()
        bank = self.cold_start()
        result = RunResult(bank=bank, initial_bank=bank)
        if self.test_tasks:
            result.baseline_success_rate = self.held_out_success_rate(SkillBank.empty(), 0, None)
            result.initial_success_rate = self.held_out_success_rate(bank, 0, self.retriever)
            logger.info(f"Test split: {result.baseline_success_rate:.3f} without retrieval, "
                        f"{result.initial_success_rate:.3f} with the cold-start bank")
            if self.out_dir is not None:
                write_json(self.out_dir / TEST_BASELINE_FILE, {'no_retrieval': result.baseline_success_rate,
                                                               'initial_bank': result.initial_success_rate})

        for round in range(1, self.config.rounds + 1):
            started = time.perf_counter()
            self.cache.begin_round(round)
            logger.info(f"Round {round}/{self.config.rounds} starting from bank {bank.bank_id} ({bank.size} skills)")
            try:
                inner = self.inner_loop(bank, round)
                bank, report = self.outer_step(inner, bank, round)
            except SkillCuratorError as e:
                logger.error(f"Round {round} aborted: {e}")
                raise
            update = {'wall_time_s': time.perf_counter() - started}
            if self.test_tasks:
                update['test_success_rate'] = self.held_out_success_rate(bank, round, self.retriever)
                logger.info(f"Round {round} test success rate: {update['test_success_rate']:.3f}")
            report = report.model_copy(update=update)
            result.reports.append(report)
            result.bank = bank
            if self.out_dir is not None:
                append_json_line(self.out_dir / ROUNDS_FILE, report.to_record())
                append_json_line(self.out_dir / TIMINGS_FILE, {'round': round, 'wall_time_s': report.wall_time_s})

        if self.out_dir is not None:
            save_bank(result.bank, self.out_dir / BANK_FILE)
            write_json(self.out_dir / CACHE_STATS_FILE, self.cache.stats.to_record())
        logger.info(f"Curation finished after {self.config.rounds} rounds: bank {result.bank.bank_id} "
                    f"with {result.bank.size} skills")
        return result


def run(config: RunConfig, out_dir: Optional[Union[str, Path]] = None, **kwargs) -> RunResult:
    """Build a loop from the config and run it"""
    return CurationLoop.from_config(config, out_dir=out_dir, **kwargs).run()
