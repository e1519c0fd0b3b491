import itertools
import logging
import math
from abc import ABC, abstractmethod
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Literal, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import BankValidationError, InvalidInputError
from .rollout import TaskQuery, Trajectory, format_tag_annotation, parse_skill_tags
from .skill_model import EmbeddingProvider, Origin, Skill, SkillBank, make_skill

logger = logging.getLogger(__name__)

VerdictKind = Literal['keep', 'rewrite', 'remove']
EditOp = Literal['add', 'rewrite', 'remove']
EDIT_OPS: Tuple[str, ...] = ('add', 'rewrite', 'remove')

_TAG_ANNOTATION_PREFIX = 'tags:'


class TaskOutcome(BaseModel):
    """A support task with the trajectory it produced"""
    model_config = ConfigDict(frozen=True)

    task: TaskQuery
    trajectory: Trajectory


class EvidencePair(BaseModel):
    """Factual rollout and its leave-one-out counterfactual for one task retrieving a skill"""
    model_config = ConfigDict(frozen=True)

    task: TaskQuery
    factual: Trajectory
    counterfactual: Trajectory

    @property
    def delta(self) -> float:
        return self.factual.reward - self.counterfactual.reward


class EvidenceSummary(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_pairs: int = Field(ge=0)
    mean_delta: float


class Verdict(BaseModel):
    model_config = ConfigDict(frozen=True)

    skill_id: str
    kind: VerdictKind
    rewritten: Optional[Skill] = None
    evidence_summary: EvidenceSummary

    @model_validator(mode='after')
    def _check_rewrite(self) -> 'Verdict':
        if (self.kind == 'rewrite') != (self.rewritten is not None):
            raise ValueError("rewritten must be present exactly when the verdict is rewrite")
        if self.rewritten is not None and self.rewritten.id == self.skill_id:
            raise ValueError(f"rewritten skill must differ from the original {self.skill_id}")
        return self


class EditPools(BaseModel):
    """Add, rewrite, remove and keep pools proposed for one round"""
    model_config = ConfigDict(frozen=True)

    add: Tuple[Skill, ...] = ()
    rewrite: Tuple[Tuple[str, Skill], ...] = ()
    remove: Tuple[str, ...] = ()
    keep: Tuple[str, ...] = ()

    @classmethod
    def from_verdicts(cls, adds: Sequence[Skill], verdicts: Sequence[Verdict]) -> 'EditPools':
        return cls(
            add=tuple(adds),
            rewrite=tuple((v.skill_id, v.rewritten) for v in verdicts if v.kind == 'rewrite'),
            remove=tuple(v.skill_id for v in verdicts if v.kind == 'remove'),
            keep=tuple(v.skill_id for v in verdicts if v.kind == 'keep'),
        )

    @property
    def is_empty(self) -> bool:
        return not (self.add or self.rewrite or self.remove)

    def restrict(self, enabled_ops: Sequence[str]) -> 'EditPools':
        """Empty every pool whose edit operation is disabled"""
        return self.model_copy(update={
            'add': self.add if 'add' in enabled_ops else (),
            'rewrite': self.rewrite if 'rewrite' in enabled_ops else (),
            'remove': self.remove if 'remove' in enabled_ops else (),
        })

    def validate_against(self, bank: SkillBank) -> None:
        """Check pool disjointness and that referenced ids exist in the bank

        Raises:
            BankValidationError: On the first violation found
        """
        groups = {
            'rewrite': [skill_id for skill_id, _ in self.rewrite],
            'remove': list(self.remove),
            'keep': list(self.keep),
        }
        seen: Dict[str, str] = {}
        for name, ids in groups.items():
            for skill_id in ids:
                if not bank.contains(skill_id):
                    raise BankValidationError(f"{name} pool references unknown skill id {skill_id}")
                if skill_id in seen:
                    raise BankValidationError(
                        f"Skill id {skill_id} appears in both the {seen[skill_id]} and {name} pools"
                    )
                seen[skill_id] = name
        add_ids = [skill.id for skill in self.add]
        if len(add_ids) != len(set(add_ids)):
            raise BankValidationError("add pool holds duplicate skills")

    def to_record(self) -> Dict:
        return {
            'add': [skill.id for skill in self.add],
            'rewrite': [[old, new.id] for old, new in self.rewrite],
            'remove': list(self.remove),
            'keep': list(self.keep),
        }


class PlannedBank(BaseModel):
    """Candidate bank with the edits that produced it"""
    model_config = ConfigDict(frozen=True)

    bank: SkillBank
    ops: Tuple[EditOp, ...]
    added: Tuple[str, ...] = ()
    rewritten: Tuple[Tuple[str, str], ...] = ()
    removed: Tuple[str, ...] = ()


class DiagnoserThresholds(BaseModel):
    """mean delta > keep -> Keep, mean delta < remove -> Remove, otherwise Rewrite"""
    model_config = ConfigDict(frozen=True)

    keep: float = 0.0
    remove: float = 0.0

    @model_validator(mode='after')
    def _check_order(self) -> 'DiagnoserThresholds':
        if self.remove > self.keep:
            raise ValueError(f"remove threshold {self.remove} exceeds keep threshold {self.keep}")
        return self


class ProposerBackendConfig(BaseModel):
    model_config = ConfigDict(frozen=True, protected_namespaces=())

    mode: Literal['rule_based', 'remote'] = 'rule_based'
    provider: str = 'openai'
    model_name: str = 'gpt-4o-mini'
    base_url: Optional[str] = None
    api_key_env: str = 'SKILL_CURATOR_API_KEY'
    timeout: float = Field(default=60.0, gt=0.0)
    temperature: float = 0.0
    max_tokens: int = Field(default=2000, ge=1)


class Distiller(ABC):
    @abstractmethod
    def distill(self,
                failures_no_ret: Sequence[TaskOutcome],
                successes_no_ret: Sequence[TaskOutcome],
                round_created: int = 0,
                origin: Origin = 'add') -> List[Skill]:
        ...


class Diagnoser(ABC):
    @abstractmethod
    def diagnose(self, skill: Skill, pairs: Sequence[EvidencePair], round_created: int = 0) -> Verdict:
        ...


class Planner(ABC):
    @abstractmethod
    def plan_edits(self, current_bank: SkillBank, pools: EditPools, k: int, round: int = 0) -> List[PlannedBank]:
        ...


def summarize_evidence(pairs: Sequence[EvidencePair]) -> EvidenceSummary:
    if not pairs:
        raise InvalidInputError("Diagnosis needs at least one evidence pair")
    ordered = sorted(pairs, key=lambda p: p.task.task_id)
    return EvidenceSummary(n_pairs=len(ordered), mean_delta=math.fsum(p.delta for p in ordered) / len(ordered))


def _required_tag(task: TaskQuery) -> Optional[str]:
    return getattr(task, 'required_tag', None)


def tag_skill_text(tag: str) -> Tuple[str, str, str]:
    """Title, principle and when_to_apply of the rule-based skill for a capability tag"""
    return (
        f"Handle {tag} tasks",
        f"When you need to {tag} the object, find what can {tag} it first, "
        f"{tag} the object, then put it on the target receptacle.",
        f"Use when the task requires you to {tag} something. {format_tag_annotation([tag])}",
    )


def _rewrite_when_to_apply(when_to_apply: str, helpful: Sequence[str], harmful: Sequence[str]) -> str:
    head = when_to_apply.split(_TAG_ANNOTATION_PREFIX, 1)[0].strip()
    if helpful:
        head = f"Use when the task requires you to {' or '.join(sorted(helpful))} something."
    annotation = format_tag_annotation(helpful, harmful)
    return f"{head} {annotation}" if head else annotation


class RuleBasedDistiller(Distiller):
    """Groups failures by required capability tag and writes one helpful skill per group

    A group is skipped when, for the same tag, no-retrieval successes outnumber the
    failures: the worker already handles that capability without help.
    """

    def __init__(self, embedder: Optional[EmbeddingProvider] = None):
        self.embedder = embedder

    def distill(self,
                failures_no_ret: Sequence[TaskOutcome],
                successes_no_ret: Sequence[TaskOutcome],
                round_created: int = 0,
                origin: Origin = 'add') -> List[Skill]:
        failures: Dict[str, int] = defaultdict(int)
        for outcome in failures_no_ret:
            tag = _required_tag(outcome.task)
            if tag is None:
                logger.debug(f"Task {outcome.task.task_id} carries no capability tag; not distilled")
                continue
            failures[tag] += 1
        successes: Dict[str, int] = defaultdict(int)
        for outcome in successes_no_ret:
            tag = _required_tag(outcome.task)
            if tag is not None:
                successes[tag] += 1

        skills = []
        for tag in sorted(failures):
            if successes[tag] > failures[tag]:
                logger.debug(f"Skipping tag {tag}: {successes[tag]} successes vs {failures[tag]} failures")
                continue
            title, principle, when_to_apply = tag_skill_text(tag)
            skills.append(make_skill(title, principle, when_to_apply, round_created=round_created,
                                     origin=origin, embedder=self.embedder))
        logger.info(f"Distilled {len(skills)} skills from {len(failures_no_ret)} failures")
        return skills


class RuleBasedDiagnoser(Diagnoser):
    """Verdict from the mean counterfactual delta against configurable thresholds

    Rewrite narrows the helpful tags to those of tasks where the skill did not hurt.
    A rewrite that would leave the content unchanged becomes Keep.
    """

    def __init__(self, thresholds: Optional[DiagnoserThresholds] = None,
                 embedder: Optional[EmbeddingProvider] = None):
        self.thresholds = thresholds or DiagnoserThresholds()
        self.embedder = embedder

    def diagnose(self, skill: Skill, pairs: Sequence[EvidencePair], round_created: int = 0) -> Verdict:
        summary = summarize_evidence(pairs)
        if summary.mean_delta > self.thresholds.keep:
            return Verdict(skill_id=skill.id, kind='keep', evidence_summary=summary)
        if summary.mean_delta < self.thresholds.remove:
            return Verdict(skill_id=skill.id, kind='remove', evidence_summary=summary)

        _, harmful = parse_skill_tags(skill.when_to_apply)
        helpful = sorted({tag for p in pairs if p.delta >= 0 for tag in [_required_tag(p.task)] if tag})
        when_to_apply = _rewrite_when_to_apply(skill.when_to_apply, helpful, sorted(harmful))
        rewritten = make_skill(skill.title, skill.principle, when_to_apply, round_created=round_created,
                               origin='rewrite', embedder=self.embedder)
        if rewritten.id == skill.id:
            logger.debug(f"Rewrite of {skill.id} leaves it unchanged; keeping")
            return Verdict(skill_id=skill.id, kind='keep', evidence_summary=summary)
        return Verdict(skill_id=skill.id, kind='rewrite', rewritten=rewritten, evidence_summary=summary)


def apply_edits(bank: SkillBank, pools: EditPools, ops: Sequence[str], round: int) -> PlannedBank:
    """Apply the chosen edit groups: removals, in-place rewrites, then appended adds"""
    removed_ids = set(pools.remove) if 'remove' in ops else set()
    rewrites = dict(pools.rewrite) if 'rewrite' in ops else {}

    skills: List[Skill] = []
    present = set()
    removed, rewritten, added = [], [], []
    for skill in bank.skills:
        if skill.id in removed_ids:
            removed.append(skill.id)
            continue
        replacement = rewrites.get(skill.id)
        if replacement is not None and replacement.id not in present and not bank.contains(replacement.id):
            skills.append(replacement)
            present.add(replacement.id)
            rewritten.append((skill.id, replacement.id))
            continue
        skills.append(skill)
        present.add(skill.id)

    if 'add' in ops:
        for skill in pools.add:
            if skill.id in present:
                continue
            skills.append(skill)
            present.add(skill.id)
            added.append(skill.id)

    applied_ops = tuple(op for op, done in (('add', added), ('rewrite', rewritten), ('remove', removed)) if done)
    return PlannedBank(
        bank=SkillBank.from_skills(skills, round=round),
        ops=applied_ops,
        added=tuple(added),
        rewritten=tuple(rewritten),
        removed=tuple(removed),
    )


class RuleBasedPlanner(Planner):
    """Full-apply first, then non-empty edit-group subsets by size in add, rewrite, remove order"""

    def plan_edits(self, current_bank: SkillBank, pools: EditPools, k: int, round: int = 0) -> List[PlannedBank]:
        if k < 1:
            raise InvalidInputError(f"K must be at least 1, got {k}")
        pools.validate_against(current_bank)

        groups = [op for op, pool in (('add', pools.add), ('rewrite', pools.rewrite), ('remove', pools.remove))
                  if pool]
        if not groups:
            return []

        orders = [tuple(groups)]
        for size in range(1, len(groups) + 1):
            orders.extend(itertools.combinations(groups, size))

        planned: List[PlannedBank] = []
        seen = {current_bank.bank_id}
        for ops in orders:
            candidate = apply_edits(current_bank, pools, ops, round)
            if candidate.bank.bank_id in seen:
                continue
            seen.add(candidate.bank.bank_id)
            planned.append(candidate)
            if len(planned) == k:
                break
        logger.info(f"Planned {len(planned)} candidate banks from groups {', '.join(groups)}")
        return planned


@dataclass
class Proposers:
    """The three inner-loop roles"""
    distiller: Distiller
    diagnoser: Diagnoser
    planner: Planner
    mode: str = 'rule_based'


def build_proposers(config: Optional[ProposerBackendConfig] = None,
                    embedder: Optional[EmbeddingProvider] = None,
                    thresholds: Optional[DiagnoserThresholds] = None,
                    seed: Optional[int] = None) -> Proposers:
    """Build rule-based or remote proposers from a backend config"""
    config = config or ProposerBackendConfig()
    if config.mode == 'rule_based':
        return Proposers(
            distiller=RuleBasedDistiller(embedder),
            diagnoser=RuleBasedDiagnoser(thresholds, embedder),
            planner=RuleBasedPlanner(),
            mode='rule_based',
        )
    # langchain is only imported for remote mode
    from .remote_proposers import build_remote_proposers
    return build_remote_proposers(config, embedder=embedder, seed=seed)
