import logging
import os
from typing import Any, Dict, List, Optional, Sequence

import orjson
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

from .errors import ConfigError, InvalidInputError, MalformedReplyError
from .llm_processor import LLMConfig, LLMProcessor, Role, Task
from .proposers import (Diagnoser, Distiller, EditPools, EvidencePair, Planner, PlannedBank,
                        ProposerBackendConfig, Proposers, TaskOutcome, Verdict, apply_edits,
                        summarize_evidence)
from .skill_model import EmbeddingProvider, Origin, Skill, SkillBank, make_skill
from .utils import load_env

logger = logging.getLogger(__name__)

MAX_ATTEMPTS = 2
RETRY_MULTIPLIER = 0.5
RETRY_MIN_WAIT = 0.5
RETRY_MAX_WAIT = 2


def parse_json_reply(reply: Optional[str], role: str) -> Dict[str, Any]:
    """Extract the JSON object from a model reply, tolerating surrounding prose or code fences

    Raises:
        MalformedReplyError: If no JSON object can be read; the raw reply is attached
    """
    if not reply:
        raise MalformedReplyError(role, "empty reply", raw_payload=reply)
    start, end = reply.find('{'), reply.rfind('}')
    if start < 0 or end <= start:
        raise MalformedReplyError(role, "reply holds no JSON object", raw_payload=reply)
    try:
        payload = orjson.loads(reply[start:end + 1])
    except orjson.JSONDecodeError as e:
        raise MalformedReplyError(role, f"invalid JSON: {e}", raw_payload=reply) from e
    if not isinstance(payload, dict):
        raise MalformedReplyError(role, "reply JSON is not an object", raw_payload=reply)
    return payload


def _skill_fields(record: Any, role: str, raw: str) -> Dict[str, str]:
    if not isinstance(record, dict):
        raise MalformedReplyError(role, f"skill entry is not an object: {record!r}", raw_payload=raw)
    fields = {}
    for name in ('title', 'principle', 'when_to_apply'):
        value = record.get(name)
        if not isinstance(value, str) or not value.strip():
            raise MalformedReplyError(role, f"skill entry lacks {name}", raw_payload=raw)
        fields[name] = value
    return fields


def _outcome_lines(outcomes: Sequence[TaskOutcome]) -> List[str]:
    return [f"- [{o.task.task_id}] {o.task.text} (reward {o.trajectory.reward:g})" for o in outcomes]


def _skill_block(skill: Skill) -> str:
    return (f"title: {skill.title}\nprinciple: {skill.principle}\n"
            f"when_to_apply: {skill.when_to_apply}")


class _RemoteRole:
    role: Role

    def __init__(self, processor: Any, embedder: Optional[EmbeddingProvider] = None):
        self.processor = processor
        self.embedder = embedder

    @retry(
        stop=stop_after_attempt(MAX_ATTEMPTS),
        wait=wait_exponential(multiplier=RETRY_MULTIPLIER, min=RETRY_MIN_WAIT, max=RETRY_MAX_WAIT),
        retry=retry_if_exception_type(MalformedReplyError),
        reraise=True
    )
    def _ask(self, text: str, task: Task) -> Dict[str, Any]:
        reply = self.processor.process_text(text=text, task=task, role=self.role)
        return parse_json_reply(reply, self.role.name)


class RemoteDistiller(_RemoteRole, Distiller):
    """Two-stage distillation: failure analysis, then one skill per failure pattern"""
    role = Role.skill_distiller()

    def distill(self,
                failures_no_ret: Sequence[TaskOutcome],
                successes_no_ret: Sequence[TaskOutcome],
                round_created: int = 0,
                origin: Origin = 'add') -> List[Skill]:
        if not failures_no_ret:
            return []
        context = "\n".join(
            ["Failed tasks (no skills retrieved):", *_outcome_lines(failures_no_ret),
             "", "Successful tasks (no skills retrieved):", *_outcome_lines(successes_no_ret)]
        )
        patterns = self._ask(context, Task.failure_analysis())
        if not isinstance(patterns.get('patterns'), list):
            raise MalformedReplyError(self.role.name, "missing 'patterns' list", raw_payload=str(patterns))

        reply = self._ask(orjson.dumps(patterns).decode(), Task.skill_synthesis())
        records = reply.get('skills')
        if not isinstance(records, list):
            raise MalformedReplyError(self.role.name, "missing 'skills' list", raw_payload=str(reply))

        skills, seen = [], set()
        for record in records:
            fields = _skill_fields(record, self.role.name, str(reply))
            skill = make_skill(round_created=round_created, origin=origin, embedder=self.embedder, **fields)
            if skill.id not in seen:
                seen.add(skill.id)
                skills.append(skill)
        logger.info(f"Remote distiller proposed {len(skills)} skills")
        return skills


class RemoteDiagnoser(_RemoteRole, Diagnoser):
    role = Role.skill_diagnoser()

    def diagnose(self, skill: Skill, pairs: Sequence[EvidencePair], round_created: int = 0) -> Verdict:
        summary = summarize_evidence(pairs)
        lines = [f"Skill {skill.id}", _skill_block(skill), "", "Outcome pairs (with skill / without skill):"]
        for pair in sorted(pairs, key=lambda p: p.task.task_id):
            lines.append(f"- [{pair.task.task_id}] {pair.task.text}: "
                         f"{pair.factual.reward:g} / {pair.counterfactual.reward:g}")
        lines.append(f"Mean difference: {summary.mean_delta:.4f} over {summary.n_pairs} tasks")
        reply = self._ask("\n".join(lines), Task.diagnosis())

        kind = str(reply.get('verdict', '')).strip().lower()
        if kind not in ('keep', 'rewrite', 'remove'):
            raise MalformedReplyError(self.role.name, f"unknown verdict {kind!r}", raw_payload=str(reply))
        if kind != 'rewrite':
            return Verdict(skill_id=skill.id, kind=kind, evidence_summary=summary)

        fields = _skill_fields(reply.get('rewritten'), self.role.name, str(reply))
        rewritten = make_skill(round_created=round_created, origin='rewrite', embedder=self.embedder, **fields)
        if rewritten.id == skill.id:
            return Verdict(skill_id=skill.id, kind='keep', evidence_summary=summary)
        return Verdict(skill_id=skill.id, kind='rewrite', rewritten=rewritten, evidence_summary=summary)


class RemotePlanner(_RemoteRole, Planner):
    """Full-apply first, then the model's index selections over the pools"""
    role = Role.edit_planner()

    def plan_edits(self, current_bank: SkillBank, pools: EditPools, k: int, round: int = 0) -> List[PlannedBank]:
        if k < 1:
            raise InvalidInputError(f"K must be at least 1, got {k}")
        pools.validate_against(current_bank)
        if pools.is_empty:
            return []

        planned = [apply_edits(current_bank, pools, ('add', 'rewrite', 'remove'), round)]
        if k > 1:
            lines = [f"Requested selections: {k - 1}", "", "Current skills:"]
            lines += [f"- {s.id}: {s.title}" for s in current_bank.skills]
            lines += ["", f"Protected (keep): {', '.join(pools.keep) or 'none'}", "", "Add pool:"]
            lines += [f"{i}. {s.title}: {s.principle}" for i, s in enumerate(pools.add)]
            lines += ["", "Rewrite pool:"]
            lines += [f"{i}. {old} -> {new.title}: {new.when_to_apply}" for i, (old, new) in enumerate(pools.rewrite)]
            lines += ["", "Remove pool:"]
            lines += [f"{i}. {skill_id}" for i, skill_id in enumerate(pools.remove)]
            reply = self._ask("\n".join(lines), Task.edit_planning())
            selections = reply.get('selections')
            if not isinstance(selections, list):
                raise MalformedReplyError(self.role.name, "missing 'selections' list", raw_payload=str(reply))
            for selection in selections:
                planned.append(self._apply_selection(current_bank, pools, selection, round, str(reply)))

        result, seen = [], {current_bank.bank_id}
        for candidate in planned:
            if candidate.bank.bank_id not in seen:
                seen.add(candidate.bank.bank_id)
                result.append(candidate)
        return result[:k]

    def _apply_selection(self, bank: SkillBank, pools: EditPools, selection: Any, round: int, raw: str) -> PlannedBank:
        if not isinstance(selection, dict):
            raise MalformedReplyError(self.role.name, f"selection is not an object: {selection!r}", raw_payload=raw)

        def pick(name: str, pool: tuple) -> tuple:
            indices = selection.get(name, [])
            if not isinstance(indices, list) or not all(isinstance(i, int) and 0 <= i < len(pool) for i in indices):
                raise MalformedReplyError(self.role.name, f"bad {name} indices {indices!r}", raw_payload=raw)
            return tuple(pool[i] for i in sorted(set(indices)))

        sub_pools = EditPools(add=pick('add', pools.add), rewrite=pick('rewrite', pools.rewrite),
                              remove=pick('remove', pools.remove), keep=pools.keep)
        return apply_edits(bank, sub_pools, ('add', 'rewrite', 'remove'), round)


def build_remote_proposers(config: ProposerBackendConfig,
                           embedder: Optional[EmbeddingProvider] = None,
                           seed: Optional[int] = None,
                           processor: Any = None) -> Proposers:
    """Remote proposers sharing one LLMProcessor

    Raises:
        ConfigError: If the auth token variable is unset and no processor is given
    """
    if processor is None:
        load_env()
        api_key = os.getenv(config.api_key_env)
        if not api_key:
            raise ConfigError(f"Remote proposers need an API key in ${config.api_key_env}")
        try:
            processor = LLMProcessor(LLMConfig(
                provider=config.provider,
                model_name=config.model_name,
                api_key=api_key,
                temperature=config.temperature,
                max_tokens=config.max_tokens,
                base_url=config.base_url,
                timeout=config.timeout,
                seed=seed,
            ))
        except ValueError as e:
            raise ConfigError(str(e)) from e
    return Proposers(
        distiller=RemoteDistiller(processor, embedder),
        diagnoser=RemoteDiagnoser(processor, embedder),
        planner=RemotePlanner(processor, embedder),
        mode='remote',
    )
