import logging
import math
import sys

import numpy as np
import pytest

from ..libs.errors import InvalidInputError
from ..libs.objectives import (EMPTY_PROFILE, ObjectiveProfile, UtilityEvidence, bank_utility, coverage, delta,
                               diversity, evaluate_bank, evaluate_profile, profile_report, skill_utility)
from ..libs.replay_cache import ReplayCache
from ..libs.retrieval import HybridRetriever, RetrievalConfig, RetrievalEntry, RetrievalResult
from ..libs.rollout import SyntheticWorker, generate_world, rollout
from ..libs.skill_model import Provenance, Skill, SkillBank, make_skill
from .conftest import annotated_skill, tag_skill

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    handlers=[
        logging.StreamHandler(sys.stdout)
    ]
)

logger = logging.getLogger(__name__)


def vector_skill(skill_id, vector):
    vector = np.asarray(vector, dtype=float)
    vector = vector / np.linalg.norm(vector)
    return Skill(id=skill_id, title=skill_id, principle="p", when_to_apply="w",
                 embedding=tuple(float(x) for x in vector), provenance=Provenance(round_created=0, origin='add'))


def cofactor_det(matrix):
    """Laplace expansion along the first row"""
    n = len(matrix)
    if n == 1:
        return matrix[0][0]
    total = 0.0
    for j in range(n):
        minor = [row[:j] + row[j + 1:] for row in matrix[1:]]
        total += (-1) ** j * matrix[0][j] * cofactor_det(minor)
    return total


@pytest.mark.parametrize("r_with, r_without, expected", [
    (1.0, 0.0, 1.0),
    (0.3, 0.3, 0.0),
    (0.4, 0.7, -0.3),
])
def test_delta(r_with, r_without, expected):
    assert delta(r_with, r_without) == pytest.approx(expected, abs=1e-12)


def test_delta_rejects_out_of_range_rewards():
    with pytest.raises(InvalidInputError):
        delta(1.2, 0.0)
    with pytest.raises(InvalidInputError):
        delta(0.5, -0.1)


def test_skill_utility():
    assert skill_utility([(1, 0), (1, 0), (1, 0)]) == 1.0
    assert skill_utility([(1, 0), (0, 1)]) == 0.0
    assert skill_utility([(1, 0), (0, 0), (1, 1)]) == pytest.approx(1 / 3, abs=1e-12)
    assert skill_utility([]) is None


def test_bank_utility_single_skill():
    evidence = UtilityEvidence(pairs={'a': ((1, 0), (1, 0), (0, 0), (1, 1))}, n_retrieving=4)
    assert bank_utility(evidence) == pytest.approx(0.5, abs=1e-12)


def test_bank_utility_takes_co_retrieval_weights_literally():
    evidence = UtilityEvidence(pairs={
        'a': ((1, 0), (0, 0), (1, 1)),
        'b': ((1, 0), (0, 0)),
    }, n_retrieving=4)
    assert bank_utility(evidence) == pytest.approx(0.5, abs=1e-12)


def test_bank_utility_without_retrieval():
    assert bank_utility(UtilityEvidence()) == 0.0


def test_utility_evidence_checks_counts_and_rewards():
    with pytest.raises(ValueError):
        UtilityEvidence(pairs={'a': ((1, 0), (1, 0))}, n_retrieving=1)
    with pytest.raises(ValueError):
        UtilityEvidence(pairs={'a': ((2, 0),)}, n_retrieving=1)


def test_diversity_examples():
    orthogonal = SkillBank.from_skills([vector_skill("a", [1, 0]), vector_skill("b", [0, 1])])
    assert diversity(orthogonal) == 1.0

    identical = SkillBank.from_skills([vector_skill("a", [1, 0]), vector_skill("b", [1, 0])])
    expected = math.sqrt((1 + 1e-6) ** 2 - 1)
    print(f"diversity of identical pair: {diversity(identical):.6e}")
    assert diversity(identical) == pytest.approx(expected, rel=1e-6)
    assert diversity(identical) == pytest.approx(1.4142e-3, rel=1e-4)

    assert diversity(SkillBank.from_skills([vector_skill("a", [0.6, 0.8])])) == 1.0
    assert diversity(SkillBank.empty()) == 0.0


def test_diversity_matches_cofactor_determinant():
    rng = np.random.default_rng(3)
    for _ in range(50):
        size = int(rng.integers(1, 5))
        skills = [vector_skill(f"s{i}", rng.normal(size=5)) for i in range(size)]
        bank = SkillBank.from_skills(skills)
        vectors = [list(skill.embedding) for skill in skills]
        gram = [[sum(a * b for a, b in zip(u, v)) + (1e-6 if i == j else 0.0)
                 for j, v in enumerate(vectors)] for i, u in enumerate(vectors)]
        det = cofactor_det(gram)
        assert diversity(bank) == pytest.approx(min(1.0, det ** (1 / size)), rel=1e-9, abs=1e-12)


def test_diversity_duplicate_never_increases_and_ignores_order():
    rng = np.random.default_rng(5)
    for _ in range(30):
        skills = [vector_skill(f"s{i}", rng.normal(size=6)) for i in range(int(rng.integers(1, 5)))]
        bank = SkillBank.from_skills(skills)
        duplicate = vector_skill("dup", skills[0].embedding)
        assert diversity(SkillBank.from_skills(skills + [duplicate])) <= diversity(bank)
        shuffled = SkillBank.from_skills([skills[i] for i in rng.permutation(len(skills))])
        assert diversity(shuffled) == pytest.approx(diversity(bank), rel=1e-12)


def test_diversity_rejects_non_unit_embedding():
    broken = Skill.model_construct(id="x", title="t", principle="p", when_to_apply="w",
                                   embedding=(0.5, 0.5), provenance=Provenance(round_created=0, origin='add'))
    with pytest.raises(InvalidInputError):
        diversity(SkillBank.from_skills([broken]))


def retrieval_of(query, skill_ids):
    return RetrievalResult(query_text=query, entries=tuple(
        RetrievalEntry(skill_id=skill_id, combined_score=0.5, bm25_norm=0.0, cosine=0.5, rank=rank)
        for rank, skill_id in enumerate(skill_ids, 1)
    ))


def test_coverage_examples():
    skills = [make_skill(f"skill {i}", "principle", "when") for i in range(4)]
    bank = SkillBank.from_skills(skills)
    ids = bank.skill_ids

    results = [retrieval_of("q1", ids[:3]), retrieval_of("q2", ids[:3]), retrieval_of("q3", []),
               retrieval_of("q4", [])]
    assert coverage(results, bank, k_top=3) == pytest.approx(0.375, abs=1e-12)

    full = SkillBank.from_skills(skills[:3])
    assert coverage([retrieval_of("q", ids[:3])], full, k_top=3) == 1.0
    assert coverage([retrieval_of("q", [])], bank, k_top=3) == 0.0
    assert coverage(results, SkillBank.empty(), k_top=3) == 0.0


def test_evaluate_profile_single_helpful_skill(heat_cool_world, heat_cool_worker, retriever, keyword_embedder):
    """heat tasks retrieve the skill: deltas 1, 1, 0 on three retrieving tasks"""
    bank = SkillBank.from_skills([tag_skill('heat', keyword_embedder)])
    query = heat_cool_world.split('query')
    profile = evaluate_profile(bank, query, heat_cool_worker, retriever, ReplayCache())
    print(f"profile: {profile}")
    assert profile.util == pytest.approx(2 / 3, abs=1e-12)
    assert profile.div == 1.0
    assert profile.cov == pytest.approx(3 / 15, abs=1e-12)


def test_evaluate_profile_empty_bank(heat_cool_world, heat_cool_worker, retriever):
    profile = evaluate_profile(SkillBank.empty(), heat_cool_world.split('query'), heat_cool_worker, retriever)
    assert profile == EMPTY_PROFILE == ObjectiveProfile(util=0.0, div=0.0, cov=0.0)


def test_evaluate_profile_is_deterministic(heat_cool_world, heat_cool_worker, retriever, keyword_embedder):
    bank = SkillBank.from_skills([tag_skill('heat', keyword_embedder), tag_skill('cool', keyword_embedder)])
    query = heat_cool_world.split('query')
    first = evaluate_bank(bank, query, heat_cool_worker, retriever, ReplayCache(), max_workers=4)
    second = evaluate_bank(bank, query, heat_cool_worker, retriever, None, max_workers=1)
    assert first.profile == second.profile
    assert first.evidence == second.evidence


def test_evaluate_bank_argument_checks(heat_cool_world, heat_cool_worker, retriever):
    with pytest.raises(InvalidInputError):
        evaluate_bank(SkillBank.empty(), [], heat_cool_worker, retriever)
    with pytest.raises(InvalidInputError):
        evaluate_bank(SkillBank.empty(), heat_cool_world.split('query'), heat_cool_worker, retriever,
                      enabled_objectives=('div', 'cov'))


def brute_force_profile(bank, tasks, worker, retriever):
    """Uncached evaluation with explicit loops over tasks and skills"""
    pairs = {}
    retrieving = 0
    results = []
    for task in sorted(tasks, key=lambda t: t.task_id):
        result, skills = retriever.retrieve_skills(task.text, bank)
        results.append(result)
        if not skills:
            continue
        retrieving += 1
        r_with = rollout(worker, task, skills).reward
        for skill in skills:
            r_without = rollout(worker, task, [s for s in skills if s.id != skill.id]).reward
            pairs.setdefault(skill.id, []).append(r_with - r_without)

    util = 0.0
    if retrieving:
        util = sum(len(deltas) / retrieving * (sum(deltas) / len(deltas)) for deltas in pairs.values())

    vectors = [list(skill.embedding) for skill in bank.skills]
    gram = [[sum(a * b for a, b in zip(u, v)) + (1e-6 if i == j else 0.0)
             for j, v in enumerate(vectors)] for i, u in enumerate(vectors)]
    div = min(1.0, float(np.linalg.det(np.array(gram))) ** (1 / bank.size)) if bank.size else 0.0

    k_top = retriever.config.k_top
    density = sum(r.size for r in results) / (len(results) * k_top)
    used = {skill_id for r in results for skill_id in r.skill_ids}
    cov = density * sum(1 for s in bank.skills if s.id in used) / bank.size if bank.size else 0.0
    return util, div, cov


def test_evaluate_profile_matches_brute_force_on_random_worlds(keyword_embedder):
    rng = np.random.default_rng(17)
    retriever = HybridRetriever(RetrievalConfig(), keyword_embedder)
    for trial in range(50):
        world = generate_world(int(rng.integers(1, 5)), int(rng.integers(1, 7)), float(rng.uniform(0, 1)),
                               seed=trial)
        worker = SyntheticWorker(world)
        skills = []
        for i in range(int(rng.integers(1, 6))):
            tag = world.tags[int(rng.integers(len(world.tags)))]
            helpful = [t for t in world.tags if rng.uniform() < 0.5]
            harmful = [t for t in world.tags if rng.uniform() < 0.2]
            skills.append(annotated_skill(f"Skill {trial}-{i}", tag, helpful, harmful, keyword_embedder))
        bank = SkillBank.from_skills(skills)
        query = world.split('query')

        profile = evaluate_profile(bank, query, worker, retriever, ReplayCache(), max_workers=3)
        util, div, cov = brute_force_profile(bank, query, worker, retriever)
        assert profile.util == pytest.approx(util, abs=1e-9)
        assert profile.div == pytest.approx(div, rel=1e-6, abs=1e-9)
        assert profile.cov == pytest.approx(cov, abs=1e-12)


def test_profile_report(heat_cool_world, heat_cool_worker, retriever, keyword_embedder):
    heat, cool = tag_skill('heat', keyword_embedder), tag_skill('cool', keyword_embedder)
    bank = SkillBank.from_skills([heat, cool])
    evaluation = evaluate_bank(bank, heat_cool_world.split('query'), heat_cool_worker, retriever)
    report = profile_report(evaluation, bank)
    assert list(report) == ['bank_id', 'util', 'div', 'cov', 'n_query_tasks', 'N_R', 'per_skill']
    assert report['bank_id'] == bank.bank_id
    assert report['n_query_tasks'] == 5
    assert report['N_R'] == 5
    per_skill = {row['skill_id']: row for row in report['per_skill']}
    assert per_skill[heat.id]['n_retrieved'] == 3
    assert per_skill[heat.id]['mean_delta'] == pytest.approx(2 / 3, abs=1e-12)
    assert per_skill[cool.id]['n_retrieved'] == 2
    assert per_skill[cool.id]['mean_delta'] == 1.0
