import logging
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from ..libs.errors import InvalidInputError
from ..libs.objectives import evaluate_bank
from ..libs.replay_cache import CacheEntry, ReplayCache, make_key
from ..libs.rollout import SyntheticWorker, Trajectory
from ..libs.skill_model import SkillBank, make_skill
from .conftest import tag_skill

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    handlers=[
        logging.StreamHandler(sys.stdout)
    ]
)

logger = logging.getLogger(__name__)


@pytest.fixture
def skills():
    return [
        make_skill("Heat first", "Use the microwave.", "When heating."),
        make_skill("Cool first", "Use the fridge.", "When cooling."),
        make_skill("Clean first", "Use the sink.", "When cleaning."),
    ]


def entry_for(version, task_id="t1", reward=1.0, retrieved=()):
    trajectory = Trajectory(task_id=task_id, retrieved=tuple(retrieved), reward=reward, success=reward >= 1.0,
                            steps=1)
    return CacheEntry(trajectory=trajectory, worker_version=version, created_round=1)


def test_make_key_is_deterministic(skills):
    assert make_key("v1", "t1", skills) == make_key("v1", "t1", skills)
    assert len(make_key("v1", "t1", skills).digest) == 64


def test_make_key_sees_every_component(skills):
    base = make_key("v1", "t1", skills)
    assert make_key("v2", "t1", skills) != base
    assert make_key("v1", "t2", skills) != base
    assert make_key("v1", "t1", [skills[1], skills[0], skills[2]]) != base
    assert make_key("v1", "t1", skills[:2]) != base

    edited = make_skill("Heat first", "Use the microwave!", "When heating.")
    assert make_key("v1", "t1", [edited] + skills[1:]) != base


def test_make_key_component_boundaries_are_unambiguous():
    assert make_key("ab", "c", []).digest != make_key("a", "bc", []).digest


def test_make_key_ignores_embedding_and_provenance(skills):
    relabeled = skills[0].model_copy(update={'provenance': skills[0].provenance.model_copy(update={'round_created': 9})})
    assert make_key("v1", "t1", [relabeled]) == make_key("v1", "t1", [skills[0]])


def test_make_key_distinct_on_many_tuples(skills):
    rng = np.random.default_rng(2)
    digests = set()
    for i in range(10_000):
        order = [skills[j] for j in rng.permutation(3)[:int(rng.integers(0, 4))]]
        digests.add(make_key(f"worker-{i % 3}", f"task-{i // 3}", order).digest)
    assert len(digests) == 10_000


def test_get_put_round_trip(skills):
    cache = ReplayCache()
    key = make_key("v1", "t1", skills)
    assert cache.get(key) is None

    entry = entry_for("v1", retrieved=[s.id for s in skills])
    cache.put(key, entry)
    assert cache.get(key) == entry
    assert cache.stats.hits == 1
    assert cache.stats.misses == 1
    assert cache.stats.hit_rate == 0.5


def test_put_is_idempotent(skills):
    cache = ReplayCache()
    key = make_key("v1", "t1", skills)
    cache.put(key, entry_for("v1"))
    cache.put(key, entry_for("v1"))
    assert cache.stats.stored == 1
    assert len(cache) == 1


def test_put_rejects_version_mismatch(skills):
    cache = ReplayCache()
    with pytest.raises(InvalidInputError):
        cache.put(make_key("v1", "t1", skills), entry_for("v2"))


def test_stale_version_behaves_as_absent(skills):
    cache = ReplayCache()
    key = make_key("v1", "t1", skills)
    cache.put(key, entry_for("v1"))
    assert cache.get(key, worker_version="v2") is None
    assert cache.get(key, worker_version="v1") is not None


def test_worker_change_invalidates_entries(heat_cool_world, keyword_embedder):
    cache = ReplayCache()
    strict = SyntheticWorker(heat_cool_world, success_threshold=1.0)
    relaxed = SyntheticWorker(heat_cool_world, success_threshold=0.5)
    task = heat_cool_world.task("query-heat-0")
    skill = tag_skill('heat', keyword_embedder)

    run = lambda: Trajectory(task_id=task.task_id, retrieved=(skill.id,), reward=1.0, success=True)
    cache.fetch_or_run(strict.version_tag, task.task_id, [skill], run)
    cache.fetch_or_run(relaxed.version_tag, task.task_id, [skill], run)
    assert cache.stats.misses == 2
    assert cache.stats.hits == 0


def test_concurrent_puts_store_one_entry(tmp_path, skills):
    cache = ReplayCache(tmp_path / "cache")
    key = make_key("v1", "t1", skills)

    with ThreadPoolExecutor(max_workers=8) as executor:
        list(executor.map(lambda _: cache.put(key, entry_for("v1")), range(100)))

    assert len(cache) == 1
    assert cache.stats.stored == 1
    assert len(list((tmp_path / "cache").glob("*.json"))) == 1
    assert cache.get(key) == entry_for("v1")


def test_entries_persist_across_instances(tmp_path, skills):
    key = make_key("v1", "t1", skills)
    ReplayCache(tmp_path).put(key, entry_for("v1", reward=0.0))

    reopened = ReplayCache(tmp_path)
    entry = reopened.get(key)
    assert entry is not None
    assert entry.trajectory.reward == 0.0
    assert (tmp_path / f"{key.digest}.json").exists()


def test_corrupted_entry_is_absent_and_logged(tmp_path, skills, caplog):
    key = make_key("v1", "t1", skills)
    (tmp_path / f"{key.digest}.json").write_text("{broken")
    cache = ReplayCache(tmp_path)
    with caplog.at_level(logging.WARNING):
        assert cache.get(key) is None
    assert "corrupted cache entry" in caplog.text


def test_disabled_cache_always_misses(skills):
    cache = ReplayCache(enabled=False)
    key = make_key("v1", "t1", skills)
    cache.put(key, entry_for("v1"))
    assert cache.get(key) is None
    assert len(cache) == 0
    assert cache.stats.misses == 1


def test_fetch_or_run_rejects_unknown_kind(skills):
    with pytest.raises(InvalidInputError):
        ReplayCache().fetch_or_run("v1", "t1", skills, lambda: entry_for("v1").trajectory, kind="other")


def test_describe_and_purge_stale(tmp_path, skills):
    writer = ReplayCache(tmp_path)
    writer.put(make_key("v1", "t1", skills), entry_for("v1"))
    writer.put(make_key("v2", "t1", skills), entry_for("v2"))
    writer.put(make_key("v2", "t2", skills), entry_for("v2", task_id="t2"))
    (tmp_path / f"{'0' * 64}.json").write_text("not json")

    cache = ReplayCache(tmp_path)
    summary = cache.describe(current_version="v2")
    print(f"cache summary: {summary}")
    assert summary['entries'] == 3
    assert summary['corrupted'] == 1
    assert summary['by_version'] == {"v1": 1, "v2": 2}
    assert summary['stale'] == 1

    assert cache.purge_stale("v2") == 2
    assert ReplayCache(tmp_path).describe(current_version="v2") == {
        'cache_dir': str(tmp_path), 'entries': 2, 'corrupted': 0, 'by_version': {"v2": 2}, 'stale': 0
    }


def test_round_stats(skills):
    cache = ReplayCache()
    run = lambda: entry_for("v1").trajectory
    cache.begin_round(1)
    cache.fetch_or_run("v1", "t1", skills, run)
    cache.fetch_or_run("v1", "t1", skills[:1], run, kind='loo')
    cache.begin_round(2)
    cache.fetch_or_run("v1", "t1", skills, run)
    cache.fetch_or_run("v1", "t1", skills[:1], run, kind='loo')

    first, second = cache.round_stats(1), cache.round_stats(2)
    assert (first.hits, first.misses, first.loo_misses) == (0, 2, 1)
    assert (second.hits, second.misses, second.loo_hits) == (2, 0, 1)
    assert second.hit_rate == second.loo_hit_rate == 1.0
    assert [r['round'] for r in cache.stats.to_record()['rounds']] == [1, 2]


def test_cache_is_transparent(heat_cool_world, heat_cool_worker, retriever, keyword_embedder):
    bank = SkillBank.from_skills([tag_skill(tag, keyword_embedder) for tag in ('heat', 'cool', 'clean')])
    query = heat_cool_world.split('query')
    uncached = evaluate_bank(bank, query, heat_cool_worker, retriever, None)

    cache = ReplayCache()
    cold = evaluate_bank(bank, query, heat_cool_worker, retriever, cache)
    calls = heat_cool_worker.calls
    warm = evaluate_bank(bank, query, heat_cool_worker, retriever, cache)
    assert uncached == cold == warm
    assert heat_cool_worker.calls == calls


def test_low_churn_round_reuses_loo_replays(heat_cool_world, heat_cool_worker, retriever, keyword_embedder):
    """A bank sharing 80% of its skills with the previous one replays mostly from cache"""
    shared = [tag_skill(tag, keyword_embedder) for tag in ('heat', 'cool', 'clean', 'slice')]
    before = SkillBank.from_skills(shared + [tag_skill('examine', keyword_embedder)])
    after = SkillBank.from_skills(shared + [tag_skill('open', keyword_embedder)])
    query = heat_cool_world.split('query')

    cache = ReplayCache()
    cache.begin_round(1)
    evaluate_bank(before, query, heat_cool_worker, retriever, cache)
    cache.begin_round(2)
    evaluate_bank(after, query, heat_cool_worker, retriever, cache)
    stats = cache.round_stats(2)
    print(f"round 2 LOO hit rate {stats.loo_hit_rate:.2f}")
    assert stats.loo_hits + stats.loo_misses > 0
    assert stats.loo_hit_rate >= 0.5
