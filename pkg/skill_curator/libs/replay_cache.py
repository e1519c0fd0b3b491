import logging
import threading
from collections import Counter
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import orjson
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import InvalidInputError
from .rollout import Trajectory
from .skill_model import Skill, canonical_bytes
from .utils import dumps_json, sha256_hex, write_bytes_atomic

logger = logging.getLogger(__name__)

KINDS = ('factual', 'loo')


class CacheKey(BaseModel):
    """SHA-256 digest over worker version, task id and rank-ordered canonical skill content

    worker_version rides along unhashed so put() can check entry consistency.
    """
    model_config = ConfigDict(frozen=True)

    digest: str = Field(min_length=64, max_length=64)
    worker_version: str


class CacheEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    trajectory: Trajectory
    worker_version: str
    created_round: int = 0


class RoundCacheStats(BaseModel):
    round: int
    hits: int = 0
    misses: int = 0
    loo_hits: int = 0
    loo_misses: int = 0

    @property
    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0

    @property
    def loo_hit_rate(self) -> float:
        total = self.loo_hits + self.loo_misses
        return self.loo_hits / total if total else 0.0


class CacheStats(BaseModel):
    hits: int = 0
    misses: int = 0
    loo_hits: int = 0
    loo_misses: int = 0
    stored: int = 0
    rounds: List[RoundCacheStats] = Field(default_factory=list)

    @property
    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0

    def to_record(self) -> Dict:
        return {
            'hits': self.hits,
            'misses': self.misses,
            'loo_hits': self.loo_hits,
            'loo_misses': self.loo_misses,
            'stored': self.stored,
            'hit_rate': self.hit_rate,
            'rounds': [
                {
                    'round': r.round,
                    'hits': r.hits,
                    'misses': r.misses,
                    'hit_rate': r.hit_rate,
                    'loo_hit_rate': r.loo_hit_rate,
                }
                for r in self.rounds
            ],
        }


def make_key(worker_version: str, task_id: str, retrieved_skills: Sequence[Skill]) -> CacheKey:
    """Content address of a rollout

    Any change to the worker version, the task, a skill's canonical content or the
    skill rank order changes the digest. Each component is length-prefixed.
    """
    parts = [worker_version.encode('utf-8'), task_id.encode('utf-8')]
    parts.extend(canonical_bytes(skill) for skill in retrieved_skills)
    return CacheKey(digest=sha256_hex(*parts), worker_version=worker_version)


class ReplayCache:
    """Content-addressed rollout store shared across evidence gathering and evaluation

    Entries live in memory and, when cache_dir is set, one JSON file per entry named
    by its hex digest. Entries written under another worker version are skipped on
    read, never deleted implicitly; purge_stale removes them. Safe for concurrent use.
    """

    def __init__(self, cache_dir: Optional[Union[str, Path]] = None, enabled: bool = True):
        self.enabled = enabled
        self.cache_dir = Path(cache_dir).expanduser() if cache_dir else None
        if self.cache_dir and self.enabled:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
        self._entries: Dict[str, CacheEntry] = {}
        self._lock = threading.Lock()
        self._stats = CacheStats()
        self._round_stats: Dict[int, RoundCacheStats] = {}
        self.current_round = 0

    def _entry_path(self, digest: str) -> Path:
        return self.cache_dir / f"{digest}.json"

    def begin_round(self, round: int) -> None:
        with self._lock:
            self.current_round = round
            self._round_stats.setdefault(round, RoundCacheStats(round=round))

    def _record(self, hit: bool, kind: str) -> None:
        round_stats = self._round_stats.setdefault(self.current_round,
                                                   RoundCacheStats(round=self.current_round))
        for stats in (self._stats, round_stats):
            if hit:
                stats.hits += 1
            else:
                stats.misses += 1
            if kind == 'loo':
                if hit:
                    stats.loo_hits += 1
                else:
                    stats.loo_misses += 1

    def _load_from_disk(self, digest: str) -> Optional[CacheEntry]:
        if not self.cache_dir:
            return None
        path = self._entry_path(digest)
        if not path.exists():
            return None
        try:
            return CacheEntry.model_validate(orjson.loads(path.read_bytes()))
        except (orjson.JSONDecodeError, ValidationError, OSError) as e:
            logger.warning(f"Ignoring corrupted cache entry {path.name}: {e}")
            return None

    def get(self, key: CacheKey, worker_version: Optional[str] = None, kind: str = 'factual') -> Optional[CacheEntry]:
        """Entry for key, or None when absent, corrupted or written by another worker version"""
        current_version = worker_version or key.worker_version
        with self._lock:
            if not self.enabled:
                self._record(False, kind)
                return None
            entry = self._entries.get(key.digest)
            if entry is None:
                entry = self._load_from_disk(key.digest)
                if entry is not None:
                    self._entries[key.digest] = entry
            if entry is not None and entry.worker_version != current_version:
                logger.debug(f"Skipping stale cache entry {key.digest[:12]} from {entry.worker_version}")
                entry = None
            self._record(entry is not None, kind)
            return entry

    def put(self, key: CacheKey, entry: CacheEntry) -> None:
        """Store an entry; re-inserting an existing key is a no-op

        Raises:
            InvalidInputError: If the entry's worker version differs from the key's
        """
        if entry.worker_version != key.worker_version:
            raise InvalidInputError(
                f"Cache entry version {entry.worker_version} does not match key version {key.worker_version}"
            )
        if not self.enabled:
            return
        with self._lock:
            existing = self._entries.get(key.digest)
            if existing is not None and existing.worker_version == entry.worker_version:
                return
            self._entries[key.digest] = entry
            self._stats.stored += 1
            if self.cache_dir:
                write_bytes_atomic(self._entry_path(key.digest), dumps_json(entry.model_dump(mode='json')))

    def fetch_or_run(self,
                     worker_version: str,
                     task_id: str,
                     retrieved_skills: Sequence[Skill],
                     run: Callable[[], Trajectory],
                     kind: str = 'factual') -> Trajectory:
        """Serve a rollout from the cache, or run it and store the result"""
        if kind not in KINDS:
            raise InvalidInputError(f"Unknown rollout kind: {kind}")
        key = make_key(worker_version, task_id, retrieved_skills)
        entry = self.get(key, worker_version, kind=kind)
        if entry is not None:
            return entry.trajectory
        trajectory = run()
        self.put(key, CacheEntry(trajectory=trajectory, worker_version=worker_version,
                                 created_round=self.current_round))
        return trajectory

    @property
    def stats(self) -> CacheStats:
        with self._lock:
            snapshot = self._stats.model_copy(deep=True)
            snapshot.rounds = [self._round_stats[r].model_copy() for r in sorted(self._round_stats)]
            return snapshot

    def round_stats(self, round: int) -> RoundCacheStats:
        with self._lock:
            return self._round_stats.get(round, RoundCacheStats(round=round)).model_copy()

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def _disk_entries(self):
        if not self.cache_dir or not self.cache_dir.exists():
            return
        for path in sorted(self.cache_dir.glob('*.json')):
            try:
                yield path, CacheEntry.model_validate(orjson.loads(path.read_bytes()))
            except (orjson.JSONDecodeError, ValidationError, OSError) as e:
                logger.warning(f"Ignoring corrupted cache entry {path.name}: {e}")
                yield path, None

    def describe(self, current_version: Optional[str] = None) -> Dict:
        """Summary of persisted and in-memory entries grouped by worker version"""
        by_version = Counter()
        corrupted = 0
        with self._lock:
            seen = set()
            for path, entry in self._disk_entries() or []:
                seen.add(path.stem)
                if entry is None:
                    corrupted += 1
                else:
                    by_version[entry.worker_version] += 1
            for digest, entry in self._entries.items():
                if digest not in seen:
                    by_version[entry.worker_version] += 1
        summary = {
            'cache_dir': str(self.cache_dir) if self.cache_dir else None,
            'entries': sum(by_version.values()),
            'corrupted': corrupted,
            'by_version': dict(sorted(by_version.items())),
        }
        if current_version is not None:
            summary['stale'] = sum(n for version, n in by_version.items() if version != current_version)
        return summary

    def purge_stale(self, current_version: str) -> int:
        """Delete entries written by other worker versions, plus corrupted files"""
        removed = 0
        with self._lock:
            for path, entry in list(self._disk_entries() or []):
                if entry is None or entry.worker_version != current_version:
                    path.unlink(missing_ok=True)
                    self._entries.pop(path.stem, None)
                    removed += 1
            for digest in [d for d, e in self._entries.items() if e.worker_version != current_version]:
                del self._entries[digest]
                removed += 1
        logger.info(f"Purged {removed} stale cache entries (current version {current_version})")
        return removed
