import logging
import math
from typing import Dict, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import InvalidInputError
from .objectives import OBJECTIVE_NAMES, ObjectiveProfile

logger = logging.getLogger(__name__)

DEFAULT_EPSILON_TOL = 0.03
REGULARIZERS: Tuple[str, ...] = ('div', 'cov')
# slack on the tie-pool cut so utilities equal up to float noise land on the same side
TIE_SLACK = 1e-12
CONTRIBUTION_DIGITS = 12


class Candidate(BaseModel):
    model_config = ConfigDict(frozen=True)

    bank_ref: str
    profile: ObjectiveProfile
    is_null: bool = False
    bank_size: int = Field(default=0, ge=0)

    def to_record(self) -> Dict:
        return {'bank_ref': self.bank_ref, 'is_null': self.is_null, 'bank_size': self.bank_size,
                **self.profile.to_record()}


class SelectionOutcome(BaseModel):
    """Result of one Pareto-aware selection; contributions are keyed by bank_ref"""
    model_config = ConfigDict(frozen=True)

    winner: Candidate
    front: Tuple[Candidate, ...]
    tie_pool: Tuple[Candidate, ...]
    u_max: float
    contributions: Dict[str, float] = Field(default_factory=dict)
    epsilon_tol: float = DEFAULT_EPSILON_TOL

    @property
    def carried_forward(self) -> bool:
        return self.winner.is_null

    def to_record(self) -> Dict:
        return {
            'winner': self.winner.bank_ref,
            'winner_is_null': self.winner.is_null,
            'front': [c.bank_ref for c in self.front],
            'tie_pool': [c.bank_ref for c in self.tie_pool],
            'u_max': self.u_max,
            'epsilon_tol': self.epsilon_tol,
            'contributions': dict(sorted(self.contributions.items())),
        }


def _enabled(objectives: Sequence[str]) -> Tuple[str, ...]:
    unknown = [name for name in objectives if name not in OBJECTIVE_NAMES]
    if unknown:
        raise InvalidInputError(f"Unknown objectives: {', '.join(unknown)}")
    return tuple(name for name in OBJECTIVE_NAMES if name in objectives)


def dominates(a: ObjectiveProfile, b: ObjectiveProfile, objectives: Sequence[str] = OBJECTIVE_NAMES) -> bool:
    """Maximization dominance over the enabled objectives

    True iff a >= b in every enabled objective and a > b in at least one.
    """
    pairs = [(a.get(name), b.get(name)) for name in _enabled(objectives)]
    return all(x >= y for x, y in pairs) and any(x > y for x, y in pairs)


def pareto_front(candidates: Sequence[Candidate], objectives: Sequence[str] = OBJECTIVE_NAMES) -> List[Candidate]:
    """Candidates dominated by no other candidate, in input order

    Candidates with identical profiles are all retained.
    """
    if not candidates:
        raise InvalidInputError("pareto_front needs at least one candidate")
    names = _enabled(objectives)
    points = np.array([c.profile.values(names) for c in candidates], dtype=np.float64)
    # (geq & gt)[i, j]: candidate i dominates candidate j
    geq = np.all(points[:, None, :] >= points[None, :, :], axis=2)
    gt = np.any(points[:, None, :] > points[None, :, :], axis=2)
    dominated = np.any(geq & gt, axis=0)
    return [c for c, is_dominated in zip(candidates, dominated) if not is_dominated]


def hypervolume_2d(points: Sequence[Tuple[float, float]],
                   reference: Tuple[float, float] = (0.0, 0.0)) -> float:
    """Area of the union of rectangles [ref_x, x] x [ref_y, y] by a descending-x sweep

    Raises:
        InvalidInputError: If a coordinate is non-finite or below the reference
    """
    ref_x, ref_y = reference
    for x, y in points:
        if not (math.isfinite(x) and math.isfinite(y)):
            raise InvalidInputError(f"Non-finite point ({x}, {y})")
        if x < ref_x or y < ref_y:
            raise InvalidInputError(f"Point ({x}, {y}) lies below the reference {reference}")

    areas = []
    y_reached = ref_y
    for x, y in sorted(points, key=lambda p: (-p[0], -p[1])):
        if y > y_reached:
            areas.append((x - ref_x) * (y - y_reached))
            y_reached = y
    return math.fsum(areas)


def _hv_point(candidate: Candidate, regularizers: Sequence[str]) -> Tuple[float, float]:
    # a disabled regularizer collapses to a unit side so it cannot affect contributions
    return (candidate.profile.div if 'div' in regularizers else 1.0,
            candidate.profile.cov if 'cov' in regularizers else 1.0)


def hv_contribution(candidate: Candidate,
                    pool: Sequence[Candidate],
                    regularizers: Sequence[str] = REGULARIZERS) -> float:
    """Hypervolume over (div, cov) lost when the candidate leaves the pool"""
    index = next((i for i, c in enumerate(pool) if c is candidate), None)
    if index is None:
        index = next((i for i, c in enumerate(pool) if c == candidate), None)
    if index is None:
        raise InvalidInputError(f"Candidate {candidate.bank_ref} is not in the pool")
    if not any(name in regularizers for name in REGULARIZERS):
        return 0.0

    points = [_hv_point(c, regularizers) for c in pool]
    rest = points[:index] + points[index + 1:]
    return max(0.0, hypervolume_2d(points) - hypervolume_2d(rest))


def select(candidates: Sequence[Candidate],
           epsilon_tol: float = DEFAULT_EPSILON_TOL,
           objectives: Sequence[str] = OBJECTIVE_NAMES) -> SelectionOutcome:
    """Pareto-aware selection with a front-adaptive utility tolerance

    The front is cut to the tie pool {c : util(c) >= u_max - epsilon_tol}. A single
    member wins outright; otherwise the largest hypervolume contribution over the
    enabled regularizers wins, with ties going to the null candidate, then higher
    div, higher cov, smaller bank and bank_ref ascending.

    Raises:
        InvalidInputError: If candidates is empty or does not hold exactly one null candidate
    """
    if not candidates:
        raise InvalidInputError("select needs at least one candidate")
    n_null = sum(1 for c in candidates if c.is_null)
    if n_null != 1:
        raise InvalidInputError(f"Exactly one null candidate is required, got {n_null}")
    if epsilon_tol < 0:
        raise InvalidInputError(f"epsilon_tol must be non-negative, got {epsilon_tol}")

    names = _enabled(objectives)
    regularizers = tuple(name for name in REGULARIZERS if name in names)

    front = pareto_front(candidates, names)
    u_max = max(c.profile.util for c in front)
    tie_pool = [c for c in front if c.profile.util >= u_max - epsilon_tol - TIE_SLACK]

    contributions = {c.bank_ref: hv_contribution(c, tie_pool, regularizers) for c in tie_pool}

    def tie_break(c: Candidate):
        return (
            -round(contributions[c.bank_ref], CONTRIBUTION_DIGITS),
            not c.is_null,
            -c.profile.div if 'div' in regularizers else 0.0,
            -c.profile.cov if 'cov' in regularizers else 0.0,
            c.bank_size,
            c.bank_ref,
        )

    winner = tie_pool[0] if len(tie_pool) == 1 else min(tie_pool, key=tie_break)
    logger.debug(
        f"Front {len(front)}, tie pool {len(tie_pool)} at u_max={u_max:.4f}; winner {winner.bank_ref}"
        f"{' (null)' if winner.is_null else ''}"
    )
    return SelectionOutcome(
        winner=winner,
        front=tuple(front),
        tie_pool=tuple(tie_pool),
        u_max=u_max,
        contributions=contributions,
        epsilon_tol=epsilon_tol,
    )
