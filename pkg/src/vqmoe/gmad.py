"""Maximum-differentiation pair search between two scoring models.

Given two score maps over the same videos, find pairs the defender model
rates as near-equal (within eps) while the attacker model separates them
maximally. Sorting by defender score makes qualifying pairs contiguous, so
a two-pointer sweep enumerates them in O(n log n + P) instead of O(n^2).
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class GmadPair:
    video_a: str
    video_b: str
    defender_id: str
    attacker_id: str
    defender_delta: float
    attacker_delta: float

    def to_dict(self) -> dict:
        return {
            "video_a": self.video_a,
            "video_b": self.video_b,
            "defender": self.defender_id,
            "attacker": self.attacker_id,
            "defender_delta": self.defender_delta,
            "attacker_delta": self.attacker_delta,
        }


def gmad_pairs(
    defender_scores: dict,
    attacker_scores: dict,
    eps: float | None = None,
    top_n: int = 1,
    defender_id: str = "defender",
    attacker_id: str = "attacker",
    orientation: str = "standard",
) -> list[GmadPair]:
    """Top pairs by attacker disagreement among defender-equal videos.

    eps defaults to 5% of the defender score range. orientation="swapped"
    exchanges the two models' roles. Ranking is by |attacker delta|
    descending with lexicographic (video_a, video_b) tie-breaks; an empty
    list means no pair qualifies.
    """
    if orientation not in ("standard", "swapped"):
        raise ConfigError(f"unknown orientation {orientation!r}")
    if orientation == "swapped":
        defender_scores, attacker_scores = attacker_scores, defender_scores
        defender_id, attacker_id = attacker_id, defender_id
    if top_n < 1:
        raise ConfigError("top_n must be >= 1")

    d_ids = set(defender_scores)
    a_ids = set(attacker_scores)
    if d_ids != a_ids:
        raise ShapeError("defender and attacker score different video sets")
    if len(d_ids) < 2:
        raise ShapeError("pair search needs at least 2 videos")

    defender = {str(k): float(v) for k, v in defender_scores.items()}
    attacker = {str(k): float(v) for k, v in attacker_scores.items()}

    ids = sorted(defender, key=lambda v: (defender[v], v))
    if eps is None:
        eps = 0.05 * (defender[ids[-1]] - defender[ids[0]])
    if eps < 0:
        raise ConfigError("eps must be >= 0")

    candidates: list[tuple[float, str, str]] = []
    j = 0
    for i in range(len(ids)):
        if j < i + 1:
            j = i + 1
        while j < len(ids) and defender[ids[j]] - defender[ids[i]] <= eps:
            j += 1
        for k in range(i + 1, j):
            a, b = sorted((ids[i], ids[k]))
            candidates.append((abs(attacker[a] - attacker[b]), a, b))

    candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
    out = []
    for delta, a, b in candidates[:top_n]:
        out.append(
            GmadPair(
                video_a=a,
                video_b=b,
                defender_id=defender_id,
                attacker_id=attacker_id,
                defender_delta=abs(defender[a] - defender[b]),
                attacker_delta=delta,
            )
        )
    return out
