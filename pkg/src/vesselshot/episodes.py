"""Episode construction (C-way K-shot) and subject-level splits / folds.

Two class framings are supported:
  * vessel-as-class: a single semantic class; any subject's patches are
    eligible for support and query;
  * subject-as-class: each subject is its own class and its patches are
    the class members; queries carry the class index of their subject.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .patching import Patch


class EpisodeError(Exception):
    pass


class ClassFraming(enum.Enum):
    VESSEL_AS_CLASS = "vessel"
    SUBJECT_AS_CLASS = "subject"


@dataclass(frozen=True)
class EpisodeConfig:
    c_ways: int = 1
    k_shots: int = 5
    n_queries: int = 1
    framing: ClassFraming = ClassFraming.VESSEL_AS_CLASS
    seed: int = 0

    def __post_init__(self):
        if self.c_ways < 1 or self.k_shots < 1 or self.n_queries < 1:
            raise EpisodeError("c_ways, k_shots, n_queries must all be >= 1")
        if self.framing is ClassFraming.VESSEL_AS_CLASS and self.c_ways != 1:
            raise EpisodeError("vessel-as-class framing is single-class (c_ways=1)")


@dataclass(frozen=True)
class Episode:
    """Support pairs grouped by class plus query pairs with class labels.

    Class indices are episode-local: 1..C for foreground classes, 0 is
    background. support[c] holds the K patches for foreground class c+1.
    """

    support: tuple[tuple[Patch, ...], ...]
    query: tuple[Patch, ...]
    query_class: tuple[int, ...]

    @property
    def c_ways(self) -> int:
        return len(self.support)


@dataclass
class PatchDataset:
    """Patches grouped by subject; the pool episodes are drawn from."""

    by_subject: dict[str, list[Patch]]

    @property
    def subjects(self) -> list[str]:
        return sorted(self.by_subject)

    def all_patches(self) -> list[Patch]:
        return [p for s in self.subjects for p in self.by_subject[s]]

    def __len__(self) -> int:
        return sum(len(v) for v in self.by_subject.values())


def _draw(pool: list[Patch], n: int, rng: np.random.Generator) -> list[Patch]:
    if len(pool) < n:
        raise EpisodeError(f"pool of {len(pool)} patches cannot supply {n}")
    idx = rng.choice(len(pool), size=n, replace=False)
    return [pool[i] for i in idx]


def build_episode(
    dataset: PatchDataset, cfg: EpisodeConfig, rng: np.random.Generator
) -> Episode:
    """Draw a C-way K-shot episode; support and query are disjoint by identity."""
    if cfg.framing is ClassFraming.VESSEL_AS_CLASS:
        pool = dataset.all_patches()
        drawn = _draw(pool, cfg.k_shots + cfg.n_queries, rng)
        support = (tuple(drawn[: cfg.k_shots]),)
        query = tuple(drawn[cfg.k_shots :])
        query_class = tuple(1 for _ in query)
    else:
        subjects = dataset.subjects
        if cfg.c_ways > len(subjects):
            raise EpisodeError(
                f"{cfg.c_ways}-way episode needs >= {cfg.c_ways} subjects, have {len(subjects)}"
            )
        chosen = [subjects[i] for i in rng.choice(len(subjects), size=cfg.c_ways, replace=False)]
        support = []
        query: list[Patch] = []
        query_class: list[int] = []
        # queries are spread over the chosen classes, one class per query slot
        q_classes = [1 + int(rng.integers(0, cfg.c_ways)) for _ in range(cfg.n_queries)]
        for ci, subj in enumerate(chosen, start=1):
            n_q = q_classes.count(ci)
            drawn = _draw(dataset.by_subject[subj], cfg.k_shots + n_q, rng)
            support.append(tuple(drawn[: cfg.k_shots]))
            for p in drawn[cfg.k_shots :]:
                query.append(p)
                query_class.append(ci)
        support = tuple(support)
        query, query_class = tuple(query), tuple(query_class)

    ids = [p.identity for cls in support for p in cls] + [p.identity for p in query]
    if len(set(ids)) != len(ids):
        raise EpisodeError("support and query sets share a patch identity")
    return Episode(support=support, query=query, query_class=query_class)


def split_subjects(
    subjects: list[str], fractions: tuple[float, float, float], seed: int
) -> tuple[list[str], list[str], list[str]]:
    """Partition subjects into train/val/test with largest-remainder rounding."""
    if len(subjects) < 3:
        raise EpisodeError(f"need >= 3 subjects to split, have {len(subjects)}")
    if abs(sum(fractions) - 1.0) > 1e-6:
        raise EpisodeError(f"fractions must sum to 1, got {fractions}")
    n = len(subjects)
    exact = [f * n for f in fractions]
    sizes = [int(np.floor(e)) for e in exact]
    remainders = [e - s for e, s in zip(exact, sizes)]
    for _ in range(n - sum(sizes)):
        i = int(np.argmax(remainders))
        sizes[i] += 1
        remainders[i] = -1.0
    order = list(np.random.default_rng(seed).permutation(sorted(subjects)))
    train = sorted(order[: sizes[0]])
    val = sorted(order[sizes[0] : sizes[0] + sizes[1]])
    test = sorted(order[sizes[0] + sizes[1] :])
    return train, val, test


def make_folds(
    subjects: list[str], k: int, seed: int
) -> list[tuple[list[str], list[str]]]:
    """K near-equal cross-validation folds as (train_subjects, test_subjects)."""
    if k < 2:
        raise EpisodeError("need k >= 2 folds")
    if k > len(subjects):
        raise EpisodeError(f"cannot make {k} folds from {len(subjects)} subjects")
    order = list(np.random.default_rng(seed).permutation(sorted(subjects)))
    n, rem = divmod(len(order), k)
    folds = []
    start = 0
    for i in range(k):
        size = n + (1 if i < rem else 0)
        test = sorted(order[start : start + size])
        train = sorted(set(order) - set(test))
        folds.append((train, test))
        start += size
    return folds
