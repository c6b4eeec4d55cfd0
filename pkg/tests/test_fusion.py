"""Round-robin fusion against an independent reference implementation."""

from __future__ import annotations

import random

from evdlab.pipelines import fuse


def fuse_oracle(role_lists, b_max):
    """Reference fusion: returns (picked doc_ids, per-list consumed counts)."""
    consumed = [0] * len(role_lists)
    picked: list[str] = []
    seen: set[str] = set()
    rank = 0
    while len(picked) < b_max:
        any_left = False
        for li, (_role, ranked) in enumerate(role_lists):
            if rank < len(ranked):
                any_left = True
                consumed[li] = rank + 1
                doc_id = ranked[rank][0]
                if doc_id not in seen:
                    seen.add(doc_id)
                    picked.append(doc_id)
                if len(picked) >= b_max:
                    return picked, consumed
        if not any_left:
            break
        rank += 1
    return picked, consumed


def as_lists(*id_lists):
    roles = ["SUPPORT", "DISTINCTION", "KEY_FEATURES"]
    return [
        (roles[i % 3], [(d, float(10 - j)) for j, d in enumerate(ids)])
        for i, ids in enumerate(id_lists)
    ]


class TestFuseExamples:
    def test_worked_three_list_example(self):
        lists = as_lists(list("abcde"), list("bfghi"), list("ajklm"))
        result = fuse(lists, 15)
        assert result.doc_ids() == list("abfjcgkdhleim")
        assert result.realized_size == 13

    def test_single_list_identity(self):
        ids = [f"d{i}" for i in range(15)]
        result = fuse(as_lists(ids), 15)
        assert result.doc_ids() == ids

    def test_identical_lists_collapse(self):
        ids = [f"d{i}" for i in range(5)]
        result = fuse(as_lists(ids, ids, ids), 15)
        assert result.doc_ids() == ids
        assert result.realized_size == 5
        assert all(len(e.roles) == 3 for e in result.entries)

    def test_budget_truncates(self):
        lists = as_lists([f"a{i}" for i in range(10)], [f"b{i}" for i in range(10)])
        result = fuse(lists, 7)
        assert result.realized_size == 7
        assert result.doc_ids() == ["a0", "b0", "a1", "b1", "a2", "b2", "a3"]

    def test_empty_lists_legal(self):
        assert fuse([], 5).doc_ids() == []
        assert fuse(as_lists([], ["x"]), 5).doc_ids() == ["x"]

    def test_first_occurrence_wins_metadata(self):
        lists = [
            ("SUPPORT", [("shared", 3.0), ("s1", 2.0)]),
            ("DISTINCTION", [("d1", 9.0), ("shared", 8.0)]),
        ]
        result = fuse(lists, 10)
        shared = next(e for e in result.entries if e.doc_id == "shared")
        assert shared.roles == ("SUPPORT", "DISTINCTION")
        assert shared.best_rank == 0
        assert shared.best_score == 8.0


class TestFuseRandomized:
    def random_lists(self, rng):
        n_lists = rng.randint(1, 4)
        pool = [f"d{i:03d}" for i in range(rng.randint(1, 40))]
        lists = []
        for i in range(n_lists):
            size = rng.randint(0, min(20, len(pool)))
            ids = rng.sample(pool, size)
            lists.append(
                (f"role{i}", [(d, float(rng.randint(0, 100))) for d in ids])
            )
        return lists

    def test_matches_oracle_on_1000_random_triples(self):
        rng = random.Random(2024)
        for _ in range(1000):
            lists = self.random_lists(rng)
            b_max = rng.choice([1, 3, 5, 15, 50])
            expected, _ = fuse_oracle(lists, b_max)
            got = fuse(lists, b_max)
            assert got.doc_ids() == expected
            assert got.realized_size <= b_max
            assert len(set(got.doc_ids())) == got.realized_size

    def test_stable_under_unconsumed_tail_permutation(self):
        rng = random.Random(77)
        for _ in range(200):
            lists = self.random_lists(rng)
            b_max = rng.choice([2, 4, 8])
            baseline = fuse(lists, b_max)
            _, consumed = fuse_oracle(lists, b_max)
            permuted = []
            for (role, ranked), cut in zip(lists, consumed):
                tail = list(ranked[cut:])
                rng.shuffle(tail)
                permuted.append((role, list(ranked[:cut]) + tail))
            assert fuse(permuted, b_max) == baseline

    def test_deterministic_function_of_inputs(self):
        rng = random.Random(5)
        lists = self.random_lists(rng)
        assert fuse(lists, 9) == fuse(lists, 9)
