import numpy as np
import pytest

from lppred.data import (
    DataError,
    Dataset,
    InteractionRecord,
    make_folds,
    parse_dataset,
    parse_meta,
    summarize,
    write_dataset,
)

from conftest import make_records, random_dataset


def write_csv(path, body):
    path.write_text(body, encoding="utf-8")
    return path


class TestParse:
    def test_direct_readback(self, tmp_path):
        f = write_csv(tmp_path / "d.csv", "learner_id,question_id,attempt,obs\nL1,Q1,1,1\nL1,Q1,2,0\n")
        ds = parse_dataset(f)
        assert ds.n_records == 2
        assert ds.meta.n_learners == 1
        assert ds.meta.n_questions == 1
        assert ds.meta.max_attempt == 2
        assert [r.obs for r in ds.records] == [1, 0]

    def test_absent_obs_flagged(self, tmp_path):
        f = write_csv(tmp_path / "d.csv", "learner_id,question_id,attempt,obs\nL1,Q1,1,1\nL2,Q1,1,\n")
        ds = parse_dataset(f)
        assert ds.unlabeled_positions() == [1]

    def test_bad_obs_names_line(self, tmp_path):
        f = write_csv(tmp_path / "d.csv", "learner_id,question_id,attempt,obs\nL1,Q1,1,2\n")
        with pytest.raises(DataError, match=r"line 2.*obs must be 0 or 1"):
            parse_dataset(f)

    def test_bad_attempt(self, tmp_path):
        f = write_csv(tmp_path / "d.csv", "learner_id,question_id,attempt,obs\nL1,Q1,0,1\n")
        with pytest.raises(DataError, match=r"line 2.*attempt"):
            parse_dataset(f)

    def test_wrong_column_count(self, tmp_path):
        f = write_csv(tmp_path / "d.csv", "learner_id,question_id,attempt,obs\nL1,Q1,1\n")
        with pytest.raises(DataError, match=r"line 2.*4 columns"):
            parse_dataset(f)

    def test_duplicate_key(self, tmp_path):
        f = write_csv(
            tmp_path / "d.csv",
            "learner_id,question_id,attempt,obs\nL1,Q1,1,1\nL1,Q1,1,0\n",
        )
        with pytest.raises(DataError, match="duplicate"):
            parse_dataset(f)

    def test_missing_header(self, tmp_path):
        f = write_csv(tmp_path / "d.csv", "L1,Q1,1,1\n")
        with pytest.raises(DataError, match="header"):
            parse_dataset(f)

    def test_round_trip_preserves_multiset(self, tmp_path, rng):
        ds = random_dataset(rng, n_rows=60)
        out = tmp_path / "rt.csv"
        write_dataset(ds, out)
        back = parse_dataset(out)
        assert sorted((r.key(), r.obs) for r in back.records) == sorted(
            (r.key(), r.obs) for r in ds.records
        )

    def test_meta_file(self, tmp_path):
        meta = tmp_path / "meta.json"
        meta.write_text(
            '{"lesson_name": "Minor Burns", "questions": '
            '{"Q1": {"text": "What is the topic?", "options": ["a", "b"], "answer": "a"}}}',
            encoding="utf-8",
        )
        f = write_csv(tmp_path / "d.csv", "learner_id,question_id,attempt,obs\nL1,Q1,1,1\n")
        ds = parse_dataset(f, meta_path=meta)
        assert ds.meta.lesson_name == "Minor Burns"
        assert ds.meta.questions["Q1"].text == "What is the topic?"
        name, questions = parse_meta(meta)
        assert name == "Minor Burns" and questions["Q1"].answer == "a"


class TestDatasetInvariants:
    def test_index_density(self, rng):
        ds = random_dataset(rng, n_rows=50)
        assert sorted(ds.learner_index.values()) == list(range(ds.meta.n_learners))
        assert sorted(ds.question_index.values()) == list(range(ds.meta.n_questions))

    def test_meta_matches_records(self, rng):
        ds = random_dataset(rng, n_rows=50)
        assert ds.meta.n_learners == len({r.learner_id for r in ds.records})
        assert ds.meta.n_questions == len({r.question_id for r in ds.records})
        assert ds.meta.max_attempt == max(r.attempt for r in ds.records)

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            Dataset.from_records([])

    def test_subset_revalidates(self, rng):
        ds = random_dataset(rng, n_rows=30)
        sub = ds.subset(range(10))
        assert sub.n_records == 10
        assert sub.meta.n_learners == len({r.learner_id for r in sub.records})


class TestFolds:
    def test_even_split(self):
        ds = Dataset.from_records(make_records([("L1", "Q1", a, 1) for a in range(1, 11)]))
        split = make_folds(ds, 5, seed=0)
        sizes = [len(split.fold_positions(f)) for f in range(5)]
        assert sizes == [2, 2, 2, 2, 2]

    def test_remainder_split(self):
        ds = Dataset.from_records(make_records([("L1", "Q1", a, 1) for a in range(1, 12)]))
        split = make_folds(ds, 5, seed=3)
        sizes = sorted(len(split.fold_positions(f)) for f in range(5))
        assert sizes == [2, 2, 2, 2, 3]

    def test_deterministic(self, rng):
        ds = random_dataset(rng, n_rows=37)
        a = make_folds(ds, 5, seed=42)
        b = make_folds(ds, 5, seed=42)
        assert a.assignments == b.assignments

    def test_k_exceeds_labeled(self):
        ds = Dataset.from_records(make_records([("L1", "Q1", 1, 1), ("L1", "Q1", 2, None)]))
        with pytest.raises(DataError):
            make_folds(ds, 2, seed=0)

    @pytest.mark.parametrize("k", [2, 5, 10])
    def test_partition_properties(self, k):
        master = np.random.default_rng(999)
        for trial in range(50):
            rng = np.random.default_rng(master.integers(2**32))
            ds = random_dataset(rng, n_rows=int(rng.integers(k, 60)))
            split = make_folds(ds, k, seed=trial)
            folds = [split.fold_positions(f) for f in range(k)]
            union = sorted(p for fold in folds for p in fold)
            assert union == ds.labeled_positions()
            sizes = [len(f) for f in folds]
            assert max(sizes) - min(sizes) <= 1
            for f in range(k):
                assert set(folds[f]).isdisjoint(set(split.train_positions(f)))

    def test_unlabeled_never_assigned(self):
        rows = [("L1", "Q1", a, 1 if a % 2 else None) for a in range(1, 9)]
        ds = Dataset.from_records(make_records(rows))
        split = make_folds(ds, 2, seed=0)
        for pos in ds.unlabeled_positions():
            assert split.assignments[pos] == -1


class TestSummarize:
    def test_all_correct_rates(self):
        ds = Dataset.from_records(
            make_records([("L1", "Q1", 1, 1), ("L2", "Q1", 1, 1), ("L1", "Q2", 1, 1)])
        )
        s = summarize(ds)
        assert all(rate == 1.0 for rate in s.question_correct_rate.values())

    def test_histogram_conservation(self):
        ds = Dataset.from_records(
            make_records(
                [("L1", "Q1", 1, 1), ("L1", "Q1", 2, 0), ("L1", "Q2", 1, 0), ("L1", "Q2", 2, 1)]
            )
        )
        s = summarize(ds)
        assert sum(s.attempts_histogram.values()) == 4

    def test_lesson_shaped_counts(self):
        # dimensions mirroring the third benchmark lesson: 86 learners,
        # 11 questions, up to 5 attempts
        from lppred.simulate import SimSpec, simulate_bkt

        res = simulate_bkt(SimSpec(n_learners=86, n_questions=11, max_attempt=5, seed=0))
        s = summarize(res.dataset)
        assert s.meta.n_learners == 86
        assert s.meta.n_questions == 11
        assert s.meta.max_attempt == 5

    def test_text_and_json_render(self, rng):
        ds = random_dataset(rng, n_rows=25)
        s = summarize(ds)
        assert "learners" in s.to_text()
        assert s.to_dict()["n_records"] == 25
