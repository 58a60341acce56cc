"""Tests for the sliding-window topic-model baseline."""

import numpy as np
import pytest

from catseq import lda, metrics, syngen
from catseq.dataio import NOISE_LABEL


def runs_dataset(group_events, run_len=80, runs=6, patients=4, seed=0):
    """Patients whose group switches every `run_len` events; each group
    draws uniformly from its own (possibly disjoint) event subset."""
    rng = np.random.default_rng(seed)
    n_groups = len(group_events)
    patients_out = []
    for i in range(patients):
        events = []
        groups = []
        for r in range(runs):
            g = int(rng.integers(0, n_groups))
            choices = group_events[g]
            events.append(rng.choice(choices, size=run_len))
            groups.append(np.full(run_len, g))
        patients_out.append(
            syngen.Patient(f"p{i}", np.concatenate(events).astype(np.int64),
                           groups=np.concatenate(groups).astype(np.int64))
        )
    vocab = int(max(max(c) for c in group_events)) + 1
    return syngen.EventDataset(patients_out, vocab_size=vocab, group_count=n_groups)


class TestMakeWindows:
    def test_exact_length_yields_one_window(self):
        ds = syngen.EventDataset(
            [syngen.Patient("a", np.arange(32, dtype=np.int64))], vocab_size=32
        )
        corpus = lda.make_windows(ds, window_len=32)
        assert len(corpus) == 1
        np.testing.assert_array_equal(corpus.tokens[0], np.arange(32))

    def test_window_count_formula(self):
        ds = syngen.EventDataset(
            [syngen.Patient("a", np.zeros(40, dtype=np.int64))], vocab_size=1
        )
        corpus = lda.make_windows(ds, window_len=32, stride=1)
        assert len(corpus) == 9  # 40 - 32 + 1

    @pytest.mark.parametrize("n", [32, 40, 50, 70, 100])
    def test_coverage_counts(self, n):
        # coverage ramps up from both ends: min(p+1, n-p, n-31, 32) windows
        ds = syngen.EventDataset(
            [syngen.Patient("a", np.zeros(n, dtype=np.int64))], vocab_size=1
        )
        corpus = lda.make_windows(ds, window_len=32)
        cover = np.zeros(n, dtype=int)
        for w in range(len(corpus)):
            s = corpus.starts[w]
            cover[s:s + 32] += 1
        for p in range(n):
            assert cover[p] == min(p + 1, n - p, n - 31, 32)

    def test_short_patients_skipped_and_counted(self):
        ds = syngen.EventDataset(
            [
                syngen.Patient("long", np.zeros(40, dtype=np.int64)),
                syngen.Patient("short", np.zeros(10, dtype=np.int64)),
            ],
            vocab_size=1,
        )
        corpus = lda.make_windows(ds, window_len=32)
        assert corpus.skipped == 1
        assert set(corpus.patient_index.tolist()) == {0}

    def test_count_matrix_rows_sum_to_window_len(self):
        ds = runs_dataset([np.arange(5), np.arange(5, 10)], patients=2, runs=2)
        corpus = lda.make_windows(ds, window_len=16)
        counts = corpus.count_matrix()
        np.testing.assert_array_equal(counts.sum(axis=1), 16)


class TestFit:
    def test_single_topic_point_mass(self):
        ds = runs_dataset([np.arange(6)], patients=2, runs=2, run_len=40)
        corpus = lda.make_windows(ds, window_len=16)
        model = lda.fit(corpus, 1, iterations=20, burn_in=5, seed=0)
        np.testing.assert_allclose(model.doc_topic, 1.0)
        assert np.all(lda.window_topics(model) == 0)

    def test_disjoint_vocabularies_recovered(self):
        ds = runs_dataset([np.arange(8), np.arange(8, 16)], run_len=100,
                          runs=4, patients=3, seed=1)
        corpus = lda.make_windows(ds, window_len=32)
        model = lda.fit(corpus, 2, iterations=300, burn_in=100, seed=0)
        predicted = lda.window_topics(model)
        truth = lda.window_level_truth(corpus, [p.groups for p in ds])
        assert metrics.ami(truth, predicted) >= 0.95

    def test_same_seed_identical_model(self):
        ds = runs_dataset([np.arange(5), np.arange(5, 10)], patients=2, seed=2)
        corpus = lda.make_windows(ds, window_len=16)
        m1 = lda.fit(corpus, 2, iterations=50, burn_in=10, seed=7)
        m2 = lda.fit(corpus, 2, iterations=50, burn_in=10, seed=7)
        np.testing.assert_array_equal(m1.doc_topic, m2.doc_topic)
        np.testing.assert_array_equal(m1.topic_word, m2.topic_word)

    def test_rows_normalized(self):
        ds = runs_dataset([np.arange(5), np.arange(5, 10)], patients=2, seed=3)
        corpus = lda.make_windows(ds, window_len=16)
        model = lda.fit(corpus, 3, iterations=40, burn_in=10, seed=1)
        np.testing.assert_allclose(model.doc_topic.sum(axis=1), 1.0, atol=1e-10)
        np.testing.assert_allclose(model.topic_word.sum(axis=1), 1.0, atol=1e-10)

    def test_validation(self):
        ds = runs_dataset([np.arange(5)], patients=1, runs=1)
        corpus = lda.make_windows(ds, window_len=16)
        with pytest.raises(ValueError):
            lda.fit(corpus, 0)
        with pytest.raises(ValueError):
            lda.fit(corpus, 2, iterations=10, burn_in=10)
        with pytest.raises(ValueError):
            lda.fit(corpus, 2, topic_word_prior=0.0)


class TestLabeling:
    def make_tiny_corpus(self):
        # one patient, 6 events, window 4, stride 1 -> 3 windows
        ds = syngen.EventDataset(
            [syngen.Patient("a", np.arange(6, dtype=np.int64))], vocab_size=6
        )
        return lda.make_windows(ds, window_len=4)

    def test_argmax_and_tie_rules(self):
        model = lda.LdaModel(
            topic_count=2,
            topic_word=np.full((2, 6), 1 / 6),
            doc_topic=np.array([[0.2, 0.8], [0.5, 0.5], [0.9, 0.1]]),
            doc_topic_prior=0.5, topic_word_prior=0.1,
            iterations=1, burn_in=0, seed=0,
        )
        np.testing.assert_array_equal(lda.window_topics(model), [1, 0, 0])

    def test_event_labels_mode_and_ties(self):
        corpus = self.make_tiny_corpus()
        # windows cover positions [0..3], [1..4], [2..5]
        assignment = lda.event_labels(corpus, np.array([1, 1, 2]))
        # position 0: covers {1} -> 1; position 2: {1,1,2} -> 1
        # position 5: covers {2} -> 2
        np.testing.assert_array_equal(assignment.labels, [1, 1, 1, 1, 1, 2])

    def test_event_label_tie_breaks_low(self):
        corpus = self.make_tiny_corpus()
        assignment = lda.event_labels(corpus, np.array([2, 1, 0]))
        # position 2 covers {2,1,0}: three-way tie -> 0
        assert assignment.labels[2] == 0

    def test_uncovered_events_are_noise(self):
        ds = syngen.EventDataset(
            [
                syngen.Patient("long", np.zeros(5, dtype=np.int64)),
                syngen.Patient("short", np.zeros(2, dtype=np.int64)),
            ],
            vocab_size=1,
        )
        corpus = lda.make_windows(ds, window_len=4)
        assignment = lda.event_labels(corpus, np.zeros(len(corpus), dtype=np.int64))
        short_labels = assignment.labels[-2:]
        np.testing.assert_array_equal(short_labels, NOISE_LABEL)
        assert list(assignment.patient_ids[-2:]) == ["short", "short"]

    def test_window_truth_majority_and_ties(self):
        groups = np.array([2, 2, 5, 5, 2, 3], dtype=np.int64)
        ds = syngen.EventDataset(
            [syngen.Patient("a", np.zeros(6, dtype=np.int64), groups=groups)],
            vocab_size=1,
        )
        corpus = lda.make_windows(ds, window_len=4)
        truth = lda.window_level_truth(corpus, [groups])
        # [2,2,5,5] tie 2 vs 5 -> 2; [2,5,5,2] tie -> 2; [5,5,2,3] -> 5
        np.testing.assert_array_equal(truth, [2, 2, 5])


class TestModelSerialization:
    def test_roundtrip(self, tmp_path):
        ds = runs_dataset([np.arange(5), np.arange(5, 10)], patients=2, seed=4)
        corpus = lda.make_windows(ds, window_len=16)
        model = lda.fit(corpus, 2, iterations=30, burn_in=10, seed=3)
        path = tmp_path / "lda.json"
        lda.save_model(model, path)
        back = lda.load_model(path)
        np.testing.assert_allclose(back.doc_topic, model.doc_topic)
        np.testing.assert_allclose(back.topic_word, model.topic_word)
        assert back.topic_count == model.topic_count
