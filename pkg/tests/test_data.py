import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gapnet.config import ConfigError
from gapnet.data import (
    DataError,
    GeneratorConfig,
    Instance,
    Vocab,
    check_instances,
    cluster_of,
    generate,
    make_batch,
    read_jsonl,
    split,
    split_of,
    write_dataset,
    write_jsonl,
)

SMALL = GeneratorConfig(n_users=50, n_items=80, n_contexts=4, n_clusters=4, T_rt=3, T_st=6, T_lt=10, n_requests=200, seed=1)


def random_instance(rng) -> Instance:
    seq = lambda: rng.integers(0, 1000, size=int(rng.integers(0, 8))).tolist()  # noqa: E731
    return Instance(int(rng.integers(10**6)), int(rng.integers(100)), int(rng.integers(10)), int(rng.integers(1000)),
                    seq(), seq(), seq(), int(rng.integers(2)))


class TestFiles:
    def test_empty_file(self, tmp_path):
        (tmp_path / "e.jsonl").write_text("")
        assert read_jsonl(tmp_path / "e.jsonl") == []

    def test_thousand_instances_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        data = [random_instance(rng) for _ in range(1000)]
        write_jsonl(data, tmp_path / "d.jsonl")
        assert read_jsonl(tmp_path / "d.jsonl") == data

    def test_missing_field(self, tmp_path):
        rec = random_instance(np.random.default_rng(1)).to_record()
        del rec["seq_st"]
        (tmp_path / "d.jsonl").write_text(json.dumps(rec) + "\n")
        with pytest.raises(DataError, match="line 1: missing field 'seq_st'"):
            read_jsonl(tmp_path / "d.jsonl")

    @pytest.mark.parametrize(
        "line, message",
        [("{not json", "malformed JSON"), ('[1, 2]', "JSON object"), ('{"label": true}', "missing field")],
    )
    def test_bad_lines(self, tmp_path, line, message):
        good = json.dumps(random_instance(np.random.default_rng(2)).to_record())
        (tmp_path / "d.jsonl").write_text(good + "\n" + line + "\n")
        with pytest.raises(DataError, match=f"line 2: .*{message}"):
            read_jsonl(tmp_path / "d.jsonl")

    def test_wrong_types(self, tmp_path):
        rec = random_instance(np.random.default_rng(3)).to_record()
        rec["seq_rt"] = [1, "a"]
        (tmp_path / "d.jsonl").write_text(json.dumps(rec) + "\n")
        with pytest.raises(DataError, match="seq_rt"):
            read_jsonl(tmp_path / "d.jsonl")


class TestVocab:
    def test_infer(self):
        v = Vocab.infer([Instance(0, 3, 1, 7, [9], [], [2], 1), Instance(1, 0, 4, 1, [], [], [], 0)])
        assert v == Vocab(4, 10, 5)

    def test_out_of_range_names_field(self):
        with pytest.raises(DataError, match="seq_lt"):
            check_instances([Instance(0, 0, 0, 0, [], [], [12], 0)], Vocab(1, 10, 1))
        with pytest.raises(DataError, match="user_id"):
            check_instances([Instance(0, 5, 0, 0, [], [], [], 0)], Vocab(1, 10, 1))
        with pytest.raises(DataError, match="label"):
            check_instances([Instance(0, 0, 0, 0, [], [], [], 2)], Vocab(1, 10, 1))


class TestGenerator:
    def test_label_balance_is_exact(self):
        for k in (1, 2, 4):
            data = generate(replace(SMALL, negatives_per_positive=k))
            assert sum(i.label for i in data) * (1 + k) == len(data)

    def test_every_request_has_one_positive(self):
        data = generate(SMALL)
        per = {}
        for inst in data:
            per.setdefault(inst.request_id, []).append(inst.label)
        assert all(sorted(v) == [0, 0, 0, 0, 1] for v in per.values())

    def test_sequence_lengths_and_vocab(self):
        data = generate(SMALL)
        check_instances(data, SMALL.vocab)
        assert {(len(i.seq_rt), len(i.seq_st), len(i.seq_lt)) for i in data} == {(3, 6, 10)}

    def test_noise_free_labels_follow_session_cluster(self):
        cfg = replace(SMALL, noise_rate=0.0)
        clusters = cluster_of(cfg)
        for inst in generate(cfg):
            sess = clusters[inst.seq_rt[0]]
            assert all(clusters[v] == sess for v in inst.seq_rt)
            assert (clusters[inst.target_item_id] == sess) == bool(inst.label)

    def test_no_drift_ties_session_to_short_term(self):
        cfg = replace(SMALL, noise_rate=0.0, drift_prob=0.0)
        clusters = cluster_of(cfg)
        for inst in generate(cfg):
            assert clusters[inst.seq_rt[0]] == clusters[inst.seq_st[0]]

    def test_full_noise_targets_are_uninformative_on_their_own(self):
        cfg = replace(SMALL, noise_rate=1.0, n_users=4000, n_requests=4000)
        data = generate(cfg)
        clusters = cluster_of(cfg)
        target = np.array([clusters[i.target_item_id] for i in data])
        labels = np.array([i.label for i in data])
        for c in range(4):
            assert abs(labels[target == c].mean() - 0.2) < 0.02

    def test_clusters_cover_items(self):
        c = cluster_of(replace(SMALL, n_items=82))
        assert c.max() == 3 and np.bincount(c).tolist() == [20, 20, 20, 22]

    def test_deterministic(self):
        assert generate(SMALL) == generate(SMALL)
        assert generate(SMALL) != generate(replace(SMALL, seed=2))

    @pytest.mark.parametrize(
        "change",
        [{"noise_rate": 1.5}, {"drift_prob": -0.1}, {"n_clusters": 0}, {"T_rt": -1}, {"n_clusters": 100}],
    )
    def test_invalid_configs(self, change):
        with pytest.raises(ConfigError):
            replace(SMALL, **change)

    def test_single_cluster_is_degenerate(self):
        with pytest.raises(ConfigError, match="degenerate single-cluster config"):
            GeneratorConfig(n_clusters=1, noise_rate=0.0, drift_prob=0.0)
        assert all(i.label == 1 for i in generate(GeneratorConfig(n_clusters=1, negatives_per_positive=0, n_requests=5)))


class TestSplit:
    def test_requests_stay_together(self):
        parts = split(generate(SMALL))
        seen = {name: {i.request_id for i in insts} for name, insts in parts.items()}
        assert not (seen["train"] & seen["val"]) and not (seen["train"] & seen["test"]) and not (seen["val"] & seen["test"])

    def test_proportions(self):
        counts = {name: 0 for name in ("train", "val", "test")}
        for rid in range(20000):
            counts[split_of(rid)] += 1
        assert abs(counts["train"] / 20000 - 0.8) < 0.01
        assert abs(counts["val"] / 20000 - 0.1) < 0.01

    def test_written_dataset_is_reproducible(self, tmp_path):
        a = write_dataset(SMALL, tmp_path / "a")
        b = write_dataset(SMALL, tmp_path / "b")
        assert a == b
        assert sum(f["n_instances"] for f in a["files"].values()) == 1000
        for f in a["files"].values():
            assert f["n_positive"] * 5 == f["n_instances"]


class TestBatch:
    def test_padding_and_masks(self):
        b = make_batch([Instance(0, 0, 0, 1, [1, 2], [], [3], 1), Instance(0, 0, 0, 2, [4], [], [], 0)])
        ids, mask = b.seqs["rt"]
        assert ids.tolist() == [[1, 2], [4, 0]]
        assert mask.tolist() == [[True, True], [True, False]]
        assert b.seqs["st"][0].shape == (2, 0)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_take_retrims_to_selected_rows(self, seed):
        rng = np.random.default_rng(seed)
        data = [random_instance(rng) for _ in range(8)]
        idx = rng.choice(8, size=3, replace=False)
        sub = make_batch(data).take(idx)
        ref = make_batch([data[i] for i in idx])
        for v in ("rt", "st", "lt"):
            assert np.array_equal(sub.seqs[v][0], ref.seqs[v][0])
            assert np.array_equal(sub.seqs[v][1], ref.seqs[v][1])
        assert np.array_equal(sub.labels, ref.labels)


def _baseline_auc(gen, seed, parts=None, **train):
    from gapnet.experiment import run_cell
    from gapnet.model import ModelConfig
    from gapnet.trainer import TrainConfig

    parts = parts or split(generate(gen))
    return run_cell(ModelConfig(), TrainConfig(**train), "baseline", parts, seed, vocab=gen.vocab)["auc"]


@pytest.mark.slow
def test_more_noise_means_lower_baseline_auc():
    for seed in range(5):
        gen = GeneratorConfig(n_users=300, n_items=80, n_contexts=4, n_clusters=4, n_requests=3000, seed=seed)
        clean = _baseline_auc(replace(gen, noise_rate=0.0), seed, patience=10)
        noisy = _baseline_auc(replace(gen, noise_rate=0.5), seed, patience=10)
        assert noisy < clean, (seed, noisy, clean)


@pytest.mark.slow
def test_pure_noise_baseline_sits_at_chance():
    # 8000 training requests, test split from 24000 for a tight null estimate
    for seed in range(5):
        gen = GeneratorConfig(noise_rate=1.0, n_requests=24000, seed=seed)
        parts = split(generate(gen))
        parts["train"] = [i for i in parts["train"] if i.request_id < 8000]
        parts["val"] = [i for i in parts["val"] if i.request_id < 8000]
        auc = _baseline_auc(gen, seed, parts)
        assert 0.48 <= auc <= 0.52, (seed, auc)
