import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sslwb.dataset import (
    FIREARMS_CLASSES,
    UNLABELED,
    ClassSpec,
    DatasetManifest,
    ImageRecord,
    ManifestError,
    SplitRatios,
    SyntheticCorpusSpec,
    class_statistics,
    generate_synthetic_corpus,
    load_images,
    manifest_from_counts,
    read_manifest,
    render_sample,
    split_dataset,
    write_manifest,
)


def _split_counts(m):
    return Counter(r.split for r in m.records)


def _cells(m):
    out = {}
    for r in m.records:
        out.setdefault(r.class_id, Counter())[r.split] += 1
    return out


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


def test_split_full_scale_counts():
    m = split_dataset(manifest_from_counts([n for _, n, _ in FIREARMS_CLASSES]))
    assert len(m) == 25000
    c = _split_counts(m)
    assert (c["train"], c["val"], c["test"]) == (17500, 3750, 3750)


def test_split_degenerate_ratio():
    m = split_dataset(manifest_from_counts([10]), SplitRatios(1.0, 0.0, 0.0))
    c = _split_counts(m)
    assert (c["train"], c["val"], c["test"]) == (10, 0, 0)


def test_split_seven_records():
    c = _split_counts(split_dataset(manifest_from_counts([7])))
    assert (c["train"], c["val"], c["test"]) == (5, 1, 1)


def test_split_errors():
    with pytest.raises(ManifestError):
        SplitRatios(0.7, 0.2, 0.2)
    with pytest.raises(ManifestError):
        SplitRatios(1.1, -0.1, 0.0)
    with pytest.raises(ManifestError):
        split_dataset(DatasetManifest((ClassSpec(1, "a"),), ()))
    done = split_dataset(manifest_from_counts([10, 10]))
    with pytest.raises(ManifestError):
        split_dataset(done)
    assert split_dataset(done, overwrite=True, seed=1).records != done.records


def _feasible(counts, ratios):
    """Brute force: can every cell sit within one record of its exact quota?"""
    n_total = sum(counts)
    target_v = math.floor(ratios.val * n_total)
    target_t = math.floor(ratios.test * n_total)
    reach = {(0, 0)}
    for n in counts:
        opts = []
        for v in range(n + 1):
            for t in range(n + 1 - v):
                tr = n - v - t
                if all(abs(x - r * n) <= 1 + 1e-9 for x, r in ((tr, ratios.train), (v, ratios.val), (t, ratios.test))):
                    opts.append((v, t))
        reach = {(a + v, b + t) for a, b in reach for v, t in opts if a + v <= target_v and b + t <= target_t}
    return (target_v, target_t) in reach


ratio_strategy = st.sampled_from([SplitRatios(), SplitRatios(0.8, 0.1, 0.1), SplitRatios(0.5, 0.25, 0.25), SplitRatios(0.6, 0.3, 0.1)])


@settings(max_examples=150, deadline=None)
@given(st.lists(st.integers(1, 40), min_size=1, max_size=6), ratio_strategy, st.integers(0, 2**31 - 1))
def test_split_partition_and_stratification(counts, ratios, seed):
    m = manifest_from_counts(counts)
    s = split_dataset(m, ratios, seed)
    # partition: same records, each in exactly one split
    assert [r.path for r in s.records] == [r.path for r in m.records]
    assert all(r.split in ("train", "val", "test") for r in s.records)
    n = len(m)
    c = _split_counts(s)
    assert c["val"] == math.floor(ratios.val * n) and c["test"] == math.floor(ratios.test * n)
    assert c["train"] == n - c["val"] - c["test"]
    if _feasible(counts, ratios):
        for cid, cell in _cells(s).items():
            k = counts[cid - 1]
            if k >= 7:
                for split in ("train", "val", "test"):
                    assert abs(cell[split] - getattr(ratios, split) * k) <= 1 + 1e-9


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 30), min_size=1, max_size=5), st.integers(0, 1000))
def test_split_deterministic(counts, seed):
    m = manifest_from_counts(counts)
    assert split_dataset(m, seed=seed) == split_dataset(m, seed=seed)


def test_split_seed_changes_assignment():
    m = manifest_from_counts([50, 50])
    assert split_dataset(m, seed=0).records != split_dataset(m, seed=1).records


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------


def test_table_scaled_counts():
    spec = SyntheticCorpusSpec.table_scaled(50)
    assert spec.num_classes == 23
    assert spec.per_class_counts[4] == 88
    assert min(spec.per_class_counts) >= 1


def test_imbalance_ratio_full_table():
    st_ = class_statistics(manifest_from_counts([n for _, n, _ in FIREARMS_CLASSES]))
    assert abs(st_.imbalance_ratio - 4381 / 69) < 1e-12
    assert round(st_.imbalance_ratio, 2) == 63.49
    assert st_.total == 25000


def test_statistics_uniform_and_sums():
    st_ = class_statistics(split_dataset(manifest_from_counts([12, 12])))
    assert st_.imbalance_ratio == 1.0
    assert sum(sum(v.values()) for v in st_.per_class.values()) == st_.total == 24
    assert "imbalance ratio" in st_.format()
    with pytest.raises(ManifestError):
        class_statistics(DatasetManifest((), ()))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 50), min_size=1, max_size=8))
def test_statistics_properties(counts):
    st_ = class_statistics(manifest_from_counts(counts))
    assert st_.imbalance_ratio >= 1.0
    assert sum(sum(v.values()) for v in st_.per_class.values()) == sum(counts)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def test_manifest_invariants():
    with pytest.raises(ManifestError):
        DatasetManifest((ClassSpec(1, "a"), ClassSpec(1, "b")), ())
    with pytest.raises(ManifestError):
        DatasetManifest((ClassSpec(1, "a"),), (ImageRecord("x", 2),))
    with pytest.raises(ManifestError):
        DatasetManifest((ClassSpec(1, "a"),), (ImageRecord("x", 1), ImageRecord("x", 1)))
    with pytest.raises(ManifestError):
        ImageRecord("x", 1, width=4)
    with pytest.raises(ManifestError):
        ImageRecord("x", 1, split="holdout")
    with pytest.raises(ManifestError):
        ClassSpec(0, "zero")
    with pytest.raises(ManifestError):
        ClassSpec(1, "a", -1)


def test_manifest_roundtrip(tmp_path):
    m = split_dataset(manifest_from_counts([5, 9], names=["Rifle", "Bow and arrow"]), seed=3)
    path = write_manifest(m, tmp_path / "manifest.tsv")
    back = read_manifest(path)
    assert back.records == m.records and back.seed == 3
    assert back.class_names() == ["Rifle", "Bow and arrow"]


def test_manifest_malformed_reports_line(tmp_path):
    p = tmp_path / "manifest.tsv"
    p.write_text("#sslwb-manifest\tv1\nimg/a.png\t1\ttrain\t32\t32\nimg/b.png\t1\ttrain\t32\n", encoding="utf-8")
    with pytest.raises(ManifestError) as e:
        read_manifest(p)
    assert e.value.line == 3 and "line 3" in str(e.value)
    p.write_text("#sslwb-manifest\tv1\nimg/a.png\tone\ttrain\t32\t32\n", encoding="utf-8")
    with pytest.raises(ManifestError) as e:
        read_manifest(p)
    assert e.value.line == 2
    p.write_text("path\tclass\n", encoding="utf-8")
    with pytest.raises(ManifestError) as e:
        read_manifest(p)
    assert e.value.line == 1
    with pytest.raises(ManifestError):
        read_manifest(tmp_path / "missing.tsv")


def test_unlabeled_records(tmp_path):
    m = DatasetManifest((), tuple(ImageRecord(f"u{i}.png", UNLABELED) for i in range(3)))
    assert not m.is_annotated and m.num_classes == 0
    back = read_manifest(write_manifest(m, tmp_path / "manifest.tsv"))
    assert back.records == m.records and back.num_classes == 0
    st_ = class_statistics(m)
    assert st_.total == 3 and math.isnan(st_.imbalance_ratio)


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------


def test_synthetic_two_records(tmp_path):
    m = generate_synthetic_corpus(SyntheticCorpusSpec(2, (1, 1)), tmp_path)
    assert len(m) == 2
    imgs, labels = load_images(m, tmp_path)
    assert imgs.shape == (2, 32, 32, 3) and labels.tolist() == [0, 1]


def test_synthetic_corpus_byte_identical(tmp_path):
    spec = SyntheticCorpusSpec.uniform(3, 4, seed=7)
    a = generate_synthetic_corpus(spec, tmp_path / "a")
    b = generate_synthetic_corpus(spec, tmp_path / "b")
    assert a == b
    assert (tmp_path / "a/manifest.tsv").read_bytes() == (tmp_path / "b/manifest.tsv").read_bytes()
    for r in a.records:
        assert (tmp_path / "a" / r.path).read_bytes() == (tmp_path / "b" / r.path).read_bytes()
    other = SyntheticCorpusSpec.uniform(3, 4, seed=8)
    assert not np.array_equal(render_sample(spec, 0, 0), render_sample(other, 0, 0))


def test_synthetic_within_class_variance_and_class_separation():
    spec = SyntheticCorpusSpec.uniform(4, 20, seed=0)
    imgs = {c: np.stack([render_sample(spec, c, i).astype(float) for i in range(20)]) for c in range(4)}
    # images of one class are not copies of each other
    assert all(len({im.tobytes() for im in v}) == 20 for v in imgs.values())
    # class means differ more than a within-class sample differs from its class mean
    means = {c: v.mean(0) for c, v in imgs.items()}
    between = min(np.abs(means[a] - means[b]).mean() for a in range(4) for b in range(a + 1, 4))
    assert between > 1.0


def test_synthetic_spec_validation(tmp_path):
    with pytest.raises(ManifestError):
        SyntheticCorpusSpec(1, (5,))
    with pytest.raises(ManifestError):
        SyntheticCorpusSpec(2, (5, 5), image_size=8)
    with pytest.raises(ManifestError):
        SyntheticCorpusSpec(2, (5,))
    with pytest.raises(ManifestError):
        SyntheticCorpusSpec(2, (5, 5), backgrounds=("plaid",))
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ManifestError):
        generate_synthetic_corpus(SyntheticCorpusSpec(2, (1, 1)), blocker / "out")
