import numpy as np
import pytest
from hypothesis import given, strategies as st

from urolesion.dataset import (CELLS, TABLE_I, DatasetManifest, Label, Modality, Procedure, Sample, blob_oracle,
                               domain_filter, generate_synthetic, ingest_manifest, load_ground_truth, read_ppm,
                               scale_composition, split_folds, uniform_composition, write_ppm)
from urolesion.errors import FoldError, ManifestError, ValidationError


def test_table_counts():
    assert sum(TABLE_I.values()) == 6101
    assert sum(n for (p, _, _), n in TABLE_I.items() if p is Procedure.CYS) == 2887
    assert sum(n for (p, _, _), n in TABLE_I.items() if p is Procedure.URS) == 3214
    small = scale_composition(TABLE_I, 20)
    assert small[(Procedure.URS, Modality.NBI, Label.LESION)] == 1
    assert sum(small.values()) == 301


def test_manifest_tally_and_duplicates(tiny_manifest):
    assert len(tiny_manifest) == 48
    assert all(tiny_manifest.composition[c] == 6 for c in CELLS)
    assert tiny_manifest.count(procedure=Procedure.URS, label=Label.LESION) == 12
    with pytest.raises(ManifestError):
        DatasetManifest([tiny_manifest[0], tiny_manifest[0]])
    batch = tiny_manifest.images([0, 1])
    assert batch.shape == (2, 3, 32, 32) and batch.dtype == np.float32
    assert domain_filter(tiny_manifest, ["CYS"]).procedures == {Procedure.CYS}


def test_generator_is_deterministic():
    a = generate_synthetic(uniform_composition(2), 32, seed=9)
    b = generate_synthetic(uniform_composition(2), 32, seed=9)
    c = generate_synthetic(uniform_composition(2), 32, seed=10)
    assert a.content_hash() == b.content_hash() != c.content_hash()


@pytest.mark.parametrize("res", [32, 64])
def test_pixel_oracle_recovers_every_label(res):
    m = generate_synthetic(uniform_composition(10), res, seed=1)
    pred = [blob_oracle(s.image, s.procedure, s.modality) for s in m]
    assert pred == [bool(v) for v in m.labels]


def test_lesion_boxes_only_on_lesion_frames(tiny_manifest):
    for s in tiny_manifest:
        assert (s.bbox is not None) == (s.label is Label.LESION)


def test_ppm_round_trip_binary_and_ascii(tmp_path, rng):
    img = rng.integers(0, 256, (5, 7, 3), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), img)
    body = " ".join(str(v) for v in img.reshape(-1))
    (tmp_path / "b.ppm").write_text(f"P3\n# comment\n7 5\n255\n{body}\n")
    np.testing.assert_array_equal(read_ppm(tmp_path / "b.ppm"), img)
    (tmp_path / "c.ppm").write_bytes(b"P6\n7 5\n255\n" + img.tobytes()[:-4])
    with pytest.raises(ValueError):
        read_ppm(tmp_path / "c.ppm")


def test_on_disk_dataset_round_trip(tmp_path):
    m = generate_synthetic(uniform_composition(2), 32, seed=4, output_dir=tmp_path)
    back = ingest_manifest(tmp_path / "manifest.csv")
    assert back.content_hash() == m.content_hash()
    boxed = load_ground_truth(back, tmp_path / "ground_truth.csv")
    assert [s.bbox for s in boxed] == [s.bbox for s in m]


def _csv(tmp_path, rows):
    head = "path,procedure,modality,label,patient_id,case_id\n"
    p = tmp_path / "m.csv"
    p.write_text(head + "".join(r + "\n" for r in rows))
    return p


def test_ingest_reports_row_numbers(tmp_path):
    write_ppm(tmp_path / "ok.ppm", np.zeros((4, 4, 3), np.uint8))
    (tmp_path / "bad.ppm").write_bytes(b"P6\n4 4\n255\n")
    (tmp_path / "x.jpg").write_bytes(b"")
    good = "ok.ppm,CYS,WLI,lesion,p1,c1"
    cases = [
        ("ok.ppm,XYZ,WLI,lesion,p1,c1", 3),
        ("missing.ppm,CYS,WLI,lesion,p1,c1", 3),
        ("bad.ppm,URS,NBI,no_lesion,p1,c1", 3),
        ("x.jpg,URS,NBI,lesion,p1,c1", 3),
    ]
    for row, lineno in cases:
        with pytest.raises(ManifestError) as exc:
            ingest_manifest(_csv(tmp_path, [good, row]))
        assert exc.value.row == lineno
    (tmp_path / "h.csv").write_text("path,procedure\n")
    with pytest.raises(ManifestError):
        ingest_manifest(tmp_path / "h.csv")
    assert len(ingest_manifest(_csv(tmp_path, [good]))) == 1


def test_custom_decoder(tmp_path):
    (tmp_path / "x.raw").write_bytes(b"")
    m = ingest_manifest(_csv(tmp_path, ["x.raw,URS,NBI,lesion,p1,c1"]),
                        decoders={".raw": lambda p: np.full((2, 2, 3), 7, np.uint8)})
    assert m[0].image.sum() == 7 * 12


def test_sample_validation():
    with pytest.raises(ValueError):
        Sample("a", "XYZ", "WLI", "lesion", "p", "c")
    with pytest.raises(ValidationError):
        Sample("a", "CYS", "WLI", "lesion", "p", "c", image=np.zeros((4, 4)))


# fold properties over random manifests

def _manifest(labels, patients):
    return DatasetManifest(Sample(f"s{i}", "CYS", "WLI", Label.LESION if y else Label.NO_LESION, f"p{q}", "c")
                           for i, (y, q) in enumerate(zip(labels, patients)))


manifests = st.integers(6, 80).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 1), min_size=n, max_size=n),
    st.lists(st.integers(0, 7), min_size=n, max_size=n)))


@given(manifests, st.integers(1, 5), st.integers(0, 2 ** 16))
def test_by_label_folds_partition_and_stratify(data, k, seed):
    m = _manifest(*data)
    split = split_folds(m, k, "by_label", seed)
    folds = split.folds()
    assert sorted(j for f in folds for j in f) == list(range(len(m)))
    for cls in (0, 1):
        n_c = int((m.labels == cls).sum())
        for f in folds:
            assert abs(int((m.labels[f] == cls).sum()) - n_c / k) < 1
    assert split == split_folds(m, k, "by_label", seed)
    for i in range(k):
        assert set(split.train(i)).isdisjoint(split.fold(i))


@given(manifests, st.integers(1, 4), st.integers(0, 2 ** 16))
def test_patient_folds_keep_patients_together(data, k, seed):
    m = _manifest(*data)
    if k > len(set(data[1])):
        with pytest.raises(FoldError):
            split_folds(m, k, "by_patient_then_label", seed)
        return
    split = split_folds(m, k, "by_patient_then_label", seed)
    owner = {}
    for j, f in enumerate(split.assignment):
        assert owner.setdefault(m[j].patient_id, f) == f
    assert sorted(j for f in split.folds() for j in f) == list(range(len(m)))


def test_fold_errors(tiny_manifest):
    with pytest.raises(FoldError):
        split_folds(tiny_manifest, 0)
    with pytest.raises(FoldError):
        split_folds(tiny_manifest[:3], 4)
    with pytest.raises(FoldError):
        split_folds(tiny_manifest, 3, "random")
