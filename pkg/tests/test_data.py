import dataclasses
import hashlib

import nibabel as nib
import numpy as np
import pytest
from scipy import ndimage

from bigl.data import (CaseRecord, PhantomSpec, domain_b_intensity, generate_phantom, load_cases,
                       make_slice_stream, read_pairing_manifest, render_phantom_case, split_cases,
                       write_volume)
from bigl.domain import Domain
from bigl.errors import IncompleteCase, IngestError, InsufficientCases

SMALL = PhantomSpec(image_size=32, n_cases=5, slices_per_case=3, lesion_radius=(4.0, 7.0), seed=3)


def fake_cases(n):
    return [CaseRecord(f"c{i:04d}", {}, None, (1.0, 1.0, 1.0), (1, 1, 1)) for i in range(n)]


@pytest.mark.parametrize("n,sizes", [(10, (7, 1, 2)), (335, (235, 33, 67)), (3, (3, 0, 0))])
def test_split_sizes(n, sizes):
    assert tuple(len(s) for s in split_cases(fake_cases(n))) == sizes


def test_split_requires_three_cases():
    with pytest.raises(InsufficientCases):
        split_cases(fake_cases(2))
    with pytest.raises(ValueError):
        split_cases(fake_cases(10), (0.5, 0.5, 0.5))


def test_splits_are_deterministic_disjoint_and_complete():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(3, 60))
        seed = int(rng.integers(0, 2**31))
        cases = fake_cases(n)
        a = split_cases(cases, seed=seed)
        assert a == split_cases(cases, seed=seed)
        ids = [[c.case_id for c in part] for part in a]
        flat = sum(ids, [])
        assert len(flat) == len(set(flat)) == n
        assert all(part == sorted(part) for part in ids)
        assert [c.split for c in a[1]] == ["val"] * len(a[1])


@pytest.fixture(scope="module")
def phantom(tmp_path_factory):
    root = tmp_path_factory.mktemp("phantom")
    generate_phantom(SMALL, root)
    return root


def test_phantom_is_deterministic(phantom, tmp_path):
    generate_phantom(SMALL, tmp_path)
    for f in sorted(phantom.rglob("*.*")):
        other = tmp_path / f.relative_to(phantom)
        assert hashlib.sha256(f.read_bytes()).digest() == hashlib.sha256(other.read_bytes()).digest()


def test_phantom_manifest(phantom):
    pairs = read_pairing_manifest(phantom)
    assert sorted(pairs) == [f"case_{i:03d}" for i in range(5)]
    a, b = pairs["case_002"]
    assert a.name == "modA.nii.gz" and b.name == "modB.nii.gz" and a.exists()


def test_phantom_rings_are_nested():
    rng = np.random.default_rng(7)
    for _ in range(10):
        _, _, lab = render_phantom_case(dataclasses.replace(SMALL, lesion_count=(1, 2)), rng)
        for k in range(lab.shape[2]):
            sl = lab[:, :, k]
            tc = np.isin(sl, (1, 4))
            assert np.all(ndimage.binary_dilation(sl == 1) <= tc)  # necrosis sits inside ET
            assert np.all(ndimage.binary_dilation(tc) <= (sl > 0))  # core sits inside edema
            assert set(np.unique(sl)) <= {0, 1, 2, 4}


def test_domain_b_inverts_contrast():
    a = np.linspace(0.0, 1.0, 11)
    b = domain_b_intensity(a, 1.5)
    assert np.all(np.diff(b) < 0) and b.min() > 0
    vol_a, vol_b, lab = render_phantom_case(dataclasses.replace(SMALL, noise=0.0, lesion_count=(1, 1)),
                                            np.random.default_rng(1))
    et, wm = lab == 4, (lab == 0) & (vol_a > 0.5)
    assert vol_a[et].mean() > vol_a[wm].mean()
    assert vol_b[et].mean() < vol_b[wm].mean()


def test_phantom_spec_validation():
    with pytest.raises(ValueError):
        PhantomSpec(lesion_radius=(5.0, 40.0))
    with pytest.raises(ValueError):
        PhantomSpec(tc_fraction=0.2, ncr_fraction=0.3)
    with pytest.raises(ValueError):
        PhantomSpec(n_cases=0)


def test_load_cases(phantom):
    cases = load_cases(phantom)
    assert [c.case_id for c in cases] == [f"case_{i:03d}" for i in range(5)]
    assert cases[0].spacing == (1.0, 1.0, 2.0) and cases[0].shape == (32, 32, 3)


def copy_case(src, dst):
    dst.mkdir(parents=True)
    for f in src.iterdir():
        (dst / f.name).write_bytes(f.read_bytes())


def test_load_cases_errors(phantom, tmp_path):
    with pytest.raises(IngestError):
        load_cases(tmp_path / "missing")
    root = tmp_path / "missing_mod"
    copy_case(phantom / "case_000", root / "case_000")
    (root / "case_000" / "modB.nii.gz").unlink()
    with pytest.raises(IncompleteCase, match="modB"):
        load_cases(root)

    root = tmp_path / "shape"
    copy_case(phantom / "case_000", root / "case_000")
    write_volume(root / "case_000" / "modB.nii.gz", np.zeros((16, 32, 3), np.float32), (1, 1, 2))
    with pytest.raises(IngestError, match="shape"):
        load_cases(root)

    root = tmp_path / "spacing"
    copy_case(phantom / "case_000", root / "case_000")
    write_volume(root / "case_000" / "label.nii.gz", np.zeros((32, 32, 3), np.int16), (1, 1, 3))
    with pytest.raises(IngestError, match="spacing"):
        load_cases(root)

    root = tmp_path / "corrupt"
    copy_case(phantom / "case_000", root / "case_000")
    (root / "case_000" / "modA.nii.gz").write_bytes(b"not a volume")
    with pytest.raises(IngestError):
        load_cases(root)

    root = tmp_path / "unlabeled"
    copy_case(phantom / "case_000", root / "case_000")
    (root / "case_000" / "label.nii.gz").unlink()
    with pytest.raises(IncompleteCase):
        load_cases(root)
    assert load_cases(root, require_labels=False)[0].label is None


def test_labeled_stream_contracts(phantom):
    cases = load_cases(phantom)
    stream = make_slice_stream(cases, "modA", labeled=True, image_size=(16, 16))
    assert len(stream) == 15
    s, m = stream.items[0]
    assert s.shape == (16, 16) and m.classes.shape == (16, 16)
    assert s.spacing == (2.0, 2.0) and stream.case_spacing["case_000"] == (2.0, 2.0, 2.0)
    support = s.pixels[s.pixels != 0]
    assert abs(support.mean()) < 1e-4 and abs(support.std() - 1) < 1e-3
    assert s.domain == Domain.SOURCE and s.case_id == "case_000"
    assert m.classes.max() <= 3


def test_stream_shuffles_are_seeded(phantom):
    cases = load_cases(phantom)
    a = make_slice_stream(cases, "modA", seed=4, image_size=(16, 16))
    b = make_slice_stream(cases, "modA", seed=4, image_size=(16, 16))
    np.testing.assert_array_equal(a.order(3), b.order(3))
    assert not np.array_equal(a.order(0), a.order(1))
    assert sorted(a.order(2)) == list(range(len(a)))


def test_empty_slices_are_dropped(phantom, tmp_path):
    root = tmp_path / "blank"
    copy_case(phantom / "case_001", root / "case_001")
    path = root / "case_001" / "modA.nii.gz"
    vol = np.asanyarray(nib.load(str(path)).dataobj).copy()
    vol[:, :, 1] = 0
    write_volume(path, vol, (1, 1, 2))
    stream = make_slice_stream(load_cases(root), "modA", image_size=(32, 32))
    assert [s.slice_index for s, _ in stream] == [0, 2]


def test_unlabeled_stream_hides_case_identity(phantom):
    cases = load_cases(phantom)
    src = make_slice_stream(cases, "modA", labeled=True, image_size=(16, 16))
    tgt = make_slice_stream(cases, "modB", labeled=False, image_size=(16, 16), domain=Domain.TARGET)
    assert all(m is None for _, m in tgt)
    src_ids = {s.case_id for s, _ in src}
    tgt_ids = {s.case_id for s, _ in tgt}
    assert not src_ids & tgt_ids and len(tgt_ids) == 5
    assert all(s.domain == Domain.TARGET for s, _ in tgt)
    with pytest.raises(IncompleteCase):
        make_slice_stream([dataclasses.replace(cases[0], label=None)], "modA", labeled=True)
