import numpy as np
import pytest

from agesynth.conditioning import Health
from agesynth.data import (
    N_SLICES,
    DatasetError,
    DatasetManifest,
    DegenerateVolumeError,
    ManifestError,
    ManifestRow,
    PhantomSpec,
    PhantomSpecError,
    SliceDataset,
    SubjectMeta,
    Volume,
    VolumeIOError,
    generate_phantom_dataset,
    interslice_discontinuity,
    load_volume,
    middle_slice_start,
    preprocess_volume,
    preprocessed_header,
    render_phantom,
    sagittal_view,
    coronal_view,
    save_volume,
    stack_slices,
    ventricle_area,
)
from agesynth.data.phantom import PhantomIdentity
from agesynth.networks import IMAGE_SHAPE, ShapeError


@pytest.fixture(scope="module")
def phantoms():
    return generate_phantom_dataset(PhantomSpec(), 24, 7)


def _raw(shape=(70, 220, 150), seed=0):
    return np.random.default_rng(seed).gamma(2.0, 100.0, shape).astype(np.float32)


def test_constant_volume_maps_to_one():
    out = preprocess_volume(Volume(np.full((60, 208, 160), 37.0)))
    assert len(out) == 60 and all((s == 1.0).all() for s in out)


def test_zero_volume_is_degenerate():
    with pytest.raises(DegenerateVolumeError):
        preprocess_volume(Volume(np.zeros((60, 208, 160))))


def test_middle_slices():
    assert middle_slice_start(100) == 20
    v = np.zeros((100, 208, 160), np.float32)
    v += np.arange(100, dtype=np.float32)[:, None, None] + 1
    out = preprocess_volume(Volume(v))
    top = np.percentile(v, 99.5)
    assert out[0][0, 0] == pytest.approx(2 * 21 / top - 1, rel=1e-6)
    assert out[-1][0, 0] == pytest.approx(2 * 80 / top - 1, rel=1e-6)
    with pytest.raises(ShapeError):
        preprocess_volume(Volume(np.ones((2, 208, 160))))


def test_crop_and_pad():
    v = _raw((60, 220, 150))
    out = preprocess_volume(Volume(v))
    assert all(s.shape == IMAGE_SHAPE for s in out)
    # width 150 -> 5 padded columns either side at the background value
    assert (out[0][:, :5] == -1).all() and (out[0][:, -5:] == -1).all()
    assert (out[0][:, 5:-5] > -1).any()


def test_clipped_fraction_saturates():
    v = _raw((60, 208, 160))
    out = np.stack(preprocess_volume(Volume(v)))
    assert np.mean(out == 1.0) == pytest.approx(np.mean(v >= np.percentile(v, 99.5)), abs=1e-6)
    assert out.min() >= -1 and out.max() <= 1


def test_preprocess_idempotent_and_stack_round_trip(tmp_path):
    vol = Volume(_raw())
    first = preprocess_volume(vol)
    stacked = stack_slices(first, preprocessed_header(vol))
    assert np.array_equal(stacked.voxels, np.stack(first))
    again = preprocess_volume(stacked)
    assert max(np.abs(a - b).max() for a, b in zip(first, again)) <= 1e-6
    save_volume(stacked, tmp_path / "p.nii.gz")
    loaded = load_volume(tmp_path / "p.nii.gz")
    assert loaded.normalized
    assert max(np.abs(a - b).max() for a, b in zip(first, preprocess_volume(loaded))) <= 1e-6


def test_header_locates_subvolume():
    vol = Volume(_raw((70, 220, 150)), affine=np.diag([2.0, 2.0, 3.0, 1.0]))
    hdr = preprocessed_header(vol)
    # voxel (0, 0, 0) of the preprocessed stack is old voxel (x=-5, y=6, z=5)
    assert np.allclose(hdr.affine[:3, 3], [-10.0, 12.0, 15.0])


def test_stack_errors():
    with pytest.raises(ShapeError):
        stack_slices([np.zeros(IMAGE_SHAPE)] * 59)
    with pytest.raises(ShapeError):
        stack_slices([np.zeros((10, 10))] * 60)


def test_orthogonal_views_are_coherent(phantoms):
    s = phantoms.subjects[0]
    stacked = stack_slices(preprocess_volume(phantoms.render_volume(s)))
    assert sagittal_view(stacked).shape == (60, 208)
    assert coronal_view(stacked).shape == (60, 160)
    shuffled = stack_slices(np.random.default_rng(0).uniform(-1, 1, (60, *IMAGE_SHAPE)))
    assert interslice_discontinuity(stacked) < 1.0 < interslice_discontinuity(shuffled)


def test_volume_io(tmp_path):
    vol = Volume(_raw((61, 30, 20)), affine=np.diag([1.5, 1.5, 2.0, 1.0]))
    save_volume(vol, tmp_path / "v.nii.gz")
    back = load_volume(tmp_path / "v.nii.gz")
    assert back.voxels.shape == (61, 30, 20)
    assert np.array_equal(back.voxels, vol.voxels) and np.allclose(back.affine, vol.affine)
    assert not back.normalized
    save_volume(vol, tmp_path / "i.nii.gz", dtype=np.int16)
    assert np.array_equal(load_volume(tmp_path / "i.nii.gz").voxels, np.rint(vol.voxels))
    with pytest.raises(VolumeIOError):
        load_volume(tmp_path / "missing.nii.gz")
    (tmp_path / "junk.nii.gz").write_bytes(b"not a volume")
    with pytest.raises(VolumeIOError):
        load_volume(tmp_path / "junk.nii.gz")


def _row(sid, age, split="train", exclude=False):
    return ManifestRow(SubjectMeta(sid, age, "CN"), f"{sid}.nii.gz", split, exclude)


def test_manifest_validation():
    with pytest.raises(ManifestError, match="duplicate"):
        DatasetManifest([_row("a", 50), _row("a", 50)])
    with pytest.raises(ManifestError, match="repeated"):
        DatasetManifest([_row("a", 50), _row("a", 60)])
    DatasetManifest([_row("a", 50), _row("a", 60, "test"), _row("a", 50, exclude=True)])
    with pytest.raises(ManifestError):
        SubjectMeta("x", 101, "CN")
    with pytest.raises(ManifestError):
        DatasetManifest([_row("a", 50, "validation")])


def test_manifest_round_trip(tmp_path):
    m = DatasetManifest([_row("a", 50), _row("b", 61.5, "test"), _row("c", 70, exclude=True)])
    m.write(tmp_path / "m.csv")
    back = DatasetManifest.read(tmp_path / "m.csv")
    assert [(r.subject_id, r.meta.age, r.split, r.exclude) for r in back] == \
        [("a", 50, "train", False), ("b", 61.5, "test", False), ("c", 70, "train", True)]
    assert [r.subject_id for r in back.active()] == ["a", "b"]
    assert back.resolve(back.rows[0]) == tmp_path / "a.nii.gz"
    (tmp_path / "bad.csv").write_text("subject_id,path\nx,y\n")
    with pytest.raises(ManifestError, match="missing"):
        DatasetManifest.read(tmp_path / "bad.csv")


def test_slice_dataset_from_manifest(tmp_path, phantoms):
    subs = phantoms.subjects[:3]
    for s in subs:
        save_volume(phantoms.render_volume(s), tmp_path / f"{s.subject_id}.nii.gz", dtype=np.int16)
    m = DatasetManifest([ManifestRow(s.meta, f"{s.subject_id}.nii.gz", "train") for s in subs], root=tmp_path)
    ds = SliceDataset.from_manifest(m, "train", slices=[30])
    assert len(ds) == 3 and ds.images.shape == (3, *IMAGE_SHAPE)
    assert list(ds.slice_index) == [30, 30, 30]
    with pytest.raises(DatasetError):
        SliceDataset.from_manifest(m, "test")


def test_phantom_spec_validation(tmp_path):
    with pytest.raises(PhantomSpecError):
        PhantomSpec(ventricle_growth={"CN": 30, "MCI": 25, "AD": 40})
    with pytest.raises(PhantomSpecError):
        PhantomSpec(noise=-0.1)
    spec = PhantomSpec(noise=0.05)
    spec.dump(tmp_path / "p.yaml")
    assert PhantomSpec.load(tmp_path / "p.yaml") == spec


def test_phantom_ventricle_grows_with_age(phantoms):
    for s in phantoms.subjects:
        areas = [ventricle_area(phantoms.render(s, a, noise=False)) for a in (30, 45, 60)]
        assert areas[0] < areas[1] < areas[2]


def test_ventricle_statistic_matches_analytic_area():
    spec = PhantomSpec(noise=0.0)
    ident = PhantomIdentity.draw(np.random.default_rng(0))
    for age in (25, 55, 85):
        img = render_phantom(spec, ident, age, "MCI")
        assert ventricle_area(img) == pytest.approx(spec.ventricle_area(age, "MCI"), rel=0.02)


def test_disease_ages_faster(phantoms):
    s = phantoms.subjects[0]
    growth = {h: ventricle_area(phantoms.render(s, 60, h, noise=False)) - ventricle_area(phantoms.render(s, 30, h, noise=False))
              for h in Health}
    assert growth[Health.CN] < growth[Health.MCI] < growth[Health.AD]


def test_phantom_determinism():
    a = generate_phantom_dataset(PhantomSpec(), 6, 3)
    b = generate_phantom_dataset(PhantomSpec(), 6, 3)
    assert np.array_equal(a.images, b.images) and a.subjects == b.subjects
    c = generate_phantom_dataset(PhantomSpec(), 6, 4)
    assert not np.array_equal(a.images, c.images)


def test_phantom_images_are_slices(phantoms):
    assert phantoms.images.shape == (24, *IMAGE_SHAPE)
    assert phantoms.images.min() >= -1 and phantoms.images.max() <= 1
    assert {s.split for s in phantoms.subjects} == {"train", "test"}


def test_longitudinal_pairs_only_for_evaluation(phantoms):
    pairs = phantoms.longitudinal_pairs((10,))
    assert pairs and all(p.age_out == p.age_in + 10 for p in pairs)
    test_ids = {s.subject_id for s in phantoms.split("test")}
    assert {p.subject_id for p in pairs} <= test_ids
    assert len(SliceDataset.from_phantoms(phantoms, "train")) == len(phantoms.split("train"))


def test_phantom_volume_survives_pipeline(phantoms):
    s = phantoms.subjects[1]
    vol = phantoms.render_volume(s)
    assert vol.n_slices == 64 >= N_SLICES
    sl = preprocess_volume(vol)
    assert len(sl) == N_SLICES
    assert ventricle_area(sl[30]) == pytest.approx(ventricle_area(phantoms.images[s.index]), rel=0.15)
