import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xspec.data import (
    BBox, Dataset, ImageRecord, SieScheme, SynthConfig, assign_identity_by_iou, assign_sie_index,
    batches_per_epoch, export_dataset, iou, load_manifest, sample_batch, synth_generate,
)
from xspec.errors import ManifestError, SamplerError, SchemeError

SMALL = SynthConfig(image_h=16, image_w=8, cell=4)


def write(tmp_path, text, name="m.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def test_header_only_manifest_is_empty(tmp_path):
    ds = load_manifest(write(tmp_path, "path,identity,domain,camera,range\n"))
    assert len(ds) == 0


def test_four_line_manifest(tmp_path):
    text = "\n".join([
        "# n_ids=2", "# domain_names=VIS;IR", "path,identity,domain,camera,range",
        "a.npy,0,VIS,0,short", "b.npy,0,IR,1,long", "c.npy,1,0,,", "d.npy,1,1,2,none",
    ])
    ds = load_manifest(write(tmp_path, text))
    assert len(ds) == 4 and ds.n_ids == 2 and ds.n_domains == 2 and ds.n_cameras == 3
    assert [(r.identity, r.domain, r.camera, r.range_tag) for r in ds] == [
        (0, 0, 0, "short"), (0, 1, 1, "long"), (1, 0, None, "none"), (1, 1, 2, "none")]


def test_duplicate_paths_accepted(tmp_path):
    ds = load_manifest(write(tmp_path, "path,identity,domain,camera,range\nx.npy,0,0,0,none\nx.npy,0,0,0,none\n"))
    assert len(ds) == 2 and ds[0].path == ds[1].path


@pytest.mark.parametrize("body,lineno", [
    ("x.npy,0,0,0\n", 3),
    ("x.npy,zero,0,0,none\n", 3),
    ("x.npy,0,0,0,medium\n", 3),
    (",0,0,0,none\n", 3),
])
def test_malformed_line_reports_line_number(tmp_path, body, lineno):
    with pytest.raises(ManifestError) as exc:
        load_manifest(write(tmp_path, "# a comment\npath,identity,domain,camera,range\n" + body))
    assert exc.value.line == lineno and str(exc.value).startswith(f"line {lineno}:")


def test_out_of_range_label(tmp_path):
    with pytest.raises(ManifestError, match="identity 5"):
        load_manifest(write(tmp_path, "# n_ids=2\npath,identity,domain,camera,range\nx.npy,5,0,0,none\n"))
    with pytest.raises(ManifestError, match="domain 3"):
        load_manifest(write(tmp_path, "# n_domains=2\npath,identity,domain,camera,range\nx.npy,0,3,0,none\n"))


def test_missing_header_and_missing_file(tmp_path):
    with pytest.raises(ManifestError):
        load_manifest(write(tmp_path, "x.npy,0,0,0,none\n"))
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "absent.csv")


def test_export_round_trip(tmp_path):
    ds = synth_generate(2, 2, 2, seed=0, config=SMALL)
    back = load_manifest(export_dataset(ds, tmp_path))
    assert (back.n_ids, back.n_domains, back.n_cameras, back.domain_names) == (2, 2, 2, ("VIS", "IR"))
    for a, b in zip(ds, back):
        assert (a.identity, a.domain, a.camera, a.range_tag) == (b.identity, b.domain, b.camera, b.range_tag)
        assert np.array_equal(a.pixels, b.load())


def test_blob_validation(tmp_path):
    np.save(tmp_path / "bad.npy", np.full((2, 2, 3), 2.0))
    ds = load_manifest(write(tmp_path, "path,identity,domain,camera,range\nbad.npy,0,0,0,none\n"))
    with pytest.raises(ManifestError, match="outside"):
        ds[0].load()


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def test_synth_deterministic_and_seed_sensitive():
    a = synth_generate(3, 2, 2, seed=5, config=SMALL)
    b = synth_generate(3, 2, 2, seed=5, config=SMALL)
    c = synth_generate(3, 2, 2, seed=6, config=SMALL)
    assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a, b))
    assert not all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a, c))


def test_synth_record_count_and_bounds():
    ds = synth_generate(8, 2, 10, seed=0)
    assert len(ds) == 160
    px = np.stack([r.pixels for r in ds])
    assert px.shape == (160, 64, 32, 3) and px.min() >= 0.0 and px.max() <= 1.0


def test_noise_seed_keeps_identities():
    a = synth_generate(2, 2, 3, seed=0, config=SMALL)
    b = synth_generate(2, 2, 3, seed=0, noise_seed=9, config=SMALL)
    assert [(r.identity, r.domain) for r in a] == [(r.identity, r.domain) for r in b]
    assert not np.array_equal(a[0].pixels, b[0].pixels)


def test_within_domain_nearest_neighbour():
    ds = synth_generate(8, 2, 10, seed=0)
    px = np.stack([r.pixels.ravel() for r in ds])
    ids = np.array([r.identity for r in ds])
    dom = np.array([r.domain for r in ds])
    correct = 0
    for k in range(len(ds)):
        others = np.flatnonzero((dom == dom[k]) & (np.arange(len(ds)) != k))
        nn = others[np.argmin(((px[others] - px[k]) ** 2).sum(1))]
        correct += ids[nn] == ids[k]
    assert correct / len(ds) >= 0.95


def test_synth_rejects_bad_sizes():
    for args in ((1, 2, 3), (2, 1, 3), (2, 2, 0)):
        with pytest.raises(ValueError):
            synth_generate(*args, seed=0, config=SMALL)


def test_ranges_alternate_and_blur():
    ds = synth_generate(2, 4, 4, seed=0, config=SynthConfig(image_h=16, image_w=8, cell=4, ranges=True, noise=0.0))
    assert [r.range_tag for r in ds][:4] == ["short", "long", "short", "long"]
    assert ds.domain_names == ("VIS", "SWIR", "MWIR", "LWIR")


# ---------------------------------------------------------------------------
# SIE indices
# ---------------------------------------------------------------------------

def rec(domain, camera=None, tag="none"):
    return ImageRecord(0, domain, camera, tag)


def test_sie2():
    s = SieScheme("domain", 2)
    assert s.table_size == 2
    assert assign_sie_index(rec(0), s) == 0 and assign_sie_index(rec(1), s) == 1


def test_sie9_and_sie18():
    assert SieScheme("camera", 2, 9).table_size == 9
    s = SieScheme("domain+camera", 2, 9)
    assert s.table_size == 18
    assert assign_sie_index(rec(1, 3), s) == 12
    assert assign_sie_index(rec(0, 8), s) == 8


def test_sie4_and_sie8():
    assert SieScheme("domain", 4).table_size == 4
    s = SieScheme("domain+range", 4)
    assert s.table_size == 8
    assert assign_sie_index(rec(2, tag="long"), s) == 6
    assert assign_sie_index(rec(2, tag="short"), s) == 2


def test_mode_aliases():
    assert SieScheme("camera-only", 2, 9).mode == "camera"
    assert SieScheme("domain-only", 2).mode == "domain"


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 10))
def test_domain_camera_injective_onto_table(n_domains, n_cameras):
    s = SieScheme("domain+camera", n_domains, n_cameras)
    idx = [assign_sie_index(rec(d, c), s) for d in range(n_domains) for c in range(n_cameras)]
    assert sorted(idx) == list(range(s.table_size))


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6))
def test_domain_range_onto_table(n_domains):
    s = SieScheme("domain+range", n_domains)
    idx = [assign_sie_index(rec(d, tag=t), s) for d in range(n_domains) for t in ("short", "long")]
    assert sorted(idx) == list(range(s.table_size))


@pytest.mark.parametrize("scheme,record", [
    (SieScheme("camera", 2, 9), rec(0)),
    (SieScheme("domain+camera", 2, 9), rec(0, 9)),
    (SieScheme("domain+range", 4), rec(0, tag="none")),
    (SieScheme("domain", 2), rec(2)),
])
def test_sie_errors(scheme, record):
    with pytest.raises(SchemeError):
        assign_sie_index(record, scheme)


def test_unknown_mode():
    with pytest.raises(SchemeError):
        SieScheme("range", 2)


# ---------------------------------------------------------------------------
# PK sampling
# ---------------------------------------------------------------------------

def test_hundred_batches_satisfy_plan():
    ds = synth_generate(8, 2, 3, seed=0, config=SMALL)
    rng = np.random.default_rng(0)
    for _ in range(100):
        plan = sample_batch(ds, 5, 4, 2, rng)
        assert plan.is_valid() and len(plan) == 20
        assert len(set(plan.labels.tolist())) == 5
        for ident, dom, k in plan.entries:
            assert (ds[k].identity, ds[k].domain) == (ident, dom)


def test_llcm_batch_size():
    ds = synth_generate(16, 2, 3, seed=0, config=SMALL)
    plan = sample_batch(ds, 16, 4, 2, np.random.default_rng(1))
    assert len(plan) == 64 and set(plan.counts().values()) == {2}


def test_four_domains_one_each():
    ds = synth_generate(16, 4, 2, seed=0, config=SMALL)
    plan = sample_batch(ds, 16, 4, 4, np.random.default_rng(1))
    assert plan.is_valid() and set(plan.counts().values()) == {1}


def test_mixed_range_pairing():
    cfg = SynthConfig(image_h=16, image_w=8, cell=4, ranges=True)
    ds = synth_generate(16, 4, 4, seed=0, config=cfg)
    plan = sample_batch(ds, 16, 8, 4, np.random.default_rng(2), pair_ranges=True)
    assert plan.is_valid() and len(plan) == 128
    tags = {}
    for ident, dom, k in plan.entries:
        tags.setdefault((ident, dom), []).append(ds[k].range_tag)
    assert all(sorted(v) == ["long", "short"] for v in tags.values())


def test_short_cells_resampled_with_replacement():
    ds = synth_generate(3, 2, 1, seed=0, config=SMALL)
    plan = sample_batch(ds, 3, 6, 2, np.random.default_rng(0))
    assert plan.is_valid() and len(plan) == 18


def test_sampler_deterministic():
    ds = synth_generate(6, 2, 4, seed=0, config=SMALL)
    a = sample_batch(ds, 4, 4, 2, np.random.default_rng(3))
    b = sample_batch(ds, 4, 4, 2, np.random.default_rng(3))
    assert a.entries == b.entries


@pytest.mark.parametrize("P,K,N_D,pair", [(9, 4, 2, False), (2, 3, 2, False), (2, 4, 3, False),
                                          (2, 2, 2, True), (0, 4, 2, False)])
def test_sampler_errors(P, K, N_D, pair):
    ds = synth_generate(8, 2, 2, seed=0, config=SMALL)
    with pytest.raises(SamplerError):
        sample_batch(ds, P, K, N_D, np.random.default_rng(0), pair_ranges=pair)


def test_identity_missing_a_domain_is_ineligible():
    ds = synth_generate(3, 2, 2, seed=0, config=SMALL)
    kept = Dataset([r for r in ds if not (r.identity == 2 and r.domain == 1)], 3, 2)
    with pytest.raises(SamplerError):
        sample_batch(kept, 3, 2, 2, np.random.default_rng(0))
    assert sample_batch(kept, 2, 2, 2, np.random.default_rng(0)).is_valid()


def test_batches_per_epoch():
    assert batches_per_epoch(320, 8, 4) == 10
    assert batches_per_epoch(321, 8, 4) == 11
    assert batches_per_epoch(0, 8, 4) == 1


# ---------------------------------------------------------------------------
# IoU labelling
# ---------------------------------------------------------------------------

def test_iou_cases():
    a = BBox(0, 0, 2, 2)
    assert iou(a, a) == 1.0
    assert iou(a, BBox(5, 5, 1, 1)) == 0.0
    assert iou(a, BBox(1, 0, 2, 2)) == 2 / 6
    assert iou(BBox(0, 0, 0, 0), BBox(0, 0, 0, 0)) == 0.0


boxes = st.builds(BBox, st.floats(-10, 10), st.floats(-10, 10), st.floats(0, 10), st.floats(0, 10))


@settings(max_examples=200, deadline=None)
@given(boxes, boxes)
def test_iou_symmetric_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a) and 0.0 <= v <= 1.0


BODY = BBox(0, 0, 10, 10)


def test_label_unique_max():
    assert iou(BODY, BBox(0, 0, 10, 5)) == 0.5
    assert assign_identity_by_iou(BODY, [(BBox(0, 0, 10, 5), 7)]) == ("match", 7, False)


def test_label_two_overlaps_discarded():
    faces = [(BBox(0, 0, 10, 8), 1), (BBox(0, 2, 10, 8), 2)]
    assert [iou(BODY, f) for f, _ in faces] == [0.8, 0.8]
    assert assign_identity_by_iou(BODY, faces).status == "discard"


def test_label_single_overlap_above_threshold():
    faces = [(BBox(0, 0, 10, 2), 3), (BBox(0, 0, 10, 9), 4)]
    assert [iou(BODY, f) for f, _ in faces] == [0.2, 0.9]
    assert assign_identity_by_iou(BODY, faces) == ("match", 4, False)


def test_label_no_match_and_tie():
    assert assign_identity_by_iou(BODY, []).status == "no-match"
    assert assign_identity_by_iou(BODY, [(BBox(20, 20, 1, 1), 1)]).status == "no-match"
    tie = [(BBox(0, 0, 10, 5), 6), (BBox(0, 5, 10, 5), 2)]
    assert assign_identity_by_iou(BODY, tie) == ("match", 2, True)
