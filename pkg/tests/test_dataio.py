import hashlib
import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gazerep.dataio import (
    ATTENTION,
    CLASSIFICATION,
    IDENTITY,
    AugmentConfig,
    DatasetError,
    FrameRecord,
    FrameSample,
    SynthConfig,
    augment_attention,
    augment_classification,
    balanced_sampler,
    expected_class_counts,
    filter_valid,
    load_dataset,
    normalize_image,
    prepare_eval,
    read_pgm,
    render_scan,
    resize_bilinear,
    rotate_image,
    split_by_scan,
    synth_generate,
    temporal_subsample,
    write_dataset,
    write_pgm,
)
from gazerep.dataio.pgm import PGMError


def make_records(scans=2, frames=20, gaze=True):
    return [FrameRecord(f"frames/{s}_{t}.pgm", f"s{s}", t, [(0.5, 0.5)] if gaze else [], None)
            for s in range(scans) for t in range(frames)]


def sample_of(img, gaze=None, label=None):
    return FrameSample("s", 0, np.asarray(img, np.float32)[None],
                       None if gaze is None else np.asarray(gaze, np.float64), label)


# -- format ----------------------------------------------------------------------

class TestFormat:
    def test_pgm_round_trip(self, tmp_path):
        img = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
        write_pgm(tmp_path / "a.pgm", img)
        assert np.array_equal(read_pgm(tmp_path / "a.pgm"), img)
        assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5")

    def test_pgm_rejects_garbage(self, tmp_path):
        (tmp_path / "x.pgm").write_bytes(b"P2\n1 1\n255\n0")
        with pytest.raises(PGMError):
            read_pgm(tmp_path / "x.pgm")

    def test_round_trip(self, tmp_path):
        recs = [FrameRecord("frames/a.pgm", "s0", 0, [(0.25, 0.75), (1.0, 0.0)], "cat"),
                FrameRecord("frames/b.pgm", "s0", 8, [], None)]
        imgs = {r.image: np.full((6, 8), 0.5) for r in recs}
        write_dataset(tmp_path, recs, ["cat", "background"], imgs)
        ds = load_dataset(tmp_path)
        assert ds.records == recs
        assert ds.classes == ["cat", "background"] and ds.background == "background"

    def test_gaze_denormalized(self, tmp_path):
        rec = FrameRecord("frames/a.pgm", "s", 0, [(0.5, 0.5)], None)
        write_dataset(tmp_path, [rec], ["a", "background"], {rec.image: np.zeros((224, 288))})
        s = load_dataset(tmp_path)[0]
        assert s.image.shape == (1, 224, 288)
        np.testing.assert_array_equal(s.gaze, [[144.0, 112.0]])

    def test_unknown_label_names_line(self, tmp_path):
        recs = [FrameRecord("f.pgm", "s", 0, [(0.1, 0.1)], "a"), FrameRecord("f.pgm", "s", 1, [], "zebra")]
        write_dataset(tmp_path, recs, ["a", "background"], {"f.pgm": np.zeros((4, 4))})
        with pytest.raises(DatasetError, match="line 2"):
            load_dataset(tmp_path)

    @pytest.mark.parametrize("line, msg", [
        ('{"image": "f.pgm", "scan": "s", "frame": 0, "gaze": [[1.5, 0.2]]}', "outside"),
        ('{"image": "f.pgm", "scan": "s"}', "frame"),
        ('{"image": "f.pgm", "scan": "s", "frame": 0', "line 1"),
        ('{"image": "nope.pgm", "scan": "s", "frame": 0}', "missing frame file"),
    ])
    def test_manifest_errors(self, tmp_path, line, msg):
        write_pgm(tmp_path / "f.pgm", np.zeros((4, 4)))
        (tmp_path / "classes.json").write_text('["a", "background"]')
        (tmp_path / "manifest.jsonl").write_text(line + "\n")
        with pytest.raises(DatasetError, match=msg):
            load_dataset(tmp_path)


# -- preprocessing -----------------------------------------------------------------

class TestPreprocess:
    def test_subsample(self):
        recs = make_records(1, 16)
        assert temporal_subsample(recs, 1) == recs
        assert [r.frame for r in temporal_subsample(recs, 8)] == [0, 8]
        two = temporal_subsample(make_records(2, 20), 8)
        assert Counter(r.scan for r in two) == {"s0": 3, "s1": 3}
        with pytest.raises(ValueError):
            temporal_subsample(recs, 0)

    @given(st.integers(1, 6), st.integers(1, 6))
    def test_subsample_composes(self, a, b):
        recs = make_records(2, 50)
        twice = temporal_subsample(temporal_subsample(recs, a), b)
        assert twice == temporal_subsample(recs, a * b)

    def test_subsample_uses_scan_positions(self):
        recs = [r for r in make_records(1, 12) if r.frame not in (1, 2)]
        assert [r.frame for r in temporal_subsample(recs, 2)] == [0, 4, 6, 8, 10]

    def test_filter(self):
        recs = make_records(1, 10)
        assert filter_valid(recs) == (recs, 0)
        for r in recs[:3]:
            r.gaze = []
        kept, dropped = filter_valid(recs)
        assert len(kept) == 7 and dropped == 3

    def test_normalize(self):
        np.testing.assert_array_equal(normalize_image(np.array([[0.0, 1.0]])), [[-1.0, 1.0]])
        assert not normalize_image(np.full((5, 5), 0.3)).any()
        x = normalize_image(np.random.default_rng(0).random((64, 80)))
        assert x.dtype == np.float32
        assert abs(float(x.astype(np.float64).mean())) < 1e-5
        assert abs(float(x.astype(np.float64).std()) - 1) < 1e-4

    def test_split_by_scan(self):
        recs = make_records(9, 3)
        strat = {f"s{s}": "ab"[s % 2] for s in range(9)}
        parts = split_by_scan(recs, [2, 1], seed=0, stratify=strat)
        scans = [{r.scan for r in p} for p in parts]
        assert not scans[0] & scans[1]
        assert sum(len(p) for p in parts) == len(recs)
        assert split_by_scan(recs, [2, 1], seed=0, stratify=strat) == parts


# -- augmentation -------------------------------------------------------------------

def pattern(H=32, W=40):
    yy, xx = np.mgrid[0:H, 0:W]
    return 0.5 + 0.4 * np.sin(xx / 3.0) * np.cos(yy / 4.0)


class TestAugment:
    def test_identity_attention(self):
        img = pattern()
        s = sample_of(img, [[10.0, 8.0]])
        out = augment_attention(s, np.random.default_rng(0), IDENTITY, (16, 20))
        np.testing.assert_allclose(out.image[0], normalize_image(resize_bilinear(img, 16, 20)), atol=1e-6)
        np.testing.assert_allclose(out.gaze, [[5.0, 4.0]])

    def test_flip(self):
        s = sample_of(np.zeros((50, 100)) + np.linspace(0, 1, 100), [[10.0, 20.0]])
        cfg = AugmentConfig(flip_prob=1.0)
        out = augment_attention(s, np.random.default_rng(0), cfg, (50, 100))
        np.testing.assert_allclose(out.gaze, [[90.0, 20.0]], atol=1e-12)
        assert out.image[0, 0, 0] > out.image[0, 0, -1]

    @pytest.mark.parametrize("cfg", [ATTENTION, AugmentConfig(crop=(0.7, 0.9))])
    def test_crops_keep_gaze(self, cfg):
        rng = np.random.default_rng(1)
        violations = 0
        for k in range(1000):
            H, W = 64, 80
            g = np.column_stack([rng.uniform(0, W, 3), rng.uniform(0, H, 3)])
            if k % 3 == 0:  # tight clusters, the typical case
                g = np.clip(g[:1] + rng.normal(0, 3, (3, 2)), 0, [W, H])
            s = sample_of(np.zeros((H, W)), g)
            out = augment_attention(s, rng, cfg, (32, 40))
            gx, gy = out.gaze[:, 0], out.gaze[:, 1]
            violations += int(((gx < 0) | (gx > 40) | (gy < 0) | (gy > 32)).any())
        assert violations == 0

    def test_crop_moves_gaze_with_content(self):
        # a bright dot under the gaze point must stay under it after crop + resize
        img = np.zeros((64, 80))
        img[30:34, 50:54] = 1.0
        s = sample_of(img, [[52.0, 32.0]])
        cfg = AugmentConfig(crop=(0.7, 0.9), flip_prob=0.5)
        for seed in range(20):
            out = augment_attention(s, np.random.default_rng(seed), cfg, (64, 80))
            x, y = out.gaze[0]
            assert out.image[0, int(y), int(x)] > 1.0

    def test_identity_classification(self):
        img = pattern()
        out = augment_classification(sample_of(img, label="a"), np.random.default_rng(0), IDENTITY, (32, 40))
        np.testing.assert_allclose(out.image[0], normalize_image(img), atol=1e-6)

    def test_zero_rotation_noop(self):
        img = pattern()
        np.testing.assert_allclose(rotate_image(img, 0.0), img, atol=1e-6)

    @pytest.mark.parametrize("angle", [10.0, -10.0, 4.0])
    def test_rotation_round_trip(self, angle):
        img = pattern(48, 48)
        back = rotate_image(rotate_image(img, angle), -angle)
        assert np.abs(back - img)[12:-12, 12:-12].mean() < 2e-2

    def test_rotation_direction(self):
        # +90 degrees counter-clockwise on screen moves the right edge to the top
        img = np.zeros((21, 21))
        img[10, 15:] = 1.0
        rot = rotate_image(img, 90.0)
        assert rot[:6, 10].sum() > 4 and rot[10, 15:].sum() < 1e-9

    def test_classification_sample_randomness(self):
        img = pattern()
        s = sample_of(img, label="a")
        a = augment_classification(s, np.random.default_rng(3), CLASSIFICATION, (32, 40))
        b = augment_classification(s, np.random.default_rng(3), CLASSIFICATION, (32, 40))
        np.testing.assert_array_equal(a.image, b.image)
        assert np.isfinite(a.image).all()

    def test_prepare_eval(self):
        s = sample_of(pattern(64, 80), [[40.0, 32.0]])
        out = prepare_eval(s, (32, 40))
        np.testing.assert_allclose(out.gaze, [[20.0, 16.0]])

    def test_bad_config(self):
        with pytest.raises(ValueError):
            AugmentConfig(crop=(0.9, 0.7))
        with pytest.raises(ValueError):
            AugmentConfig(crop=(0.0, 0.5))


# -- sampling ------------------------------------------------------------------------

class TestSampler:
    def test_frequencies(self):
        labels = ["a"] * 10 + ["b"] * 50 + ["bg"] * 30
        gen = balanced_sampler(labels, ["a", "b", "bg"], "bg", np.random.default_rng(0))
        draws = [labels[next(gen)] for _ in range(6000)]
        c = Counter(draws)
        assert abs(c["a"] - 1500) < 75 and abs(c["b"] - 1500) < 75
        assert c["bg"] == 3000

    def test_single_class_alternates(self):
        labels = ["a", "bg", "a", "bg", "bg"]
        gen = balanced_sampler(labels, ["a", "bg"], "bg", np.random.default_rng(0))
        seq = [labels[next(gen)] for _ in range(20)]
        assert seq == ["a", "bg"] * 10

    def test_deterministic(self):
        labels = ["a", "b", "bg"] * 5
        g1 = balanced_sampler(labels, ["a", "b", "bg"], "bg", np.random.default_rng(7))
        g2 = balanced_sampler(labels, ["a", "b", "bg"], "bg", np.random.default_rng(7))
        assert [next(g1) for _ in range(100)] == [next(g2) for _ in range(100)]

    def test_empty_class(self):
        with pytest.raises(ValueError, match="c"):
            next(balanced_sampler(["a", "bg"], ["a", "c", "bg"], "bg", np.random.default_rng(0)))


# -- synthetic scans --------------------------------------------------------------------

def tree_hash(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


class TestSynth:
    CFG = SynthConfig(n_scans=4, frames=40, height=32, width=40, shape_size=5.0, seed=3)

    def test_deterministic_and_counts(self, tmp_path):
        synth_generate(self.CFG, tmp_path / "a")
        synth_generate(self.CFG, tmp_path / "b")
        assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")
        ds = load_dataset(tmp_path / "a")
        assert len(ds) == 4 * 40
        counts = Counter(r.label for r in ds.records if r.label is not None)
        assert counts == {k: v for k, v in expected_class_counts(self.CFG).items() if v}
        assert ds.classes[-1] == "background"
        assert all(r.gaze for r in ds.records)

    def test_gaze_on_shape(self):
        cfg = SynthConfig(n_scans=6, frames=60)
        hits = total = 0
        for s in range(cfg.n_scans):
            scan = render_scan(cfg, s)
            for t, lab in enumerate(scan.labels):
                if lab is None or lab == cfg.background:
                    continue
                cx, cy = scan.gaze[t].mean(axis=0)
                x0, y0, x1, y1 = scan.bboxes[t]
                m = 3 * cfg.gaze_sigma
                total += 1
                hits += int(x0 - m <= cx <= x1 + m and y0 - m <= cy <= y1 + m)
        assert total == 6 * cfg.labeled_per_scan
        assert hits / total >= 0.95

    def test_plane_frames_most_visible(self):
        scan = render_scan(SynthConfig(frames=60), 1)
        plane = [t for t, lab in enumerate(scan.labels) if lab == scan.shape]
        bg = [t for t, lab in enumerate(scan.labels) if lab == "background"]
        assert min(scan.visibility[plane]) == 1.0
        assert max(scan.visibility[bg]) < 0.1

    def test_validation(self, tmp_path):
        with pytest.raises(ValueError):
            synth_generate(SynthConfig(classes=("ellipse",)), tmp_path)
        with pytest.raises(ValueError):
            synth_generate(SynthConfig(classes=("ellipse", "hexagon")), tmp_path)
        with pytest.raises(ValueError):
            synth_generate(SynthConfig(frames=10), tmp_path)

    def test_metadata(self, tmp_path):
        synth_generate(self.CFG, tmp_path)
        meta = json.loads((tmp_path / "synth.json").read_text())
        assert meta["seed"] == 3 and meta["n_scans"] == 4
