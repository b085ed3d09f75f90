import numpy as np
import pytest

from rfkalign.core import Image
from rfkalign.features import (MatchConfig, extract_dense_descriptors,
                               extract_multiscale, mutual_nn_match)

from conftest import smooth_image, smooth_texture
from oracles import cosine_ref, mutual_nn_ref


def test_constant_image_all_invalid():
    img = Image(np.full((64, 64, 1), 0.5))
    fm = extract_dense_descriptors(img, 1.0)
    assert not fm.valid.any()


def test_descriptors_unit_norm(rng):
    img = smooth_image(rng, 72, 96)
    fm = extract_dense_descriptors(img, 1.0)
    norms = np.linalg.norm(fm.data.astype(np.float64), axis=2)
    assert fm.valid.any()
    assert np.allclose(norms[fm.valid], 1.0, atol=1e-6)


def test_too_small_raises(rng):
    img = smooth_image(rng, 40, 40)
    with pytest.raises(ValueError):
        extract_dense_descriptors(img, 0.5)  # 20 px min side after scaling


def test_shift_equivariance(rng):
    base = smooth_texture(rng, 96, 120)
    img = Image(base[:, :, None])
    shifted = Image(np.roll(base, 8, axis=1)[:, :, None])  # translate +8 px in x
    fm = extract_dense_descriptors(img, 1.0)
    fm_s = extract_dense_descriptors(shifted, 1.0)
    # cell (i, j) of the shifted image covers cell (i, j-1) of the original;
    # 3 border columns are excluded (wraparound content plus the 4x4-cell
    # descriptor footprint and the one-sided edge gradients)
    a = fm_s.data[:, 3:-3].astype(np.float64)
    b = fm.data[:, 2:-4].astype(np.float64)
    assert np.max(np.abs(a - b)) < 1e-5


def _identity_cfg():
    return MatchConfig(scales=(1.0,))


def test_identity_matches_self(rng):
    img = smooth_image(rng, 64, 80)
    cfg = _identity_cfg()
    maps = extract_multiscale(img, cfg)
    corrs = mutual_nn_match(maps, maps, cfg)
    n_valid = int(maps[0].valid.sum())
    assert len(corrs) == n_valid
    for c in corrs:
        assert c.src == c.tgt
        assert c.score == pytest.approx(1.0, abs=1e-5)


def test_match_scores_equal_bruteforce_cosine(rng):
    a = smooth_image(rng, 48, 48)
    b = smooth_image(rng, 48, 48)
    cfg = _identity_cfg()
    am, bm = extract_multiscale(a, cfg), extract_multiscale(b, cfg)
    corrs = mutual_nn_match(am, bm, cfg)

    da = [d for row in am[0].data.astype(np.float64) for d in row]
    db = [d for row in bm[0].data.astype(np.float64) for d in row]
    va = am[0].valid.reshape(-1)
    vb = bm[0].valid.reshape(-1)
    ref = mutual_nn_ref([list(d) for d, v in zip(da, va) if v],
                        [list(d) for d, v in zip(db, vb) if v],
                        min_score=cfg.min_score)
    assert len(corrs) == len(ref)
    ref_scores = sorted(s for _, _, s in ref)
    got_scores = sorted(c.score for c in corrs)
    assert np.allclose(got_scores, ref_scores, atol=1e-5)


def test_rotated_texture_kills_matches(rng):
    # strongly oriented texture: horizontal stripes plus jitter; after a 90
    # degree rotation every orientation histogram lands in different bins
    ys = np.arange(64, dtype=np.float64)[:, None]
    base = 0.5 + 0.4 * np.sin(2 * np.pi * ys / 6.0) * np.ones((1, 64))
    base += 0.05 * (smooth_texture(rng, 64, 64) - 0.5)
    base = np.clip(base, 0, 1)
    img = Image(base[:, :, None])
    rot = Image(np.rot90(base).copy()[:, :, None])
    cfg = MatchConfig(scales=(1.0,), min_score=0.5)
    am, bm = extract_multiscale(img, cfg), extract_multiscale(rot, cfg)
    corrs = mutual_nn_match(am, bm, cfg)

    da = am[0].data.reshape(-1, 128).astype(np.float64)
    db = bm[0].data.reshape(-1, 128).astype(np.float64)
    ref = mutual_nn_ref([list(d) for d, v in zip(da, am[0].valid.reshape(-1)) if v],
                        [list(d) for d, v in zip(db, bm[0].valid.reshape(-1)) if v],
                        min_score=cfg.min_score)
    assert len(corrs) == len(ref)
    n_cells = int(am[0].valid.sum())
    assert len(corrs) <= 0.05 * n_cells
    # control: the unrotated pair keeps essentially every cell
    self_corrs = mutual_nn_match(am, am, cfg)
    assert len(self_corrs) >= 0.95 * n_cells


def test_mutual_nn_symmetry(rng):
    a = smooth_image(rng, 64, 64)
    b = smooth_image(rng, 72, 64)
    cfg = MatchConfig(scales=(0.75, 1.0))
    am, bm = extract_multiscale(a, cfg), extract_multiscale(b, cfg)
    fwd = mutual_nn_match(am, bm, cfg)
    bwd = mutual_nn_match(bm, am, cfg)
    fwd_set = {(c.src, c.tgt, round(c.score, 6)) for c in fwd}
    bwd_set = {(c.tgt, c.src, round(c.score, 6)) for c in bwd}
    assert fwd_set == bwd_set


def test_match_coordinates_inside_images(rng):
    a = smooth_image(rng, 64, 96)
    b = smooth_image(rng, 96, 64)
    cfg = MatchConfig(scales=(0.5, 1.0, 2.0))
    corrs = mutual_nn_match(extract_multiscale(a, cfg), extract_multiscale(b, cfg), cfg)
    for c in corrs:
        assert 0 <= c.src[0] <= a.width - 1 and 0 <= c.src[1] <= a.height - 1
        assert 0 <= c.tgt[0] <= b.width - 1 and 0 <= c.tgt[1] <= b.height - 1


def test_empty_descriptor_set_gives_empty_result():
    img = Image(np.full((64, 64, 1), 0.2))
    cfg = _identity_cfg()
    maps = extract_multiscale(img, cfg)
    assert mutual_nn_match(maps, maps, cfg) == []


def test_match_config_validation():
    with pytest.raises(ValueError):
        MatchConfig(scales=())
    with pytest.raises(ValueError):
        MatchConfig(scales=(1.0, -1.0))
