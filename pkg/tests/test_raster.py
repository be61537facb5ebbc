import numpy as np
import pytest

from tsrpipe.errors import (
    DegenerateHistogramError,
    MalformedHeaderError,
    RectOutOfBoundsError,
    TruncatedDataError,
    UnsupportedMaxvalError,
)
from tsrpipe.raster import (
    RgbImage,
    coverage,
    histogram256,
    otsu_threshold,
    read_image,
    tissue_mask,
    to_grayscale,
    write_image,
)


def solid_image(w, h, rgb, mpp=0.5):
    data = np.zeros((h, w, 3), dtype=np.uint8)
    data[:] = rgb
    return RgbImage(data, mpp)


# ----------------------------------------------------------------------
# PPM codec
# ----------------------------------------------------------------------

class TestPpmCodec:
    def test_minimal_white_pixel(self, tmp_path):
        path = tmp_path / "white.ppm"
        path.write_bytes(b"P6\n1 1\n255\n\xff\xff\xff")
        img = read_image(path)
        assert (img.width, img.height) == (1, 1)
        assert tuple(img.data[0, 0]) == (255, 255, 255)
        assert img.mpp == 0.5  # default when no sidecar

    def test_round_trip_identical_bytes(self, tmp_path):
        rng = np.random.default_rng(0)
        img = RgbImage(rng.integers(0, 256, (13, 7, 3), dtype=np.uint8), mpp=0.25)
        p1, p2 = tmp_path / "a.ppm", tmp_path / "b.ppm"
        write_image(p1, img)
        back = read_image(p1)
        assert np.array_equal(back.data, img.data)
        assert back.mpp == 0.25
        write_image(p2, back)
        assert p1.read_bytes() == p2.read_bytes()

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P5\n1 1\n255\n\xff")
        with pytest.raises(MalformedHeaderError):
            read_image(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short.ppm"
        path.write_bytes(b"P6\n2 2\n255\n" + b"\x00" * 5)
        with pytest.raises(TruncatedDataError):
            read_image(path)

    def test_unsupported_maxval(self, tmp_path):
        path = tmp_path / "deep.ppm"
        path.write_bytes(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00")
        with pytest.raises(UnsupportedMaxvalError):
            read_image(path)

    def test_header_comments_and_whitespace(self, tmp_path):
        path = tmp_path / "c.ppm"
        path.write_bytes(b"P6 # a comment\n# full line\n 2\t1 \n255\n" + b"\x01" * 6)
        img = read_image(path)
        assert (img.width, img.height) == (2, 1)

    def test_non_numeric_header(self, tmp_path):
        path = tmp_path / "n.ppm"
        path.write_bytes(b"P6\nx 1\n255\n\x00\x00\x00")
        with pytest.raises(MalformedHeaderError):
            read_image(path)


# ----------------------------------------------------------------------
# Grayscale
# ----------------------------------------------------------------------

class TestGrayscale:
    def test_white_is_255_black_is_0(self):
        assert to_grayscale(solid_image(2, 2, (255, 255, 255)))[0, 0] == 255
        assert to_grayscale(solid_image(2, 2, (0, 0, 0)))[0, 0] == 0

    def test_pure_red(self):
        # round(0.299 * 255) = round(76.245) = 76
        assert to_grayscale(solid_image(1, 1, (255, 0, 0)))[0, 0] == 76

    def test_matches_scalar_formula(self):
        rng = np.random.default_rng(1)
        data = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
        gray = to_grayscale(RgbImage(data))
        for y, x in [(0, 0), (3, 7), (15, 15), (8, 2)]:
            r, g, b = (int(v) for v in data[y, x])
            expected = int(np.floor(0.299 * r + 0.587 * g + 0.114 * b + 0.5))
            assert gray[y, x] == expected

    def test_monotone_in_each_channel(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            base = rng.integers(0, 255, 3)
            chan = rng.integers(0, 3)
            hi = base.copy()
            hi[chan] += 1
            g_lo = to_grayscale(solid_image(1, 1, tuple(base)))[0, 0]
            g_hi = to_grayscale(solid_image(1, 1, tuple(hi)))[0, 0]
            assert g_hi >= g_lo


# ----------------------------------------------------------------------
# Otsu
# ----------------------------------------------------------------------

def otsu_bruteforce(hist):
    """Independent oracle: exhaustive scan of between-class variance."""
    hist = np.asarray(hist, dtype=float)
    total = hist.sum()
    best_t, best_sigma = 0, -1.0
    levels = np.arange(256)
    for t in range(256):
        w0 = hist[:t + 1].sum()
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            sigma = 0.0
        else:
            mu0 = (hist[:t + 1] * levels[:t + 1]).sum() / w0
            mu1 = (hist[t + 1:] * levels[t + 1:]).sum() / w1
            sigma = w0 * w1 * (mu0 - mu1) ** 2
        if sigma > best_sigma:
            best_t, best_sigma = t, sigma
    return best_t


class TestOtsu:
    def test_two_spikes_smallest_maximizer(self):
        h = np.zeros(256, dtype=np.int64)
        h[10] = 500
        h[200] = 500
        # sigma_b is constant-maximal for t in [10, 199]; smallest wins
        assert otsu_threshold(h) == 10
        assert otsu_bruteforce(h) == 10

    def test_single_bin_degenerate(self):
        h = np.zeros(256, dtype=np.int64)
        h[128] = 4096
        with pytest.raises(DegenerateHistogramError):
            otsu_threshold(h)

    def test_matches_bruteforce_on_random_histograms(self):
        rng = np.random.default_rng(3)
        for _ in range(60):
            h = rng.integers(0, 50, 256).astype(np.int64)
            if np.count_nonzero(h) < 2:
                continue
            assert otsu_threshold(h) == otsu_bruteforce(h)

    def test_random_image_histogram(self):
        rng = np.random.default_rng(4)
        img = RgbImage(rng.integers(0, 256, (64, 64, 3), dtype=np.uint8))
        h = histogram256(to_grayscale(img))
        assert h.sum() == 64 * 64
        assert otsu_threshold(h) == otsu_bruteforce(h)

    def test_invariant_under_count_scaling(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            h = rng.integers(0, 30, 256).astype(np.int64)
            if np.count_nonzero(h) < 2:
                continue
            assert otsu_threshold(h) == otsu_threshold(h * 7)

    def test_between_equals_within_argmin(self):
        # argmax of between-class variance == argmin of within-class variance
        rng = np.random.default_rng(6)
        levels = np.arange(256)
        for _ in range(10):
            h = rng.integers(0, 40, 256).astype(float)
            if np.count_nonzero(h) < 2:
                continue
            total = h.sum()
            best_t, best_w = 0, np.inf
            for t in range(256):
                w0, w1 = h[:t + 1].sum(), total - h[:t + 1].sum()
                if w0 == 0 or w1 == 0:
                    continue
                mu0 = (h[:t + 1] * levels[:t + 1]).sum() / w0
                mu1 = (h[t + 1:] * levels[t + 1:]).sum() / w1
                var0 = (h[:t + 1] * (levels[:t + 1] - mu0) ** 2).sum() / w0
                var1 = (h[t + 1:] * (levels[t + 1:] - mu1) ** 2).sum() / w1
                within = (w0 * var0 + w1 * var1) / total
                if within < best_w - 1e-9:
                    best_t, best_w = t, within
            assert otsu_threshold(h) == best_t


# ----------------------------------------------------------------------
# Tissue mask and coverage
# ----------------------------------------------------------------------

class TestTissueMask:
    def test_bimodal_image(self):
        data = np.zeros((4, 8, 3), dtype=np.uint8)
        data[:, :4] = 20
        data[:, 4:] = 230
        mask = tissue_mask(RgbImage(data))
        assert mask.shape == (4, 8)
        assert mask[:, :4].all() and not mask[:, 4:].any()

    def test_uniform_image_degenerate(self):
        with pytest.raises(DegenerateHistogramError):
            tissue_mask(solid_image(4, 4, (255, 255, 255)))


class TestCoverage:
    def test_full_and_empty(self):
        full = np.ones((8, 8), dtype=bool)
        assert coverage(full, (0, 0, 8, 8)) == 1.0
        assert coverage(~full, (2, 2, 4, 4)) == 0.0

    def test_fraction(self):
        m = np.zeros((4, 4), dtype=bool)
        m.ravel()[:12] = True
        assert coverage(m, (0, 0, 4, 4)) == 0.75

    def test_label_map_nonzero(self):
        lm = np.zeros((4, 4), dtype=np.uint8)
        lm[0, :] = 2
        assert coverage(lm, (0, 0, 4, 4)) == 0.25

    def test_out_of_bounds(self):
        m = np.ones((4, 4), dtype=bool)
        for rect in [(-1, 0, 2, 2), (3, 3, 2, 2), (0, 0, 5, 1), (0, 0, 0, 1)]:
            with pytest.raises(RectOutOfBoundsError):
                coverage(m, rect)

    def test_additive_over_partition(self):
        rng = np.random.default_rng(7)
        m = rng.random((16, 16)) < 0.4
        whole = coverage(m, (2, 2, 12, 10))
        parts = [(2, 2, 6, 10), (8, 2, 6, 10)]
        weighted = sum(coverage(m, r) * r[2] * r[3] for r in parts) / (12 * 10)
        assert whole == pytest.approx(weighted, abs=1e-12)
