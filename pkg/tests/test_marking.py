"""Marking tests: id assignment ordering, registry lookups, and rendering."""

import itertools
import random
from pathlib import Path

import numpy as np
import pytest

from optic.geometry import BoundingBox, ImageDims
from optic.marking import (
    Candidate,
    MarkSheet,
    MarkStyle,
    RasterImage,
    assign_marks,
    badge_geometry,
    lookup,
    render_marked,
)

DATA = Path(__file__).parent / "data"


def gradient_image(width=64, height=64) -> RasterImage:
    """Deterministic non-uniform background so no-op checks are meaningful."""
    ys, xs = np.mgrid[0:height, 0:width]
    arr = np.stack([(xs * 3) % 256, (ys * 5) % 256, (xs + ys) % 256], axis=-1)
    return RasterImage.from_array(arr.astype(np.uint8))


def random_sheet(rng: random.Random, max_candidates=6, dims=ImageDims(64, 64)) -> MarkSheet:
    n = rng.randint(0, max_candidates)
    detections = []
    for _ in range(n):
        x1, x2 = sorted(rng.uniform(0, dims.width) for _ in range(2))
        y1, y2 = sorted(rng.uniform(0, dims.height) for _ in range(2))
        detections.append(
            (BoundingBox(x1, y1, x2, y2), rng.random(), rng.choice(["cat", "dog", "cup"]))
        )
    return assign_marks(detections, dims)


class TestAssignMarks:
    def test_score_order(self):
        dims = ImageDims(100, 100)
        sheet = assign_marks(
            [
                (BoundingBox(0, 0, 10, 10), 0.7, "chair"),
                (BoundingBox(20, 0, 30, 10), 0.9, "chair"),
            ],
            dims,
        )
        assert [c.mark_id for c in sheet.candidates] == [1, 2]
        assert sheet.candidates[0].score == 0.9
        assert sheet.candidates[1].score == 0.7

    def test_empty(self):
        sheet = assign_marks([], ImageDims(10, 10))
        assert len(sheet) == 0

    def test_tie_break_by_x_min(self):
        # hand-applied sort: 0.8@x=10 -> 1, 0.8@x=40 -> 2, 0.5@x=0 -> 3
        dims = ImageDims(100, 100)
        detections = [
            (BoundingBox(40, 0, 50, 10), 0.8, "a"),
            (BoundingBox(10, 0, 20, 10), 0.8, "a"),
            (BoundingBox(0, 0, 5, 10), 0.5, "a"),
        ]
        sheet = assign_marks(detections, dims)
        by_id = {c.mark_id: c.box.x_min for c in sheet.candidates}
        assert by_id == {1: 10, 2: 40, 3: 0}

        # cross-check against a brute-force comparator over all orderings
        def brute_force(dets):
            best = None
            for perm in itertools.permutations(dets):
                ok = all(
                    (perm[i][1] > perm[i + 1][1])
                    or (perm[i][1] == perm[i + 1][1] and perm[i][0].x_min <= perm[i + 1][0].x_min)
                    for i in range(len(perm) - 1)
                )
                if ok:
                    best = perm
                    break
            return [d[0].x_min for d in best]

        assert [c.box.x_min for c in sheet.candidates] == brute_force(detections)

    def test_permutation_invariance(self):
        rng = random.Random(7)
        dims = ImageDims(64, 64)
        detections = []
        for _ in range(8):
            x1, x2 = sorted(rng.uniform(0, 64) for _ in range(2))
            y1, y2 = sorted(rng.uniform(0, 64) for _ in range(2))
            detections.append((BoundingBox(x1, y1, x2, y2), rng.choice([0.3, 0.7]), "p"))
        reference = assign_marks(detections, dims)
        for _ in range(10):
            shuffled = detections[:]
            rng.shuffle(shuffled)
            assert assign_marks(shuffled, dims) == reference

    def test_out_of_frame_boxes_are_clamped(self):
        dims = ImageDims(50, 50)
        sheet = assign_marks([(BoundingBox(-10, -10, 60, 60), 0.5, "x")], dims)
        assert sheet.candidates[0].box == BoundingBox(0, 0, 50, 50)


class TestLookup:
    def test_present(self):
        sheet = random_sheet(random.Random(1), max_candidates=6)
        for c in sheet.candidates:
            assert lookup(sheet, c.mark_id) == c

    def test_absent(self):
        sheet = assign_marks(
            [(BoundingBox(0, 0, 5, 5), 0.9, "a"), (BoundingBox(5, 5, 9, 9), 0.8, "a")],
            ImageDims(10, 10),
        )
        assert lookup(sheet, 5) is None

    def test_empty_sheet(self):
        assert lookup(assign_marks([], ImageDims(10, 10)), 1) is None

    def test_bijection_over_random_sheets(self):
        rng = random.Random(99)
        for _ in range(200):
            sheet = random_sheet(rng)
            n = len(sheet)
            for i in range(1, n + 1):
                found = lookup(sheet, i)
                assert found is not None and found.mark_id == i
            for i in (0, -1, n + 1, n + 17):
                assert lookup(sheet, i) is None


class TestMarkSheetInvariants:
    def test_sparse_ids_rejected(self):
        dims = ImageDims(10, 10)
        c1 = Candidate(1, BoundingBox(0, 0, 5, 5), 0.5, "a")
        c3 = Candidate(3, BoundingBox(0, 0, 5, 5), 0.5, "a")
        with pytest.raises(ValueError):
            MarkSheet(candidates=(c1, c3), image_dims=dims)

    def test_out_of_bounds_box_rejected(self):
        dims = ImageDims(10, 10)
        c1 = Candidate(1, BoundingBox(0, 0, 15, 5), 0.5, "a")
        with pytest.raises(ValueError):
            MarkSheet(candidates=(c1,), image_dims=dims)

    def test_score_range_enforced(self):
        with pytest.raises(ValueError):
            Candidate(1, BoundingBox(0, 0, 5, 5), 1.5, "a")


class TestRender:
    def test_empty_sheet_is_identity(self):
        img = gradient_image()
        sheet = assign_marks([], img.dims)
        assert render_marked(img, sheet).pixels == img.pixels

    def test_input_never_mutated(self):
        img = gradient_image()
        before = bytes(img.pixels)
        sheet = assign_marks([(BoundingBox(10, 10, 50, 50), 0.9, "a")], img.dims)
        render_marked(img, sheet)
        assert img.pixels == before

    def test_repeat_render_bit_identical(self):
        img = gradient_image()
        sheet = assign_marks(
            [(BoundingBox(10, 10, 50, 50), 0.9, "a"), (BoundingBox(5, 5, 30, 30), 0.4, "b")],
            img.dims,
        )
        assert render_marked(img, sheet).pixels == render_marked(img, sheet).pixels

    def test_badge_present_at_box_center(self):
        img = gradient_image()
        sheet = assign_marks([(BoundingBox(10, 10, 50, 50), 0.9, "a")], img.dims)
        out = render_marked(img, sheet)
        region = out.to_array()[28:33, 28:33]
        assert not np.array_equal(region, img.to_array()[28:33, 28:33])

    def test_badge_centered_on_box_center(self):
        # outlines off so the badge is the only change; its rect must center
        # on the box center within one pixel of rounding
        img = gradient_image(128, 128)
        style = MarkStyle(draw_outlines=False)
        sheet = assign_marks([(BoundingBox(20, 30, 80, 90), 0.9, "a")], img.dims)
        out = render_marked(img, sheet, style)
        diff = np.any(out.to_array() != img.to_array(), axis=-1)
        rows = np.where(diff.any(axis=1))[0]
        cols = np.where(diff.any(axis=0))[0]
        badge_cy = (rows.min() + rows.max() + 1) / 2
        badge_cx = (cols.min() + cols.max() + 1) / 2
        assert abs(badge_cx - 50) <= 1 and abs(badge_cy - 60) <= 1

    def test_badge_dims_match_geometry(self):
        img = gradient_image(128, 128)
        style = MarkStyle(draw_outlines=False)
        sheet = assign_marks([(BoundingBox(20, 30, 80, 90), 0.9, "a")], img.dims)
        out = render_marked(img, sheet, style)
        diff = np.any(out.to_array() != img.to_array(), axis=-1)
        rows = np.where(diff.any(axis=1))[0]
        cols = np.where(diff.any(axis=0))[0]
        w, h = badge_geometry(1, style)
        assert cols.max() - cols.min() + 1 == w
        assert rows.max() - rows.min() + 1 == h

    def test_later_badge_drawn_on_top(self):
        img = gradient_image(128, 128)
        style = MarkStyle(draw_outlines=False)
        sheet = assign_marks(
            [
                (BoundingBox(30, 30, 70, 70), 0.9, "a"),
                (BoundingBox(34, 34, 74, 74), 0.8, "a"),
            ],
            img.dims,
        )
        out = render_marked(img, sheet, style)
        arr = out.to_array()
        color2 = style.palette[1]
        w2, h2 = badge_geometry(2, style)
        # badge 2 is centered at (54, 54); every pixel in its rect belongs to
        # it (fill or digit), never to badge 1 underneath
        x0, y0 = 54 - w2 // 2, 54 - h2 // 2
        rect = arr[y0 : y0 + h2, x0 : x0 + w2].reshape(-1, 3)
        allowed = {tuple(color2), style.text_color}
        assert {tuple(p) for p in rect} <= allowed

    def test_both_outlines_present_when_overlapping(self):
        img = gradient_image(128, 128)
        style = MarkStyle()
        sheet = assign_marks(
            [
                (BoundingBox(10, 10, 60, 60), 0.9, "a"),
                (BoundingBox(40, 40, 100, 100), 0.8, "a"),
            ],
            img.dims,
        )
        arr = render_marked(img, sheet, style).to_array()
        # a point on each outline away from the other box and the badges
        assert tuple(arr[10, 30]) == style.palette[0]
        assert tuple(arr[99, 70]) == style.palette[1]

    def test_badge_clipped_at_frame(self):
        img = gradient_image(16, 16)
        sheet = assign_marks([(BoundingBox(0, 0, 2, 2), 0.9, "a")], img.dims)
        out = render_marked(img, sheet)  # badge around (1,1) pokes out of frame
        assert out.width == 16 and out.height == 16

    def test_golden_single_candidate(self):
        golden_path = DATA / "golden_mark.png"
        img = RasterImage.new(64, 64, (200, 200, 200))
        sheet = assign_marks([(BoundingBox(10, 10, 50, 50), 0.9, "chair")], img.dims)
        out = render_marked(img, sheet)
        golden = RasterImage.decode(golden_path.read_bytes())
        assert out.pixels == golden.pixels


class TestRasterImage:
    def test_buffer_length_enforced(self):
        with pytest.raises(ValueError):
            RasterImage(4, 4, b"\x00" * 10)

    def test_png_round_trip(self):
        img = gradient_image(20, 12)
        again = RasterImage.decode(img.to_png())
        assert again == img

    def test_png_encoding_deterministic(self):
        img = gradient_image(20, 12)
        assert img.to_png() == img.to_png()

    def test_jpeg_decodes(self):
        import io

        from PIL import Image

        im = Image.new("RGB", (8, 8), (10, 20, 30))
        buf = io.BytesIO()
        im.save(buf, format="JPEG")
        img = RasterImage.decode(buf.getvalue())
        assert (img.width, img.height) == (8, 8)
