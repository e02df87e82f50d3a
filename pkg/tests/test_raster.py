import numpy as np
import pytest
from PIL import Image

from terracover import raster
from terracover.errors import RasterError
from terracover.raster import NODATA


def test_image_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, (7, 5, 3), dtype=np.uint8)
    raster.save_image(tmp_path / "a.png", img)
    np.testing.assert_array_equal(raster.load_image(tmp_path / "a.png"), img)


def test_mask_round_trip(tmp_path, rng):
    mask = rng.integers(0, 5, (9, 4), dtype=np.uint8)
    mask[0, 0] = NODATA
    raster.save_mask(tmp_path / "m.png", mask)
    np.testing.assert_array_equal(raster.load_mask(tmp_path / "m.png", 5), mask)


def test_mask_value_out_of_range(tmp_path):
    mask = np.array([[0, 5]], np.uint8)
    raster.save_mask(tmp_path / "m.png", mask)
    with pytest.raises(RasterError):
        raster.load_mask(tmp_path / "m.png", 5)


def test_single_pixel_image(tmp_path):
    raster.save_image(tmp_path / "p.png", np.zeros((1, 1, 3), np.uint8))
    out = raster.load_image(tmp_path / "p.png")
    assert out.shape == (1, 1, 3) and not out.any()


def test_rejects_rgba_and_undecodable(tmp_path):
    Image.new("RGBA", (2, 2)).save(tmp_path / "rgba.png")
    with pytest.raises(RasterError, match="3-channel"):
        raster.load_image(tmp_path / "rgba.png")
    (tmp_path / "junk.png").write_bytes(b"not a png")
    with pytest.raises(RasterError, match="decode"):
        raster.load_image(tmp_path / "junk.png")


def _pair(h, w, rng):
    return (rng.integers(0, 256, (h, w, 3), dtype=np.uint8),
            rng.integers(0, 4, (h, w), dtype=np.uint8))


def test_tile_single(rng):
    img, mask = _pair(120, 120, rng)
    tiles = raster.tile_pair(img, mask)
    assert [t.patch_id for t in tiles] == ["r0_c0"]


def test_tile_drops_margins(rng):
    img, mask = _pair(125, 121, rng)
    tiles = raster.tile_pair(img, mask)
    assert len(tiles) == 1
    np.testing.assert_array_equal(tiles[0].image, img[:120, :120])


def test_tile_order_and_ids(rng):
    img, mask = _pair(240, 360, rng)
    tiles = raster.tile_pair(img, mask)
    assert [t.patch_id for t in tiles] == [f"r{r}_c{c}" for r in range(2) for c in range(3)]
    again = raster.tile_pair(img, mask)
    assert [t.patch_id for t in again] == [t.patch_id for t in tiles]


def test_tile_errors(rng):
    img, mask = _pair(120, 120, rng)
    with pytest.raises(RasterError):
        raster.tile_pair(img, mask[:100])
    with pytest.raises(RasterError):
        raster.tile_pair(img, mask, patch=0)


def test_reassemble_round_trip(rng):
    img, mask = _pair(240, 360, rng)
    out_img, out_mask = raster.reassemble(raster.tile_pair(img, mask), 2, 3)
    np.testing.assert_array_equal(out_img, img)
    np.testing.assert_array_equal(out_mask, mask)


def test_reassemble_single_patch(rng):
    img, mask = _pair(120, 120, rng)
    out_img, out_mask = raster.reassemble(raster.tile_pair(img, mask), 1, 1)
    np.testing.assert_array_equal(out_img, img)


def test_reassemble_missing_and_duplicate(rng):
    img, mask = _pair(240, 360, rng)
    tiles = raster.tile_pair(img, mask)
    with pytest.raises(RasterError, match="missing patch r0_c1"):
        raster.reassemble([t for t in tiles if t.patch_id != "r0_c1"], 2, 3)
    with pytest.raises(RasterError, match="duplicate"):
        raster.reassemble(tiles + tiles[:1], 2, 3)


def test_tiling_partition(rng):
    img, mask = _pair(250, 370, rng)
    tiles = raster.tile_pair(img, mask, patch=60)
    got = np.sort(np.concatenate([t.mask.ravel() for t in tiles]))
    np.testing.assert_array_equal(got, np.sort(mask[:240, :360].ravel()))


def test_write_and_read_patches(tmp_path, rng):
    img, mask = _pair(120, 240, rng)
    ids = raster.write_patches(raster.tile_pair(img, mask), tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == [
        "r0_c0_img.png", "r0_c0_mask.png", "r0_c1_img.png", "r0_c1_mask.png"]
    back = raster.read_patch(tmp_path, ids[1], 4)
    np.testing.assert_array_equal(back.image, img[:, 120:])
