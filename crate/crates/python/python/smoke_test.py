"""Smoke test for the cams extension module.

Build and run:
    cd crates/python && maturin develop --release && python python/smoke_test.py
"""

import json
import os
import tempfile

import cams


def two_tone(size, inner, outer):
    lo, hi = size // 4, 3 * size // 4
    return cams.Image(
        [[inner if lo <= y < hi and lo <= x < hi else outer for x in range(size)] for y in range(size)]
    )


def stripes(size, a, b):
    return cams.Image([[a if (x // 2) % 2 else b for x in range(size)] for y in range(size)])


def main():
    content = two_tone(24, [0.1, 0.2, 0.8], [0.8, 0.1, 0.1])
    style = stripes(24, [0.05, 0.05, 0.7], [0.95, 0.8, 0.15])
    assert (content.height, content.width) == (24, 24)
    assert cams.Image.decode(content.png_bytes()).max_abs_diff(content) < 1 / 255

    ext = cams.extract_palette(style, 5)
    assert ext.degenerate and len(ext.colors) == 2
    assert abs(sum(ext.populations) - 1.0) < 1e-9
    merged = cams.merge_palettes(ext.palette("style"), cams.extract_palette(content, 5).palette("content"))
    assert len(merged) == 4 and merged.tags[:2] == ["style", "style"]
    assert cams.Palette.from_json(merged.to_json()).colors == merged.colors

    mask = cams.color_mask(content, content.pixel(0, 0))
    assert mask[0][0] == 1.0 and mask[12][12] < 1.0
    assert len(cams.color_masks(content, merged)) == 4

    backbone = cams.Backbone.tiny(0)
    cfg = cams.TransferConfig(iterations=4, snapshot_every=2, seed=3)
    assert cfg.iterations == 4 and cfg.mode == "auto"
    try:
        cams.TransferConfig(sigma=-1.0)
        raise AssertionError("negative sigma accepted")
    except ValueError:
        pass

    seen = []
    result = cams.run_transfer(content, style, backbone, cfg, progress=lambda i, losses, snap: seen.append((i, snap is not None)))
    assert result.iterations_run == 4
    assert result.final_total() <= result.initial_total()
    assert seen[0] == (0, False) and (2, True) in seen and seen[-1] == (4, True)
    assert all("cams" in r for r in result.loss_history)

    again = cams.run_transfer(content, style, backbone, cfg)
    assert again.image.max_abs_diff(result.image) == 0.0

    try:
        cams.run_transfer(content, style, backbone, cfg, progress=lambda i, l, s: i >= 1)
        raise AssertionError("cancel ignored")
    except KeyboardInterrupt:
        pass

    manual = cams.TransferConfig(iterations=2)
    manual.set_associations([(0, 0), (1, 1)])
    assert manual.mode == "manual"
    cams.run_transfer(content, style, backbone, manual)

    base = cams.run_transfer(content, style, backbone, cams.TransferConfig(iterations=2), baseline=True)
    assert "style" in base.loss_history[0]

    report = cams.evaluate(content, content, style, backbone)
    assert report["content"] == 0.0 and report["color_aware"] > 0.0

    with tempfile.TemporaryDirectory() as d:
        out = os.path.join(d, "out.png")
        written = result.export(out)
        assert os.path.exists(out) and len(written) >= 3
        with open(out + ".palettes.json") as f:
            assert json.load(f)["merged"] is not None

    print("python smoke test ok:", cams.__version__, backbone.checksum())


if __name__ == "__main__":
    main()
