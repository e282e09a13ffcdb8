import io
import math
import re

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hivetrack.detections import (Detection, DetectionError, DetectionTable, FrameImage,
                                  ImageFormatError, ObjectClass, decode_pgm, encode_pgm,
                                  load_frame_image, parse_detections, serialize_detections,
                                  validate_table)

HEADER = "frame,x,y,class,angle\n"


def parse(body):
    return parse_detections(io.StringIO(HEADER + body))


def test_object_class_has_two_values():
    assert [c.value for c in ObjectClass] == [0, 1]


def test_parse_full_bee():
    table = parse("0,100.0,200.0,0,1.5708\n")
    (d,) = list(table)
    assert (d.frame, d.x, d.y, d.cls, d.angle) == (0, 100.0, 200.0, ObjectClass.FullBee, 1.5708)


def test_parse_abdomen():
    (d,) = list(parse("5,10,20,1,0.0\n"))
    assert d.cls == ObjectClass.Abdomen and d.angle == 0.0 and (d.x, d.y) == (10, 20)


@pytest.mark.parametrize("row, message", [
    ("5,10,20,1,0.3", "abdomen with nonzero angle, line 2"),
    ("5,10,20,2,0.0", "line 2"),
    ("5,ten,20,0,0.0", "non-numeric field, line 2"),
    ("5,10,20,0,7.0", "outside [0, 2pi), line 2"),
    ("5,10,20,0", "line 2"),
])
def test_parse_errors_name_the_line(row, message):
    with pytest.raises(DetectionError, match=re.escape(message)):
        parse(row + "\n")


def test_parse_aborts_on_first_error():
    with pytest.raises(DetectionError, match="line 3"):
        parse("0,1,1,0,0\n1,1,1,1,0.5\n2,1,1,1,0.7\n")


def test_parse_sorts_frames_keeping_row_order():
    table = parse("3,1,1,0,0\n1,2,2,0,0\n3,0,0,1,0\n1,5,5,0,0\n")
    assert list(table.frames) == [1, 3]
    assert [d.x for d in table.frames[1]] == [2, 5]
    assert [d.x for d in table.frames[3]] == [1, 0]


def test_bad_header():
    with pytest.raises(DetectionError, match="header"):
        parse_detections(io.StringIO("f,x,y,c,a\n"))


def test_abdomen_invariant_at_construction():
    with pytest.raises(DetectionError):
        Detection(0, 1.0, 1.0, ObjectClass.Abdomen, 0.1)


detection_rows = st.tuples(
    st.integers(0, 50),
    st.floats(0, 1000, allow_nan=False),
    st.floats(0, 1000, allow_nan=False),
    st.sampled_from([0, 1]),
    st.floats(0, 2 * math.pi, exclude_max=True),
)


@settings(max_examples=60, deadline=None)
@given(st.lists(detection_rows, max_size=30))
def test_roundtrip_preserves_multiset(rows):
    text = HEADER + "".join(
        f"{f},{x!r},{y!r},{c},{a if c == 0 else 0.0!r}\n" for f, x, y, c, a in rows)
    table = parse_detections(io.StringIO(text))
    out = serialize_detections(table)
    again = parse_detections(io.StringIO(out))
    assert serialize_detections(again) == out
    expected = sorted(
        (f, f"{x:.6f}", f"{y:.6f}", str(c), f"{(a if c == 0 else 0.0):.6f}") for f, x, y, c, a in rows)
    got = sorted((int(p[0]), *p[1:]) for p in (line.split(",") for line in out.splitlines()[1:]))
    assert got == expected
    frames = [int(line.split(",")[0]) for line in out.splitlines()[1:]]
    assert frames == sorted(frames)


def test_validate_all_inside():
    table = parse("0,1,1,0,0\n1,2,2,0,0\n")
    assert validate_table(table, (100, 100)).violations == 0


def test_validate_out_of_bounds():
    table = parse("0,105,1,0,0\n")
    report = validate_table(table, (100, 100))
    assert report.violations == 1 and report.out_of_bounds[0].x == 105


def test_validate_count_statistics():
    body = "".join(f"0,{i},1,0,0\n" for i in range(10))
    body += "".join(f"1,{i},1,0,0\n" for i in range(10))
    body += "".join(f"2,{i},1,0,0\n" for i in range(13))
    report = validate_table(parse(body), (100, 100))
    counts = np.array([10, 10, 13])
    # independent oracle: population variance by hand
    mean = sum(counts) / 3
    var = sum((c - mean) ** 2 for c in counts) / 3
    assert report.mean_count == pytest.approx(11.0)
    assert report.std_count == pytest.approx(math.sqrt(2))
    assert report.std_count == pytest.approx(math.sqrt(var))


def test_validate_reports_empty_frames():
    report = validate_table(parse("0,1,1,0,0\n3,1,1,0,0\n"), (10, 10))
    assert report.empty_frames == [1, 2]


def test_table_rejects_misfiled_detection():
    with pytest.raises(DetectionError):
        DetectionTable({1: [Detection(2, 0.0, 0.0, ObjectClass.FullBee, 0.0)]})


def test_pgm_decode_bytes(tmp_path):
    p = tmp_path / "a.pgm"
    p.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 128, 255, 64]))
    img = load_frame_image(p)
    assert (img.width, img.height) == (2, 2)
    assert img.intensities.tolist() == [[0, 128], [255, 64]]


def test_pgm_truncated():
    with pytest.raises(ImageFormatError, match="truncated"):
        decode_pgm(b"P5\n2 2\n255\n" + bytes([0, 1, 2]))


def test_pgm_ascii_variant_rejected():
    with pytest.raises(ImageFormatError, match="unsupported PGM variant"):
        decode_pgm(b"P2\n2 2\n255\n0 1 2 3\n")


def test_pgm_wrong_magic_and_maxval():
    with pytest.raises(ImageFormatError, match="magic"):
        decode_pgm(b"GIF89a")
    with pytest.raises(ImageFormatError, match="max value"):
        decode_pgm(b"P5\n1 1\n65535\n\x00\x00")


def test_pgm_comment_and_roundtrip():
    img = decode_pgm(b"P5\n# made by hand\n3 1\n255\n\x01\x02\x03")
    assert img.intensities.tolist() == [[1, 2, 3]]
    again = decode_pgm(encode_pgm(img))
    assert np.array_equal(again.intensities, img.intensities)


def test_frame_image_shape_checked():
    with pytest.raises(ImageFormatError):
        FrameImage(3, 2, np.zeros((3, 3), np.uint8))
