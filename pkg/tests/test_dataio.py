import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from langtraj.dataio import (
    ExampleConfig,
    FormatError,
    Scene,
    assemble_examples,
    parse_map,
    parse_scene_csv,
    read_shards,
    serialize_map,
    serialize_scene_csv,
    write_shards,
)
from langtraj.geom import LaneCenterline, MapGraph

HEADER = "TIMESTAMP,TRACK_ID,OBJECT_TYPE,X,Y,CITY_NAME\n"


def _line_track(aid, x0, y0, vx=5.0, n=50, dt=0.1, t0=0.0):
    t = t0 + dt * np.arange(n)
    return aid, np.column_stack([t, x0 + vx * (t - t0), np.full(n, y0)])


def test_two_rows_one_track():
    sc = parse_scene_csv(HEADER + "0.0,a,AGENT,1,2,PIT\n0.1,a,AGENT,2,2,PIT\n")
    assert list(sc.tracks) == ["a"]
    assert sc.tracks["a"].shape == (2, 3)


def test_rows_sorted_by_time():
    sc = parse_scene_csv(HEADER + "0.2,a,AGENT,3,0,PIT\n0.0,a,AGENT,1,0,PIT\n0.1,a,AGENT,2,0,PIT\n")
    np.testing.assert_array_equal(sc.tracks["a"][:, 0], [0.0, 0.1, 0.2])
    np.testing.assert_array_equal(sc.tracks["a"][:, 1], [1, 2, 3])


def test_duplicate_rows_last_wins_and_round_trip():
    text = HEADER + "0.0,a,AGENT,1,0,PIT\n0.0,a,AGENT,9,0,PIT\n0.1,a,AGENT,2,0,PIT\n"
    sc = parse_scene_csv(text)
    assert sc.duplicates == 1
    assert sc.tracks["a"][0, 1] == 9.0
    again = parse_scene_csv(serialize_scene_csv(sc))
    assert again == sc and again.duplicates == 0


def test_missing_column_named():
    with pytest.raises(FormatError, match="missing column Y"):
        parse_scene_csv("TIMESTAMP,TRACK_ID,OBJECT_TYPE,X,CITY_NAME\n0,a,AGENT,1,PIT\n")


def test_non_numeric_has_line_number():
    with pytest.raises(FormatError) as err:
        parse_scene_csv(HEADER + "0.0,a,AGENT,1,0,PIT\n0.1,a,AGENT,oops,0,PIT\n", source="s.csv")
    assert err.value.line == 3
    assert "s.csv:3:" in str(err.value)


def test_map_parsing():
    assert len(parse_map('{"centerlines": [{"id": 1, "polyline": [[0, 0], [1, 0]]}]}')) == 1
    assert parse_map("[]").empty
    with pytest.raises(FormatError, match="duplicate"):
        parse_map('[{"id": 1, "polyline": [[0, 0], [1, 0]]}, {"id": 1, "polyline": [[0, 1], [1, 1]]}]')
    with pytest.raises(FormatError):
        parse_map('[{"id": 1, "polyline": [[0, 0]]}]')


@settings(max_examples=30, deadline=None)
@given(
    st.lists(
        st.tuples(st.floats(-1e4, 1e4, allow_nan=False), st.floats(-1e4, 1e4, allow_nan=False)),
        min_size=2, max_size=20,
    ),
    st.lists(st.floats(-1e3, 1e3, allow_nan=False, allow_subnormal=False), min_size=2, max_size=6, unique=True),
)
def test_round_trip_bit_exact(xy, poly_x):
    t = 0.1 * np.arange(len(xy))
    sc = Scene("s", {"a": np.column_stack([t, np.array(xy)])}, {"a": "AGENT"}, "PIT")
    assert parse_scene_csv(serialize_scene_csv(sc), "s") == sc
    poly = np.column_stack([sorted(poly_x), np.zeros(len(poly_x))])
    mp = MapGraph([LaneCenterline(3, poly)])
    back = parse_map(serialize_map(mp))
    assert np.array_equal(back.centerlines[0].polyline, poly)


def test_single_full_track_one_example():
    aid, tr = _line_track("a", 0.0, 0.0)
    exs = assemble_examples(Scene("s", {aid: tr}), MapGraph([]))
    assert len(exs) == 1
    ex = exs[0]
    assert ex.positions.shape == (1, 50, 2) and ex.valid.all()
    assert ex.neighbor_order == ["a"]


def test_nearest_neighbours_brute_force():
    rng = np.random.default_rng(3)
    tracks = dict([_line_track("tgt", 0.0, 0.0)])
    for k in range(6):
        aid, tr = _line_track(f"n{k}", *rng.uniform(-30, 30, 2))
        tracks[aid] = tr
    cfg = ExampleConfig(a_max=4)
    ex = next(e for e in assemble_examples(Scene("s", tracks), MapGraph([]), cfg) if e.example_id == "s:tgt")
    # oracle: sort every other agent by distance to the target at t=0
    now = cfg.past - 1
    d = {aid: np.hypot(*(tr[now, 1:] - tracks["tgt"][now, 1:])) for aid, tr in tracks.items() if aid != "tgt"}
    expected = sorted(d, key=lambda a: (d[a], a))[:3]
    assert ex.neighbor_order == ["tgt"] + expected
    assert ex.num_agents == 4


def test_gap_excludes_target_but_keeps_neighbour_masked():
    _, full = _line_track("a", 0.0, 0.0)
    _, gappy = _line_track("b", 0.0, 5.0)
    gappy = np.delete(gappy, np.arange(30, 40), axis=0)  # 1 s hole in the future
    exs = assemble_examples(Scene("s", {"a": full, "b": gappy}), MapGraph([]))
    assert [e.example_id for e in exs] == ["s:a"]
    ex = exs[0]
    assert ex.neighbor_order == ["a", "b"]
    v = ex.valid[1]
    assert v[:30].all() and not v[30:40].any() and v[40:].all()
    # reconstruction: valid steps hold the original positions
    np.testing.assert_allclose(ex.positions[1, v], gappy[:, 1:][np.isin(np.round(gappy[:, 0], 6), np.round(0.1 * np.nonzero(v)[0], 6))])


def test_shards_round_trip_and_checksum(tmp_path):
    aid, tr = _line_track("a", 0.0, 0.0)
    exs = assemble_examples(Scene("s", {aid: tr}), MapGraph([LaneCenterline(1, [[0, 0], [10, 0]])]))
    exs[0].caption = [16, 0, 17, 18, 18, 18, 18, 18]
    write_shards(exs, str(tmp_path))
    back = read_shards(str(tmp_path))
    assert back[0].caption == exs[0].caption
    np.testing.assert_array_equal(back[0].positions, exs[0].positions)
    shard = next(tmp_path.glob("*.jsonl"))
    shard.write_text(shard.read_text().replace("0.5", "0.6", 1))
    with pytest.raises(FormatError, match="checksum"):
        read_shards(str(tmp_path))
